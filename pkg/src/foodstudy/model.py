"""Domain types shared by every component, plus the eating-occasion lifecycle.

All types are immutable values; the operations here are pure functions.
Versioning discipline (who may bump ``EatingOccasion.version`` and when)
is enforced by the storage layer, not here.

Canonical JSON field names are snake_case, timestamps RFC 3339 strings,
ids opaque strings. The ``to_dict``/``from_dict`` pairs below define the
wire and export schema used by the server.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum

from .jsonutil import parse_rfc3339, to_rfc3339


class ModelError(Exception):
    """Base class for domain-rule violations raised by model operations."""


class IllegalTransition(ModelError):
    """A lifecycle move that is not the immediate successor of the current state."""


class UnknownPrediction(ModelError):
    """A review verdict references a prediction_id that does not exist."""


class MediaType(str, Enum):
    JPEG = "jpeg"
    PNG = "png"


class CaptureKind(str, Enum):
    BEFORE = "before"
    AFTER = "after"


class LifecycleState(str, Enum):
    UPLOADED = "uploaded"
    ANALYZED = "analyzed"
    PARTICIPANT_REVIEWED = "participant_reviewed"
    REFINED = "refined"
    FINALIZED = "finalized"


# Legal transitions are exactly consecutive pairs of this chain.
LIFECYCLE_ORDER: tuple[LifecycleState, ...] = (
    LifecycleState.UPLOADED,
    LifecycleState.ANALYZED,
    LifecycleState.PARTICIPANT_REVIEWED,
    LifecycleState.REFINED,
    LifecycleState.FINALIZED,
)

INITIALS_RE = re.compile(r"^[A-Z]{1,4}$")


@dataclass(frozen=True)
class CaptureMetadata:
    captured_at: datetime                       # UTC, timezone-aware
    gps: tuple[float, float] | None = None      # (latitude, longitude) degrees
    camera_pose_angle: float | None = None      # degrees from horizontal
    exif: dict[str, str] = field(default_factory=dict)
    fiducial_marker_present: bool = False
    fiducial_scale_mm_per_px: float | None = None

    def to_dict(self) -> dict:
        return {
            "captured_at": to_rfc3339(self.captured_at),
            "gps": None if self.gps is None else {
                "latitude": self.gps[0], "longitude": self.gps[1],
            },
            "camera_pose_angle": self.camera_pose_angle,
            "exif": dict(self.exif),
            "fiducial_marker_present": self.fiducial_marker_present,
            "fiducial_scale_mm_per_px": self.fiducial_scale_mm_per_px,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CaptureMetadata:
        gps = data.get("gps")
        return cls(
            captured_at=parse_rfc3339(data["captured_at"]),
            gps=None if gps is None else (float(gps["latitude"]), float(gps["longitude"])),
            camera_pose_angle=data.get("camera_pose_angle"),
            exif=dict(data.get("exif") or {}),
            fiducial_marker_present=bool(data.get("fiducial_marker_present", False)),
            fiducial_scale_mm_per_px=data.get("fiducial_scale_mm_per_px"),
        )


def validate_metadata(md: CaptureMetadata) -> list[str]:
    """Return the violated field names, empty when all invariants hold.

    Only range checks: no plausibility validation of GPS or pose angle.
    """
    violations = []
    if md.captured_at.tzinfo is None:
        violations.append("captured_at")
    if md.gps is not None:
        lat, lon = md.gps
        if not -90.0 <= lat <= 90.0:
            violations.append("gps.latitude")
        if not -180.0 <= lon <= 180.0:
            violations.append("gps.longitude")
    if not all(isinstance(k, str) and isinstance(v, str) for k, v in md.exif.items()):
        violations.append("exif")
    if md.fiducial_scale_mm_per_px is not None:
        if not md.fiducial_marker_present:
            violations.append("fiducial_marker_present")
        if md.fiducial_scale_mm_per_px <= 0:
            violations.append("fiducial_scale_mm_per_px")
    return violations


@dataclass(frozen=True)
class ImageCapture:
    kind: CaptureKind
    content_hash: str          # hex digest of the image bytes
    width_px: int
    height_px: int
    media_type: MediaType

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "content_hash": self.content_hash,
            "width_px": self.width_px,
            "height_px": self.height_px,
            "media_type": self.media_type.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ImageCapture:
        return cls(
            kind=CaptureKind(data["kind"]),
            content_hash=data["content_hash"],
            width_px=int(data["width_px"]),
            height_px=int(data["height_px"]),
            media_type=MediaType(data["media_type"]),
        )


@dataclass(frozen=True)
class EatingOccasion:
    occasion_id: str
    participant_id: str
    study_id: str
    before: ImageCapture
    metadata: CaptureMetadata
    after: ImageCapture | None = None
    state: LifecycleState = LifecycleState.UPLOADED
    version: int = 0

    def to_dict(self) -> dict:
        return {
            "occasion_id": self.occasion_id,
            "participant_id": self.participant_id,
            "study_id": self.study_id,
            "before": self.before.to_dict(),
            "after": None if self.after is None else self.after.to_dict(),
            "metadata": self.metadata.to_dict(),
            "state": self.state.value,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, data: dict) -> EatingOccasion:
        return cls(
            occasion_id=data["occasion_id"],
            participant_id=data["participant_id"],
            study_id=data["study_id"],
            before=ImageCapture.from_dict(data["before"]),
            after=None if data.get("after") is None else ImageCapture.from_dict(data["after"]),
            metadata=CaptureMetadata.from_dict(data["metadata"]),
            state=LifecycleState(data["state"]),
            version=int(data["version"]),
        )


@dataclass(frozen=True)
class PinLocation:
    x_px: int    # image coordinates, origin top-left, y increasing downward
    y_px: int

    def to_dict(self) -> dict:
        return {"x_px": self.x_px, "y_px": self.y_px}

    @classmethod
    def from_dict(cls, data: dict) -> PinLocation:
        return cls(x_px=int(data["x_px"]), y_px=int(data["y_px"]))


@dataclass(frozen=True)
class BoundingBox:
    x_px: int    # top-left corner
    y_px: int
    w_px: int
    h_px: int

    def to_dict(self) -> dict:
        return {"x_px": self.x_px, "y_px": self.y_px, "w_px": self.w_px, "h_px": self.h_px}

    @classmethod
    def from_dict(cls, data: dict) -> BoundingBox:
        return cls(int(data["x_px"]), int(data["y_px"]), int(data["w_px"]), int(data["h_px"]))


@dataclass(frozen=True)
class PredictedFood:
    prediction_id: str
    label: str
    pin: PinLocation
    confidence: float          # in [0, 1]
    food_code: str | None = None

    def to_dict(self) -> dict:
        return {
            "prediction_id": self.prediction_id,
            "label": self.label,
            "food_code": self.food_code,
            "pin": self.pin.to_dict(),
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, data: dict) -> PredictedFood:
        return cls(
            prediction_id=data["prediction_id"],
            label=data["label"],
            pin=PinLocation.from_dict(data["pin"]),
            confidence=float(data["confidence"]),
            food_code=data.get("food_code"),
        )


class VerdictKind(str, Enum):
    CONFIRMED = "confirmed"
    RELABELED = "relabeled"
    REMOVED = "removed"


@dataclass(frozen=True)
class Verdict:
    prediction_id: str
    kind: VerdictKind
    new_label: str | None = None   # set exactly when kind is RELABELED

    def to_dict(self) -> dict:
        d = {"prediction_id": self.prediction_id, "verdict": self.kind.value}
        if self.kind is VerdictKind.RELABELED:
            d["new_label"] = self.new_label
        return d

    @classmethod
    def from_dict(cls, data: dict) -> Verdict:
        kind = VerdictKind(data["verdict"])
        return cls(
            prediction_id=data["prediction_id"],
            kind=kind,
            new_label=data.get("new_label") if kind is VerdictKind.RELABELED else None,
        )


@dataclass(frozen=True)
class Addition:
    label: str
    pin: PinLocation

    def to_dict(self) -> dict:
        return {"label": self.label, "pin": self.pin.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> Addition:
        return cls(label=data["label"], pin=PinLocation.from_dict(data["pin"]))


@dataclass(frozen=True)
class ParticipantReview:
    verdicts: tuple[Verdict, ...]
    additions: tuple[Addition, ...]
    submitted_at: datetime

    def to_dict(self) -> dict:
        return {
            "verdicts": [v.to_dict() for v in self.verdicts],
            "additions": [a.to_dict() for a in self.additions],
            "submitted_at": to_rfc3339(self.submitted_at),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ParticipantReview:
        return cls(
            verdicts=tuple(Verdict.from_dict(v) for v in data.get("verdicts", [])),
            additions=tuple(Addition.from_dict(a) for a in data.get("additions", [])),
            submitted_at=parse_rfc3339(data["submitted_at"]),
        )


@dataclass(frozen=True)
class ConfirmedFood:
    """One participant-confirmed (label, pin) pair, the output unit of merge_review."""
    label: str
    pin: PinLocation

    def to_dict(self) -> dict:
        return {"label": self.label, "pin": self.pin.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> ConfirmedFood:
        return cls(label=data["label"], pin=PinLocation.from_dict(data["pin"]))


@dataclass(frozen=True)
class ResearcherAnnotation:
    annotation_id: str
    initials: str              # 1-4 uppercase letters; "SYS" for server drafts
    box: BoundingBox
    label: str
    created_at: datetime
    food_code: str | None = None
    energy_kcal: float | None = None
    energy_source: str | None = None   # "estimated" (pre-filled) or "manual"

    def to_dict(self) -> dict:
        return {
            "annotation_id": self.annotation_id,
            "initials": self.initials,
            "box": self.box.to_dict(),
            "label": self.label,
            "food_code": self.food_code,
            "energy_kcal": self.energy_kcal,
            "energy_source": self.energy_source,
            "created_at": to_rfc3339(self.created_at),
        }

    @classmethod
    def from_dict(cls, data: dict) -> ResearcherAnnotation:
        return cls(
            annotation_id=data["annotation_id"],
            initials=data["initials"],
            box=BoundingBox.from_dict(data["box"]),
            label=data["label"],
            created_at=parse_rfc3339(data["created_at"]),
            food_code=data.get("food_code"),
            energy_kcal=data.get("energy_kcal"),
            energy_source=data.get("energy_source"),
        )


def next_state(state: LifecycleState) -> LifecycleState | None:
    """The immediate successor in the lifecycle, or None for the terminal state."""
    idx = LIFECYCLE_ORDER.index(state)
    if idx + 1 == len(LIFECYCLE_ORDER):
        return None
    return LIFECYCLE_ORDER[idx + 1]


def advance_state(occasion: EatingOccasion, target: LifecycleState) -> EatingOccasion:
    """Move an occasion to ``target``, which must be the immediate successor.

    Returns a new occasion with the target state and version + 1.
    Raises IllegalTransition on skips, backward moves, or re-entry, and
    when advancing past UPLOADED without an after image (occasions are
    pairs; an unpaired record may not enter analysis).
    """
    successor = next_state(occasion.state)
    if target is not successor:
        raise IllegalTransition(
            f"cannot move from {occasion.state.value} to {target.value}"
        )
    if occasion.state is LifecycleState.UPLOADED and occasion.after is None:
        raise IllegalTransition("after image missing; occasion cannot leave uploaded")
    return dataclasses.replace(occasion, state=target, version=occasion.version + 1)


def validate_box(box: BoundingBox, image: ImageCapture) -> list[str]:
    """Check a bounding box against image dimensions.

    Returns the empty list when the box is valid, otherwise one message
    per violated constraint.
    """
    violations = []
    if box.w_px < 1:
        violations.append("w_px < 1")
    if box.h_px < 1:
        violations.append("h_px < 1")
    if box.x_px < 0:
        violations.append("x_px < 0")
    if box.y_px < 0:
        violations.append("y_px < 0")
    if box.x_px + box.w_px > image.width_px:
        violations.append(f"x_px + w_px > {image.width_px} (exceeds right edge)")
    if box.y_px + box.h_px > image.height_px:
        violations.append(f"y_px + h_px > {image.height_px} (exceeds bottom edge)")
    return violations


def validate_pin(pin: PinLocation, image: ImageCapture) -> list[str]:
    """Pin must lie strictly inside the image: 0 <= x < width, 0 <= y < height."""
    violations = []
    if not 0 <= pin.x_px < image.width_px:
        violations.append("pin.x_px out of range")
    if not 0 <= pin.y_px < image.height_px:
        violations.append("pin.y_px out of range")
    return violations


def validate_review(
    predictions: list[PredictedFood],
    review: ParticipantReview,
    before: ImageCapture | None = None,
) -> list[str]:
    """Return violations of the review invariants against the predictions.

    Checks id existence, at-most-one verdict per prediction, relabel
    labels non-empty, and (when the before image is given) addition pins
    in bounds.
    """
    violations = []
    known = {p.prediction_id for p in predictions}
    seen: set[str] = set()
    for v in review.verdicts:
        if v.prediction_id not in known:
            violations.append(f"unknown prediction_id {v.prediction_id!r}")
        if v.prediction_id in seen:
            violations.append(f"duplicate verdict for {v.prediction_id!r}")
        seen.add(v.prediction_id)
        if v.kind is VerdictKind.RELABELED and not (v.new_label or "").strip():
            violations.append(f"empty relabel for {v.prediction_id!r}")
    for i, add in enumerate(review.additions):
        if not add.label.strip():
            violations.append(f"additions[{i}].label empty")
        if before is not None:
            for msg in validate_pin(add.pin, before):
                violations.append(f"additions[{i}].{msg}")
    return violations


def merge_review(
    predictions: list[PredictedFood], review: ParticipantReview
) -> list[ConfirmedFood]:
    """Fold participant verdicts into the confirmed (label, pin) list.

    Output: confirmed predictions keep their original label, relabeled
    ones carry the new label, removed ones are dropped, additions follow
    in submission order. Pure function; predictions keep original order.

    Raises UnknownPrediction when a verdict references an id not present,
    and ValueError on duplicate verdicts for one prediction.
    """
    known = {p.prediction_id for p in predictions}
    by_id: dict[str, Verdict] = {}
    for v in review.verdicts:
        if v.prediction_id not in known:
            raise UnknownPrediction(f"no prediction with id {v.prediction_id!r}")
        if v.prediction_id in by_id:
            raise ValueError(f"duplicate verdict for prediction {v.prediction_id!r}")
        by_id[v.prediction_id] = v

    out: list[ConfirmedFood] = []
    for pred in predictions:
        verdict = by_id.get(pred.prediction_id)
        if verdict is None or verdict.kind is VerdictKind.REMOVED:
            continue
        if verdict.kind is VerdictKind.CONFIRMED:
            out.append(ConfirmedFood(label=pred.label, pin=pred.pin))
        else:
            out.append(ConfirmedFood(label=verdict.new_label or "", pin=pred.pin))
    for add in review.additions:
        out.append(ConfirmedFood(label=add.label, pin=add.pin))
    return out


def validate_initials(initials: str) -> bool:
    return bool(INITIALS_RE.match(initials))
