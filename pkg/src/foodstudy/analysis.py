"""Pluggable image-analysis boundary, refinement drafts, and evaluation metrics.

Real segmentation/classification/portion models are out of scope; two
deterministic stubs stand in for them. The ``external`` analyzer kind is
the declared integration point for such models and is intentionally not
implemented here.

Everything in this module is stateless and pure given its inputs; the
per-occasion ordering of analysis calls is the state machine's job.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from . import fooddb
from .model import (
    BoundingBox,
    CaptureMetadata,
    ConfirmedFood,
    ImageCapture,
    MediaType,
    PinLocation,
    PredictedFood,
    ResearcherAnnotation,
)

SIDECAR_SUFFIX = ".predictions.json"

# Declared-fake surface density for the portion stub, grams per square mm.
SURFACE_DENSITY_G_PER_MM2 = 0.01


class AnalysisError(Exception):
    pass


class DecodeError(AnalysisError):
    """Image bytes could not be decoded or use an unsupported format."""


class SidecarMissing(AnalysisError):
    """Sidecar analyzer selected but no predictions file exists for the image."""


class SidecarInvalid(AnalysisError):
    """Sidecar file exists but its contents violate the prediction schema."""


class ExternalAnalyzerUnavailable(AnalysisError):
    """The external analyzer kind is a declared plug-in point, not implemented."""


class EmptyInput(AnalysisError):
    pass


class NonPositiveGroundtruth(AnalysisError):
    pass


class AnalyzerKind(str, Enum):
    SIDECAR_STUB = "sidecar"
    GRID_STUB = "grid"
    EXTERNAL = "external"


@dataclass(frozen=True)
class AnalyzerRef:
    analyzer_id: str
    kind: AnalyzerKind


@dataclass(frozen=True)
class EnergyEstimate:
    per_food: tuple[tuple[str, float], ...]   # (label, kcal)
    total_kcal: float

    @classmethod
    def from_parts(cls, per_food: list[tuple[str, float]]) -> EnergyEstimate:
        return cls(per_food=tuple(per_food), total_kcal=math.fsum(k for _, k in per_food))

    def to_dict(self) -> dict:
        return {
            "per_food": [{"label": l, "kcal": k} for l, k in self.per_food],
            "total_kcal": self.total_kcal,
        }

    @classmethod
    def from_dict(cls, data: dict) -> EnergyEstimate:
        return cls(
            per_food=tuple((e["label"], float(e["kcal"])) for e in data["per_food"]),
            total_kcal=float(data["total_kcal"]),
        )


@dataclass(frozen=True)
class EvaluationRecord:
    occasion_id: str
    groundtruth_kcal: float    # must be > 0
    estimated_kcal: float
    estimator_id: str


class EstimateClass(str, Enum):
    OVER = "over"
    UNDER = "under"
    EXACT = "exact"


def probe_image(image_bytes: bytes) -> tuple[int, int, MediaType]:
    """Read (width, height, media type) from image bytes; nothing more.

    Raises DecodeError on unreadable bytes or formats other than JPEG/PNG.
    """
    try:
        with Image.open(io.BytesIO(image_bytes)) as img:
            fmt = img.format
            width, height = img.size
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc
    if fmt == "JPEG":
        media = MediaType.JPEG
    elif fmt == "PNG":
        media = MediaType.PNG
    else:
        raise DecodeError(f"unsupported image format {fmt!r} (JPEG or PNG required)")
    return width, height, media


def sidecar_path_for(image_path: Path | str) -> Path:
    """Path of the scripted-predictions file that accompanies an image."""
    return Path(str(image_path) + SIDECAR_SUFFIX)


def analyze(
    image: ImageCapture,
    image_bytes: bytes,
    metadata: CaptureMetadata,
    analyzer: AnalyzerRef,
    sidecar_path: Path | None = None,
) -> list[PredictedFood]:
    """Run the configured analyzer over the before image.

    Deterministic: identical (bytes, metadata, analyzer) inputs yield
    identical predictions, including prediction ids. Every returned pin
    lies inside the image and confidences are in [0, 1].
    """
    probe_image(image_bytes)  # pre: bytes decode

    if analyzer.kind is AnalyzerKind.GRID_STUB:
        pin = PinLocation(x_px=image.width_px // 2, y_px=image.height_px // 2)
        return [PredictedFood(prediction_id="p1", label="unknown food", pin=pin, confidence=0.5)]

    if analyzer.kind is AnalyzerKind.SIDECAR_STUB:
        if sidecar_path is None or not sidecar_path.exists():
            raise SidecarMissing(f"no sidecar predictions file at {sidecar_path}")
        return _load_sidecar(sidecar_path, image)

    raise ExternalAnalyzerUnavailable(
        f"analyzer kind {analyzer.kind.value!r} is a plug-in point with no built-in implementation"
    )


def _load_sidecar(path: Path, image: ImageCapture) -> list[PredictedFood]:
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SidecarInvalid(f"unreadable sidecar {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise SidecarInvalid(f"sidecar {path} must contain a JSON array")

    predictions = []
    for i, entry in enumerate(entries):
        try:
            pin = PinLocation(x_px=int(entry["x_px"]), y_px=int(entry["y_px"]))
            pred = PredictedFood(
                prediction_id=f"p{i + 1}",
                label=str(entry["label"]),
                pin=pin,
                confidence=float(entry["confidence"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SidecarInvalid(f"sidecar entry {i}: {exc}") from exc
        if not pred.label:
            raise SidecarInvalid(f"sidecar entry {i}: empty label")
        if not 0.0 <= pred.confidence <= 1.0:
            raise SidecarInvalid(f"sidecar entry {i}: confidence {pred.confidence} outside [0,1]")
        if not (0 <= pin.x_px < image.width_px and 0 <= pin.y_px < image.height_px):
            raise SidecarInvalid(f"sidecar entry {i}: pin outside {image.width_px}x{image.height_px} image")
        predictions.append(pred)
    return predictions


def draft_box_for_pin(pin: PinLocation, image: ImageCapture) -> BoundingBox:
    """Starting box for a confirmed pin: a square of side min(w,h)/4
    centered at the pin, integer-floored and clipped to image bounds.
    """
    side = max(1, min(image.width_px, image.height_px) // 4)
    x = math.floor(pin.x_px - side / 2)
    y = math.floor(pin.y_px - side / 2)
    x = min(max(x, 0), image.width_px - side)
    y = min(max(y, 0), image.height_px - side)
    return BoundingBox(x_px=x, y_px=y, w_px=side, h_px=side)


def estimate_portion(
    box: BoundingBox, item: fooddb.FoodItem | None, metadata: CaptureMetadata
) -> float:
    """Stub energy estimate for the food inside a box, in kcal.

    With a fiducial scale s (mm/px) and an energy density e (kcal/100g),
    the box area is converted to grams through an assumed flat surface
    density of 0.01 g/mm^2: kcal = area_px * s^2 * 0.01 * e / 100.
    Without either input there is no estimate and the result is 0.
    """
    scale = metadata.fiducial_scale_mm_per_px
    if scale is None or item is None or item.energy_kcal_per_100g is None:
        return 0.0
    area_px = box.w_px * box.h_px
    area_mm2 = area_px * scale * scale
    grams = area_mm2 * SURFACE_DENSITY_G_PER_MM2
    return grams * item.energy_kcal_per_100g / 100.0


def can_estimate(item: fooddb.FoodItem | None, metadata: CaptureMetadata) -> bool:
    return (
        metadata.fiducial_scale_mm_per_px is not None
        and item is not None
        and item.energy_kcal_per_100g is not None
    )


def refine(
    confirmed: list[ConfirmedFood],
    before_image: ImageCapture,
    db: fooddb.FoodDatabase,
    metadata: CaptureMetadata,
    now: datetime,
) -> tuple[list[ResearcherAnnotation], EnergyEstimate]:
    """Turn the confirmed list into editable draft annotations plus an
    energy estimate (one per-food entry per draft).

    Labels are resolved against the food list; matched items attach the
    code, ambiguous or unknown labels stay code-less. Drafts carry the
    initials "SYS" and ids d1, d2, ... in confirmed order.
    """
    drafts: list[ResearcherAnnotation] = []
    per_food: list[tuple[str, float]] = []
    for i, food in enumerate(confirmed):
        box = draft_box_for_pin(food.pin, before_image)
        item: fooddb.FoodItem | None = None
        try:
            resolution = fooddb.resolve(db, food.label)
        except (fooddb.EmptyEntry, fooddb.Ambiguous):
            resolution = None
        if isinstance(resolution, fooddb.Matched):
            item = resolution.item
        kcal = estimate_portion(box, item, metadata)
        estimated = can_estimate(item, metadata)
        drafts.append(
            ResearcherAnnotation(
                annotation_id=f"d{i + 1}",
                initials="SYS",
                box=box,
                label=food.label,
                food_code=item.code if item else None,
                energy_kcal=kcal if estimated else None,
                energy_source="estimated" if estimated else None,
                created_at=now,
            )
        )
        per_food.append((food.label, kcal))
    return drafts, EnergyEstimate.from_parts(per_food)


def mean_error_rate(records: list[EvaluationRecord]) -> float:
    """Mean absolute percentage error over the records, in percent.

    mean over records of |estimated - groundtruth| / groundtruth, x100.
    """
    if not records:
        raise EmptyInput("no evaluation records")
    for r in records:
        if r.groundtruth_kcal <= 0:
            raise NonPositiveGroundtruth(f"groundtruth {r.groundtruth_kcal} for {r.occasion_id}")
    ratios = [abs(r.estimated_kcal - r.groundtruth_kcal) / r.groundtruth_kcal for r in records]
    return 100.0 * math.fsum(ratios) / len(ratios)


def classify_estimate(
    record: EvaluationRecord, tolerance_fraction: float = 0.0
) -> EstimateClass:
    """Over/under/exact relative to groundtruth with a tolerance band."""
    if record.groundtruth_kcal <= 0:
        raise NonPositiveGroundtruth(f"groundtruth {record.groundtruth_kcal}")
    if tolerance_fraction < 0:
        raise ValueError("tolerance_fraction must be >= 0")
    gt = record.groundtruth_kcal
    if record.estimated_kcal > gt * (1.0 + tolerance_fraction):
        return EstimateClass.OVER
    if record.estimated_kcal < gt * (1.0 - tolerance_fraction):
        return EstimateClass.UNDER
    return EstimateClass.EXACT


def metrics_csv(records: list[EvaluationRecord], tolerance_fraction: float = 0.0) -> str:
    """Per-record metrics table: one row per evaluation record.

    Columns: occasion_id, groundtruth_kcal, estimated_kcal, error_fraction,
    classification. This is the scatter-plot source format.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["occasion_id", "groundtruth_kcal", "estimated_kcal", "error_fraction", "classification"])
    for r in records:
        if r.groundtruth_kcal <= 0:
            raise NonPositiveGroundtruth(f"groundtruth {r.groundtruth_kcal} for {r.occasion_id}")
        error_fraction = abs(r.estimated_kcal - r.groundtruth_kcal) / r.groundtruth_kcal
        writer.writerow([
            r.occasion_id,
            repr(r.groundtruth_kcal),
            repr(r.estimated_kcal),
            repr(error_fraction),
            classify_estimate(r, tolerance_fraction).value,
        ])
    return buf.getvalue()
