"""Occasion lifecycle orchestration: the operations behind every endpoint.

This layer is HTTP-free. It raises domain exceptions (IllegalTransition,
VersionConflict, NotFound, ValidationFailed, ...) that the app module
maps onto the API error envelope; tests may drive it directly.

Per-occasion mutations are linearized by the store's compare-and-set;
analysis for distinct occasions may run in parallel.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import uuid
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from typing import Callable

from .. import analysis, fooddb
from ..jsonutil import canonical_json, parse_rfc3339, to_rfc3339, utc_now
from ..model import (
    BoundingBox,
    CaptureKind,
    CaptureMetadata,
    EatingOccasion,
    IllegalTransition,
    ImageCapture,
    LifecycleState,
    ParticipantReview,
    ResearcherAnnotation,
    advance_state,
    merge_review,
    validate_box,
    validate_initials,
    validate_metadata,
    validate_review,
)
from ..storage import (
    Actor,
    ActorKind,
    AuditAction,
    AuditEvent,
    NotFound,
    OccasionRecord,
    OccasionSummary,
    Store,
    VersionConflict,
)
from .errors import PayloadTooLarge, ValidationFailed

logger = logging.getLogger("foodstudy.server")

EXPORT_SCHEMA_VERSION = "1"
EXPORT_CSV_COLUMNS = [
    "occasion_id", "participant_id", "initials", "label", "food_code",
    "x", "y", "w", "h", "energy_kcal", "state",
]


def _media_mime(media_type) -> str:
    return f"image/{media_type.value}"


class OccasionService:
    def __init__(
        self,
        store: Store,
        food_db: fooddb.FoodDatabase,
        analyzer: analysis.AnalyzerRef,
        synchronous_analysis: bool = True,
        max_image_bytes: int = 20 * 1024 * 1024,
        clock: Callable[[], datetime] = utc_now,
    ):
        self.store = store
        self.food_db = food_db
        self.analyzer = analyzer
        self.synchronous_analysis = synchronous_analysis
        self.max_image_bytes = max_image_bytes
        self.clock = clock
        self._executor: ThreadPoolExecutor | None = None

    # -- upload (Step 1) and analysis (Step 2) ---------------------------

    def create_occasion(
        self,
        participant_id: str,
        study_id: str,
        before_bytes: bytes | None,
        after_bytes: bytes | None,
        metadata_data: dict,
        idempotency_key: str | None = None,
    ) -> tuple[dict, bool]:
        """Store a new occasion and schedule its analysis.

        Returns (creation response, replayed). With a previously seen
        idempotency key the original occasion is reported instead of
        creating a duplicate.
        """
        if idempotency_key:
            existing = self.store.find_by_idempotency_key(idempotency_key)
            if existing is not None:
                record = self.store.load_occasion(existing)
                return (
                    {
                        "occasion_id": existing,
                        "state": record.occasion.state.value,
                        "version": record.occasion.version,
                    },
                    True,
                )

        violations: list[str] = []
        if not participant_id.strip():
            violations.append("participant_id")
        if not study_id.strip():
            violations.append("study_id")

        captures: dict[str, tuple[ImageCapture, bytes]] = {}
        for field_name, kind, data in (
            ("before_image", CaptureKind.BEFORE, before_bytes),
            ("after_image", CaptureKind.AFTER, after_bytes),
        ):
            if data is None or len(data) == 0:
                violations.append(field_name)
                continue
            if len(data) > self.max_image_bytes:
                raise PayloadTooLarge(field_name, len(data), self.max_image_bytes)
            try:
                width, height, media = analysis.probe_image(data)
            except analysis.DecodeError:
                violations.append(field_name)
                continue
            captures[field_name] = (
                ImageCapture(
                    kind=kind,
                    content_hash=hashlib.sha256(data).hexdigest(),
                    width_px=width,
                    height_px=height,
                    media_type=media,
                ),
                data,
            )

        metadata: CaptureMetadata | None = None
        try:
            metadata = CaptureMetadata.from_dict(metadata_data)
        except (KeyError, TypeError, ValueError):
            violations.append("metadata")
        if metadata is not None:
            violations.extend(validate_metadata(metadata))
        if violations:
            raise ValidationFailed(violations)
        assert metadata is not None

        before_capture, before_data = captures["before_image"]
        after_capture, after_data = captures["after_image"]
        self.store.put_blob(before_data, media_type=_media_mime(before_capture.media_type))
        self.store.put_blob(after_data, media_type=_media_mime(after_capture.media_type))

        now = self.clock()
        occasion = EatingOccasion(
            occasion_id=uuid.uuid4().hex,
            participant_id=participant_id,
            study_id=study_id,
            before=before_capture,
            after=after_capture,
            metadata=metadata,
            state=LifecycleState.UPLOADED,
            version=1,
        )
        record = OccasionRecord(occasion=occasion)
        self.store.save_occasion(
            record,
            expected_version=0,
            event=AuditEvent(
                occasion_id=occasion.occasion_id,
                actor=Actor(ActorKind.PARTICIPANT, participant_id),
                action=AuditAction.UPLOADED,
                payload={"occasion": occasion.to_dict()},
                at=now,
            ),
            idempotency_key=idempotency_key,
        )
        response = {
            "occasion_id": occasion.occasion_id,
            "state": occasion.state.value,
            "version": occasion.version,
        }

        if self.synchronous_analysis:
            self.run_analysis(occasion.occasion_id)
        else:
            self._schedule_analysis(occasion.occasion_id)
        return response, False

    def _schedule_analysis(self, occasion_id: str) -> None:
        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=2, thread_name_prefix="analysis")
        self._executor.submit(self._analysis_task, occasion_id)

    def _analysis_task(self, occasion_id: str) -> None:
        try:
            self.run_analysis(occasion_id)
        except Exception:
            # Background failure keeps the occasion in uploaded; clients see
            # "pending" until the poll window closes.
            logger.exception("background analysis failed for %s", occasion_id)

    def run_analysis(self, occasion_id: str) -> OccasionRecord:
        record = self.store.load_occasion(occasion_id)
        occ = record.occasion
        image_bytes = self.store.get_blob(occ.before.content_hash)
        sidecar = None
        if self.analyzer.kind is analysis.AnalyzerKind.SIDECAR_STUB:
            sidecar = self.store.blob_sidecar_path(occ.before.content_hash)
        predictions = analysis.analyze(
            occ.before, image_bytes, occ.metadata, self.analyzer, sidecar_path=sidecar
        )
        advanced = advance_state(occ, LifecycleState.ANALYZED)
        record.occasion = advanced
        record.predictions = predictions
        self.store.save_occasion(
            record,
            expected_version=occ.version,
            event=AuditEvent(
                occasion_id=occ.occasion_id,
                actor=Actor(ActorKind.SYSTEM),
                action=AuditAction.ANALYZED,
                payload={"predictions": [p.to_dict() for p in predictions]},
                at=self.clock(),
            ),
        )
        return record

    # -- participant review (Steps 3-5) ----------------------------------

    def preliminary(self, occasion_id: str) -> dict:
        record = self.store.load_occasion(occasion_id)
        state = record.occasion.state
        ready = state is not LifecycleState.UPLOADED
        return {
            "occasion_id": occasion_id,
            "status": "ready" if ready else "pending",
            "state": state.value,
            "predictions": [p.to_dict() for p in record.predictions] if ready else [],
        }

    def submit_review(self, occasion_id: str, review_data: dict) -> OccasionRecord:
        """Persist the participant review, then run refinement (Step 5).

        Advances Analyzed -> ParticipantReviewed -> Refined; the response
        reflects the final Refined record.
        """
        record = self.store.load_occasion(occasion_id)
        occ = record.occasion
        if occ.state is not LifecycleState.ANALYZED:
            raise IllegalTransition(
                f"review requires state analyzed, occasion is {occ.state.value}"
            )
        try:
            review = ParticipantReview.from_dict(review_data)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationFailed([f"review: {exc}"]) from exc
        violations = validate_review(record.predictions, review, occ.before)
        if violations:
            raise ValidationFailed(violations)
        confirmed = merge_review(record.predictions, review)

        reviewed = advance_state(occ, LifecycleState.PARTICIPANT_REVIEWED)
        record.occasion = reviewed
        record.review = review
        record.confirmed = confirmed
        self.store.save_occasion(
            record,
            expected_version=occ.version,
            event=AuditEvent(
                occasion_id=occ.occasion_id,
                actor=Actor(ActorKind.PARTICIPANT, occ.participant_id),
                action=AuditAction.REVIEW_SUBMITTED,
                payload={
                    "review": review.to_dict(),
                    "confirmed": [c.to_dict() for c in confirmed],
                },
                at=self.clock(),
            ),
        )

        now = self.clock()
        drafts, estimate = analysis.refine(
            confirmed, reviewed.before, self.food_db, reviewed.metadata, now
        )
        refined = advance_state(reviewed, LifecycleState.REFINED)
        record.occasion = refined
        record.annotations = drafts
        record.estimate = estimate
        self.store.save_occasion(
            record,
            expected_version=reviewed.version,
            event=AuditEvent(
                occasion_id=occ.occasion_id,
                actor=Actor(ActorKind.SYSTEM),
                action=AuditAction.REFINED,
                payload={
                    "annotations": [a.to_dict() for a in drafts],
                    "estimate": estimate.to_dict(),
                },
                at=now,
            ),
        )
        return record

    # -- researcher annotation (Step 6) -----------------------------------

    def detail(self, occasion_id: str) -> OccasionRecord:
        return self.store.load_occasion(occasion_id)

    def _require_refined(self, record: OccasionRecord) -> None:
        state = record.occasion.state
        if state is LifecycleState.FINALIZED:
            raise IllegalTransition("occasion is finalized and immutable")
        if state is not LifecycleState.REFINED:
            raise IllegalTransition(
                f"researcher edits require state refined, occasion is {state.value}"
            )

    def _check_version(self, record: OccasionRecord, expected_version: int) -> None:
        if expected_version != record.occasion.version:
            raise VersionConflict(record.occasion.version)

    def _parse_annotations(
        self, annotations_data: list, now: datetime
    ) -> list[ResearcherAnnotation]:
        parsed: list[ResearcherAnnotation] = []
        violations: list[str] = []
        for i, data in enumerate(annotations_data):
            prefix = f"annotations[{i}]"
            if not isinstance(data, dict):
                violations.append(f"{prefix}: not an object")
                continue
            try:
                box = BoundingBox.from_dict(data["box"])
            except (KeyError, TypeError, ValueError):
                violations.append(f"{prefix}.box")
                continue
            label = str(data.get("label") or "")
            if not label.strip():
                violations.append(f"{prefix}.label")
            food_code = data.get("food_code")
            if food_code is not None and self.food_db.by_code(str(food_code)) is None:
                violations.append(f"{prefix}.food_code")
            energy = data.get("energy_kcal")
            if energy is not None:
                try:
                    energy = float(energy)
                except (TypeError, ValueError):
                    violations.append(f"{prefix}.energy_kcal")
                    energy = None
                else:
                    if energy < 0:
                        violations.append(f"{prefix}.energy_kcal")
            source = data.get("energy_source")
            if source not in (None, "estimated", "manual"):
                violations.append(f"{prefix}.energy_source")
            if source is None and energy is not None:
                source = "manual"
            created_raw = data.get("created_at")
            if created_raw:
                try:
                    created_at = parse_rfc3339(created_raw)
                except ValueError:
                    violations.append(f"{prefix}.created_at")
                    created_at = now
            else:
                created_at = now
            parsed.append(
                ResearcherAnnotation(
                    annotation_id=str(data.get("annotation_id") or uuid.uuid4().hex[:12]),
                    initials="",   # stamped by the caller
                    box=box,
                    label=label.strip(),
                    food_code=None if food_code is None else str(food_code),
                    energy_kcal=energy,
                    energy_source=source,
                    created_at=created_at,
                )
            )
        if violations:
            raise ValidationFailed(violations)
        return parsed

    def save_annotations(
        self,
        occasion_id: str,
        expected_version: int,
        initials: str,
        annotations_data: list,
    ) -> OccasionRecord:
        """Whole-set replacement of the researcher annotations (PUT semantics)."""
        record = self.store.load_occasion(occasion_id)
        self._require_refined(record)
        if not validate_initials(initials):
            raise ValidationFailed(["initials"])
        now = self.clock()
        parsed = self._parse_annotations(annotations_data, now)

        violations = []
        stamped = []
        for i, ann in enumerate(parsed):
            box_problems = validate_box(ann.box, record.occasion.before)
            violations.extend(f"annotations[{i}].box: {p}" for p in box_problems)
            stamped.append(dataclasses.replace(ann, initials=initials))
        if violations:
            raise ValidationFailed(violations)

        self._check_version(record, expected_version)
        occ = dataclasses.replace(record.occasion, version=expected_version + 1)
        record.occasion = occ
        record.annotations = stamped
        self.store.save_occasion(
            record,
            expected_version=expected_version,
            event=AuditEvent(
                occasion_id=occasion_id,
                actor=Actor(ActorKind.RESEARCHER, initials),
                action=AuditAction.ANNOTATION_SAVED,
                payload={
                    "initials": initials,
                    "annotations": [a.to_dict() for a in stamped],
                },
                at=now,
            ),
        )
        return record

    def delete_annotation(
        self,
        occasion_id: str,
        annotation_id: str,
        expected_version: int,
        initials: str | None = None,
    ) -> OccasionRecord:
        record = self.store.load_occasion(occasion_id)
        self._require_refined(record)
        remaining = [a for a in record.annotations if a.annotation_id != annotation_id]
        if len(remaining) == len(record.annotations):
            raise NotFound(f"no annotation {annotation_id} on occasion {occasion_id}")
        self._check_version(record, expected_version)

        record.occasion = dataclasses.replace(record.occasion, version=expected_version + 1)
        record.annotations = remaining
        self.store.save_occasion(
            record,
            expected_version=expected_version,
            event=AuditEvent(
                occasion_id=occasion_id,
                actor=Actor(ActorKind.RESEARCHER, initials),
                action=AuditAction.ANNOTATION_DELETED,
                payload={
                    "annotation_id": annotation_id,
                    "annotations": [a.to_dict() for a in remaining],
                },
                at=self.clock(),
            ),
        )
        return record

    def finalize(self, occasion_id: str, expected_version: int, initials: str) -> OccasionRecord:
        record = self.store.load_occasion(occasion_id)
        occ = record.occasion
        if occ.state is not LifecycleState.REFINED:
            raise IllegalTransition(
                f"finalize requires state refined, occasion is {occ.state.value}"
            )
        if not validate_initials(initials):
            raise ValidationFailed(["initials"])
        if not record.annotations:
            raise ValidationFailed(["no annotations"])
        self._check_version(record, expected_version)

        finalized = advance_state(occ, LifecycleState.FINALIZED)
        record.occasion = finalized
        record.finalized_by = initials
        self.store.save_occasion(
            record,
            expected_version=expected_version,
            event=AuditEvent(
                occasion_id=occasion_id,
                actor=Actor(ActorKind.RESEARCHER, initials),
                action=AuditAction.FINALIZED,
                payload={
                    "initials": initials,
                    "annotations": [a.to_dict() for a in record.annotations],
                },
                at=self.clock(),
            ),
        )
        return record

    # -- food search -------------------------------------------------------

    def search_foods(self, query: str, limit: int) -> list[fooddb.FoodItem]:
        return fooddb.search(self.food_db, query)[: max(0, limit)]

    def food_list(self) -> dict:
        return {
            "hash": self.food_db.list_hash(),
            "items": [i.to_dict() for i in self.food_db.items],
        }

    # -- listing and export --------------------------------------------------

    def list_for_participant(self, participant_id: str) -> list[OccasionSummary]:
        return self.store.list_occasions(participant_id=participant_id)

    def _finalized_records(self, study_id: str) -> list[OccasionRecord]:
        if not self.store.study_exists(study_id):
            raise NotFound(f"no study {study_id}")
        summaries = self.store.list_occasions(study_id=study_id)
        records = [self.store.load_occasion(s.occasion_id) for s in summaries]
        return [r for r in records if r.occasion.state is LifecycleState.FINALIZED]

    def export_json(self, study_id: str) -> str:
        """Deterministic JSON bundle of every finalized occasion in the study.

        The manifest timestamp is the latest audit-event time for the
        study (not the wall clock), so re-running the export without
        intervening writes yields byte-identical output.
        """
        finalized = self._finalized_records(study_id)
        last_write: str | None = None
        for summary in self.store.list_occasions(study_id=study_id):
            for event in self.store.audit_events(summary.occasion_id):
                stamp = to_rfc3339(event.at)
                if last_write is None or stamp > last_write:
                    last_write = stamp

        occasions = []
        for record in finalized:
            occ = record.occasion
            history = [
                {
                    "action": e.action.value,
                    "actor": e.actor.to_dict(),
                    "at": to_rfc3339(e.at),
                    "seq": e.seq,
                }
                for e in self.store.audit_events(occ.occasion_id)
            ]
            annotations = []
            for a in record.annotations:
                entry = a.to_dict()
                entry["free_text"] = a.food_code is None
                annotations.append(entry)
            occasions.append(
                {
                    "occasion_id": occ.occasion_id,
                    "participant_id": occ.participant_id,
                    "study_id": occ.study_id,
                    "state": occ.state.value,
                    "version": occ.version,
                    "before": occ.before.to_dict(),
                    "after": None if occ.after is None else occ.after.to_dict(),
                    "metadata": occ.metadata.to_dict(),
                    "participant_confirmed": [c.to_dict() for c in record.confirmed],
                    "researcher_annotations": annotations,
                    "energy_estimate": None if record.estimate is None else record.estimate.to_dict(),
                    "finalized_by": record.finalized_by,
                    "lifecycle_history": history,
                }
            )
        bundle = {
            "manifest": {
                "study_id": study_id,
                "schema_version": EXPORT_SCHEMA_VERSION,
                "exported_at": last_write,
                "occasion_count": len(occasions),
            },
            "occasions": occasions,
        }
        return canonical_json(bundle)

    def export_csv(self, study_id: str) -> str:
        """One row per researcher annotation across finalized occasions."""
        finalized = self._finalized_records(study_id)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(EXPORT_CSV_COLUMNS)
        for record in finalized:
            occ = record.occasion
            for a in record.annotations:
                writer.writerow([
                    occ.occasion_id,
                    occ.participant_id,
                    a.initials,
                    a.label,
                    a.food_code or "",
                    a.box.x_px,
                    a.box.y_px,
                    a.box.w_px,
                    a.box.h_px,
                    "" if a.energy_kcal is None else repr(a.energy_kcal),
                    occ.state.value,
                ])
        return buf.getvalue()

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
