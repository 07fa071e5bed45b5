"""Content-addressed blob store, versioned occasion records, and the audit trail.

Single-node embedded layout under one root directory:

    <root>/blobs/<first 2 hash chars>/<hash>    image bytes (immutable)
    <root>/data/records.sqlite3                 occasion records + audit log

Occasion writes use compare-and-set on the record version; the record
write and its audit event commit in one transaction, so after any
interruption either both exist or neither. Audit events are append-only
full snapshots. Each call opens its own SQLite connection, which makes a
shared ``Store`` handle safe across threads.
"""
from __future__ import annotations

import hashlib
import json
import os
import sqlite3
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path

from .analysis import EnergyEstimate
from .jsonutil import canonical_json, parse_rfc3339, sort_key_utc, to_rfc3339
from .model import (
    ConfirmedFood,
    EatingOccasion,
    LifecycleState,
    ParticipantReview,
    PredictedFood,
    ResearcherAnnotation,
)


class StorageError(Exception):
    pass


class NotFound(StorageError):
    pass


class VersionConflict(StorageError):
    """Compare-and-set failed: someone else wrote first."""

    def __init__(self, stored_version: int):
        super().__init__(f"stale version; stored version is {stored_version}")
        self.stored_version = stored_version


class StoreUnavailable(StorageError):
    pass


@dataclass(frozen=True)
class BlobRef:
    content_hash: str
    byte_length: int
    media_type: str

    def to_dict(self) -> dict:
        return {
            "content_hash": self.content_hash,
            "byte_length": self.byte_length,
            "media_type": self.media_type,
        }


class ActorKind(str, Enum):
    PARTICIPANT = "participant"
    RESEARCHER = "researcher"
    SYSTEM = "system"


@dataclass(frozen=True)
class Actor:
    kind: ActorKind
    ident: str | None = None   # participant_id or researcher initials

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "id": self.ident}

    @classmethod
    def from_dict(cls, data: dict) -> Actor:
        return cls(kind=ActorKind(data["kind"]), ident=data.get("id"))


class AuditAction(str, Enum):
    UPLOADED = "uploaded"
    ANALYZED = "analyzed"
    REVIEW_SUBMITTED = "review_submitted"
    REFINED = "refined"
    ANNOTATION_SAVED = "annotation_saved"
    ANNOTATION_DELETED = "annotation_deleted"
    FINALIZED = "finalized"


@dataclass(frozen=True)
class AuditEvent:
    occasion_id: str
    actor: Actor
    action: AuditAction
    payload: dict              # full snapshot, stored as canonical JSON
    at: datetime
    seq: int | None = None     # assigned by the store on append

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "occasion_id": self.occasion_id,
            "actor": self.actor.to_dict(),
            "action": self.action.value,
            "payload": self.payload,
            "at": to_rfc3339(self.at),
        }


@dataclass
class OccasionRecord:
    """The stored aggregate: occasion plus everything attached to it.

    Participant-confirmed foods and researcher annotations are kept in
    separate fields and never merged; both provenance classes survive to
    the export.
    """

    occasion: EatingOccasion
    predictions: list[PredictedFood] = field(default_factory=list)
    review: ParticipantReview | None = None
    confirmed: list[ConfirmedFood] = field(default_factory=list)
    annotations: list[ResearcherAnnotation] = field(default_factory=list)
    estimate: EnergyEstimate | None = None
    finalized_by: str | None = None

    def to_dict(self) -> dict:
        return {
            "occasion": self.occasion.to_dict(),
            "predictions": [p.to_dict() for p in self.predictions],
            "review": None if self.review is None else self.review.to_dict(),
            "confirmed": [c.to_dict() for c in self.confirmed],
            "annotations": [a.to_dict() for a in self.annotations],
            "estimate": None if self.estimate is None else self.estimate.to_dict(),
            "finalized_by": self.finalized_by,
        }

    @classmethod
    def from_dict(cls, data: dict) -> OccasionRecord:
        return cls(
            occasion=EatingOccasion.from_dict(data["occasion"]),
            predictions=[PredictedFood.from_dict(p) for p in data["predictions"]],
            review=None if data.get("review") is None else ParticipantReview.from_dict(data["review"]),
            confirmed=[ConfirmedFood.from_dict(c) for c in data["confirmed"]],
            annotations=[ResearcherAnnotation.from_dict(a) for a in data["annotations"]],
            estimate=None if data.get("estimate") is None else EnergyEstimate.from_dict(data["estimate"]),
            finalized_by=data.get("finalized_by"),
        )


@dataclass(frozen=True)
class OccasionSummary:
    occasion_id: str
    participant_id: str
    study_id: str
    state: LifecycleState
    version: int
    captured_at: datetime
    before_hash: str
    after_hash: str | None


_SCHEMA = """
CREATE TABLE IF NOT EXISTS occasions (
    occasion_id   TEXT PRIMARY KEY,
    participant_id TEXT NOT NULL,
    study_id      TEXT NOT NULL,
    captured_sort TEXT NOT NULL,
    state         TEXT NOT NULL,
    version       INTEGER NOT NULL,
    document      TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_occ_participant ON occasions(participant_id);
CREATE INDEX IF NOT EXISTS idx_occ_study ON occasions(study_id);
CREATE TABLE IF NOT EXISTS audit (
    seq         INTEGER PRIMARY KEY AUTOINCREMENT,
    occasion_id TEXT NOT NULL,
    actor       TEXT NOT NULL,
    action      TEXT NOT NULL,
    payload     TEXT NOT NULL,
    at          TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS idx_audit_occasion ON audit(occasion_id);
CREATE TABLE IF NOT EXISTS blobs (
    content_hash TEXT PRIMARY KEY,
    byte_length  INTEGER NOT NULL,
    media_type   TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS idempotency (
    key         TEXT PRIMARY KEY,
    occasion_id TEXT NOT NULL
);
"""


class Store:
    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.data_dir = self.root / "data"
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.db_path = self.data_dir / "records.sqlite3"
        conn = self._connect()
        try:
            conn.executescript(_SCHEMA)
            conn.commit()
        finally:
            conn.close()

    def _connect(self) -> sqlite3.Connection:
        try:
            conn = sqlite3.connect(self.db_path, timeout=30.0)
        except sqlite3.Error as exc:
            raise StoreUnavailable(str(exc)) from exc
        conn.execute("PRAGMA journal_mode=WAL")
        conn.execute("PRAGMA synchronous=NORMAL")
        return conn

    def _query(self, sql: str, params=()) -> list:
        conn = self._connect()
        try:
            return conn.execute(sql, params).fetchall()
        finally:
            conn.close()

    # -- blobs ---------------------------------------------------------

    def blob_path(self, content_hash: str) -> Path:
        return self.blob_dir / content_hash[:2] / content_hash

    def blob_sidecar_path(self, content_hash: str) -> Path:
        """Scripted-predictions file that may accompany a stored image."""
        path = self.blob_path(content_hash)
        return path.with_name(path.name + ".predictions.json")

    def put_blob(self, data: bytes, media_type: str = "application/octet-stream") -> BlobRef:
        """Idempotent content-addressed write; same bytes, same ref, one copy."""
        content_hash = hashlib.sha256(data).hexdigest()
        path = self.blob_path(content_hash)
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            try:
                tmp.write_bytes(data)
                os.replace(tmp, path)   # atomic publish; never overwrites content
            except OSError as exc:
                raise StoreUnavailable(f"blob write failed: {exc}") from exc
        ref = BlobRef(content_hash=content_hash, byte_length=len(data), media_type=media_type)
        conn = self._connect()
        try:
            conn.execute(
                "INSERT OR IGNORE INTO blobs(content_hash, byte_length, media_type) VALUES (?,?,?)",
                (ref.content_hash, ref.byte_length, ref.media_type),
            )
            conn.commit()
        finally:
            conn.close()
        return ref

    def get_blob(self, content_hash: str) -> bytes:
        path = self.blob_path(content_hash)
        if not path.exists():
            raise NotFound(f"no blob {content_hash}")
        return path.read_bytes()

    def get_blob_ref(self, content_hash: str) -> BlobRef:
        rows = self._query(
            "SELECT content_hash, byte_length, media_type FROM blobs WHERE content_hash=?",
            (content_hash,),
        )
        if not rows:
            raise NotFound(f"no blob {content_hash}")
        row = rows[0]
        return BlobRef(content_hash=row[0], byte_length=row[1], media_type=row[2])

    # -- occasion records ----------------------------------------------

    def save_occasion(
        self,
        record: OccasionRecord,
        expected_version: int,
        event: AuditEvent,
        idempotency_key: str | None = None,
    ) -> int:
        """Compare-and-set write of a record plus its audit event, atomically.

        ``expected_version`` is 0 for creation. Returns the new version,
        which is always expected_version + 1. Raises VersionConflict when
        the stored version differs and NotFound when updating an unknown id.
        """
        new_version = expected_version + 1
        if record.occasion.version != new_version:
            raise ValueError(
                f"record version {record.occasion.version} != expected_version+1 ({new_version})"
            )
        occ = record.occasion
        document = canonical_json(record.to_dict())
        conn = self._connect()
        try:
            conn.execute("BEGIN IMMEDIATE")
            if expected_version == 0:
                row = conn.execute(
                    "SELECT version FROM occasions WHERE occasion_id=?", (occ.occasion_id,)
                ).fetchone()
                if row is not None:
                    raise VersionConflict(row[0])
                conn.execute(
                    "INSERT INTO occasions(occasion_id, participant_id, study_id,"
                    " captured_sort, state, version, document) VALUES (?,?,?,?,?,?,?)",
                    (
                        occ.occasion_id,
                        occ.participant_id,
                        occ.study_id,
                        sort_key_utc(occ.metadata.captured_at),
                        occ.state.value,
                        new_version,
                        document,
                    ),
                )
                if idempotency_key:
                    conn.execute(
                        "INSERT INTO idempotency(key, occasion_id) VALUES (?,?)",
                        (idempotency_key, occ.occasion_id),
                    )
            else:
                cur = conn.execute(
                    "UPDATE occasions SET state=?, version=?, document=?,"
                    " captured_sort=? WHERE occasion_id=? AND version=?",
                    (
                        occ.state.value,
                        new_version,
                        document,
                        sort_key_utc(occ.metadata.captured_at),
                        occ.occasion_id,
                        expected_version,
                    ),
                )
                if cur.rowcount == 0:
                    row = conn.execute(
                        "SELECT version FROM occasions WHERE occasion_id=?",
                        (occ.occasion_id,),
                    ).fetchone()
                    if row is None:
                        raise NotFound(f"no occasion {occ.occasion_id}")
                    raise VersionConflict(row[0])
            self._insert_audit(conn, event)
            conn.commit()
        except BaseException:
            conn.rollback()
            raise
        finally:
            conn.close()
        return new_version

    def load_occasion(self, occasion_id: str) -> OccasionRecord:
        rows = self._query(
            "SELECT document FROM occasions WHERE occasion_id=?", (occasion_id,)
        )
        if not rows:
            raise NotFound(f"no occasion {occasion_id}")
        return OccasionRecord.from_dict(json.loads(rows[0][0]))

    def occasion_exists(self, occasion_id: str) -> bool:
        return bool(self._query("SELECT 1 FROM occasions WHERE occasion_id=?", (occasion_id,)))

    def study_exists(self, study_id: str) -> bool:
        return bool(self._query("SELECT 1 FROM occasions WHERE study_id=? LIMIT 1", (study_id,)))

    def find_by_idempotency_key(self, key: str) -> str | None:
        rows = self._query("SELECT occasion_id FROM idempotency WHERE key=?", (key,))
        return rows[0][0] if rows else None

    def list_occasions(
        self, participant_id: str | None = None, study_id: str | None = None
    ) -> list[OccasionSummary]:
        """Summaries in a stable total order: captured_at descending,
        occasion_id ascending as the tiebreak. Unknown ids yield [].
        """
        clauses, params = [], []
        if participant_id is not None:
            clauses.append("participant_id=?")
            params.append(participant_id)
        if study_id is not None:
            clauses.append("study_id=?")
            params.append(study_id)
        where = f"WHERE {' AND '.join(clauses)}" if clauses else ""
        rows = self._query(
            f"SELECT document FROM occasions {where}"
            " ORDER BY captured_sort DESC, occasion_id ASC",
            params,
        )
        out = []
        for (doc,) in rows:
            rec = OccasionRecord.from_dict(json.loads(doc))
            occ = rec.occasion
            out.append(
                OccasionSummary(
                    occasion_id=occ.occasion_id,
                    participant_id=occ.participant_id,
                    study_id=occ.study_id,
                    state=occ.state,
                    version=occ.version,
                    captured_at=occ.metadata.captured_at,
                    before_hash=occ.before.content_hash,
                    after_hash=None if occ.after is None else occ.after.content_hash,
                )
            )
        return out

    # -- audit trail -----------------------------------------------------

    def _insert_audit(self, conn: sqlite3.Connection, event: AuditEvent) -> int:
        cur = conn.execute(
            "INSERT INTO audit(occasion_id, actor, action, payload, at) VALUES (?,?,?,?,?)",
            (
                event.occasion_id,
                canonical_json(event.actor.to_dict()),
                event.action.value,
                canonical_json(event.payload),
                to_rfc3339(event.at),
            ),
        )
        return int(cur.lastrowid)

    def append_audit(self, event: AuditEvent) -> int:
        """Append one event; returns its seq, strictly greater than all prior."""
        conn = self._connect()
        try:
            conn.execute("BEGIN IMMEDIATE")
            seq = self._insert_audit(conn, event)
            conn.commit()
        except sqlite3.Error as exc:
            conn.rollback()
            raise StoreUnavailable(str(exc)) from exc
        finally:
            conn.close()
        return seq

    def audit_events(self, occasion_id: str | None = None) -> list[AuditEvent]:
        """Events in insertion order (never reordered, never mutated)."""
        where, params = "", ()
        if occasion_id is not None:
            where, params = "WHERE occasion_id=?", (occasion_id,)
        rows = self._query(
            f"SELECT seq, occasion_id, actor, action, payload, at FROM audit {where} ORDER BY seq ASC",
            params,
        )
        return [
            AuditEvent(
                seq=row[0],
                occasion_id=row[1],
                actor=Actor.from_dict(json.loads(row[2])),
                action=AuditAction(row[3]),
                payload=json.loads(row[4]),
                at=parse_rfc3339(row[5]),
            )
            for row in rows
        ]


def replay_annotations(events: list[AuditEvent]) -> list[dict]:
    """Fold an occasion's audit trail into its current annotation set.

    Every annotation-bearing event carries a full snapshot under the
    "annotations" key; the fold is simply the last snapshot seen.
    """
    current: list[dict] = []
    for event in events:
        if "annotations" in event.payload:
            current = event.payload["annotations"]
    return current
