"""Local client session: capture queue, upload history, cached food list.

Everything lives in one JSON state file under the state directory. An
exclusive file lock guards the read-modify-write cycle so two client
invocations cannot corrupt the queue.
"""
from __future__ import annotations

import fcntl
import json
import uuid
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

STATE_FILE = "session.json"
LOCK_FILE = "session.lock"


@dataclass
class Draft:
    draft_id: str
    idempotency_key: str         # stable per draft; retries never duplicate
    participant_id: str
    study_id: str
    before_path: str
    after_path: str
    metadata: dict
    created_at: str

    @classmethod
    def new(cls, participant_id, study_id, before_path, after_path, metadata, created_at) -> Draft:
        return cls(
            draft_id="d" + uuid.uuid4().hex[:8],
            idempotency_key=uuid.uuid4().hex,
            participant_id=participant_id,
            study_id=study_id,
            before_path=str(before_path),
            after_path=str(after_path),
            metadata=metadata,
            created_at=created_at,
        )


@dataclass
class UploadedOccasion:
    draft_id: str
    occasion_id: str
    uploaded_at: str


@dataclass
class SessionState:
    participant_id: str | None = None
    study_id: str | None = None
    drafts: list[Draft] = field(default_factory=list)
    uploads: list[UploadedOccasion] = field(default_factory=list)
    food_list: dict | None = None      # {"hash": ..., "items": [...]}

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "study_id": self.study_id,
            "drafts": [asdict(d) for d in self.drafts],
            "uploads": [asdict(u) for u in self.uploads],
            "food_list": self.food_list,
        }

    @classmethod
    def from_dict(cls, data: dict) -> SessionState:
        return cls(
            participant_id=data.get("participant_id"),
            study_id=data.get("study_id"),
            drafts=[Draft(**d) for d in data.get("drafts", [])],
            uploads=[UploadedOccasion(**u) for u in data.get("uploads", [])],
            food_list=data.get("food_list"),
        )


class SessionStore:
    def __init__(self, state_dir: Path | str):
        self.state_dir = Path(state_dir).expanduser()
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.state_path = self.state_dir / STATE_FILE
        self.lock_path = self.state_dir / LOCK_FILE

    def load(self) -> SessionState:
        if not self.state_path.exists():
            return SessionState()
        return SessionState.from_dict(json.loads(self.state_path.read_text(encoding="utf-8")))

    def save(self, state: SessionState) -> None:
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state.to_dict(), indent=2), encoding="utf-8")
        tmp.replace(self.state_path)

    @contextmanager
    def locked(self):
        """Exclusive read-modify-write cycle; state is saved on clean exit."""
        with open(self.lock_path, "w") as lock_fh:
            fcntl.flock(lock_fh, fcntl.LOCK_EX)
            try:
                state = self.load()
                yield state
                self.save(state)
            finally:
                fcntl.flock(lock_fh, fcntl.LOCK_UN)
