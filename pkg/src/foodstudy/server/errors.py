"""API error envelope and the closed set of machine-readable error codes.

Every error response has the shape::

    {"error": {"status": 409, "code": "VERSION_CONFLICT",
               "message": "...", "details": {...} | null}}

Codes are a documented closed set; the declared error cases never
surface as unclassified 500s.
"""
from __future__ import annotations

from dataclasses import dataclass

# The closed code set.
VALIDATION_FAILED = "VALIDATION_FAILED"
ILLEGAL_TRANSITION = "ILLEGAL_TRANSITION"
VERSION_CONFLICT = "VERSION_CONFLICT"
NOT_FOUND = "NOT_FOUND"
SIDECAR_MISSING = "SIDECAR_MISSING"
PAYLOAD_TOO_LARGE = "PAYLOAD_TOO_LARGE"
UNAUTHORIZED = "UNAUTHORIZED"
FORBIDDEN = "FORBIDDEN"
STORE_UNAVAILABLE = "STORE_UNAVAILABLE"

ALL_CODES = frozenset({
    VALIDATION_FAILED,
    ILLEGAL_TRANSITION,
    VERSION_CONFLICT,
    NOT_FOUND,
    SIDECAR_MISSING,
    PAYLOAD_TOO_LARGE,
    UNAUTHORIZED,
    FORBIDDEN,
    STORE_UNAVAILABLE,
})


@dataclass
class ApiError(Exception):
    status: int
    code: str
    message: str
    details: dict | None = None

    def __post_init__(self):
        super().__init__(self.message)

    def to_dict(self) -> dict:
        return {
            "error": {
                "status": self.status,
                "code": self.code,
                "message": self.message,
                "details": self.details,
            }
        }


class ValidationFailed(Exception):
    """Request payload violates domain invariants; lists each bad field."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class PayloadTooLarge(Exception):
    def __init__(self, field: str, size: int, limit: int):
        super().__init__(f"{field}: {size} bytes exceeds limit of {limit}")
        self.field = field
        self.size = size
        self.limit = limit
