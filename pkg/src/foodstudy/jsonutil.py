"""Canonical JSON encoding and RFC 3339 timestamp helpers.

Audit payloads, export bundles, and content hashes all rely on one
canonical JSON form so that byte-for-byte comparisons are meaningful.
"""
from __future__ import annotations

import json
from datetime import datetime, timezone


def canonical_json(obj) -> str:
    """Serialize ``obj`` to the canonical form used across the system.

    Keys sorted, no whitespace, non-ASCII preserved. Two structurally
    equal payloads always produce identical strings.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def to_rfc3339(dt: datetime) -> str:
    """Format an aware datetime as an RFC 3339 UTC string ("...Z")."""
    if dt.tzinfo is None:
        raise ValueError("naive datetime; timestamps must be timezone-aware")
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def parse_rfc3339(value: str) -> datetime:
    """Parse an RFC 3339 string, accepting the trailing-Z form.

    Python 3.10's ``fromisoformat`` rejects "Z", so it is rewritten first.
    Returns an aware datetime in UTC.
    """
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp lacks a timezone offset: {value!r}")
    return dt.astimezone(timezone.utc)


def sort_key_utc(dt: datetime) -> str:
    """Fixed-width UTC timestamp string whose lexicographic order is chronological."""
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"


def utc_now() -> datetime:
    return datetime.now(timezone.utc)
