"""Pre-loaded food list with numeric food codes, search, and label resolution.

The list is a UTF-8 CSV with the exact header ``code,name,energy_kcal_per_100g``.
Codes are 1-8 decimal digits and unique; names may repeat (the code
disambiguates). Matching is case-insensitive and diacritic-sensitive;
queries are trimmed but interior whitespace is significant.
"""
from __future__ import annotations

import csv
import hashlib
import io
import re
from dataclasses import dataclass
from pathlib import Path

from .jsonutil import canonical_json

FOOD_LIST_HEADER = ["code", "name", "energy_kcal_per_100g"]
_CODE_RE = re.compile(r"^[0-9]{1,8}$")


class FoodDbError(Exception):
    pass


class ParseError(FoodDbError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicateCode(FoodDbError):
    def __init__(self, code: str):
        super().__init__(f"duplicate food code {code!r}")
        self.code = code


class EmptyEntry(FoodDbError):
    """resolve() was handed a blank entry."""


class Ambiguous(FoodDbError):
    """A name maps to multiple food codes; the caller must pick one."""

    def __init__(self, codes: list[str]):
        super().__init__(f"name matches multiple codes: {', '.join(codes)}")
        self.codes = codes


@dataclass(frozen=True)
class FoodItem:
    code: str                               # 1-8 decimal digits, unique in a database
    name: str
    energy_kcal_per_100g: float | None = None

    def to_dict(self) -> dict:
        return {
            "code": self.code,
            "name": self.name,
            "energy_kcal_per_100g": self.energy_kcal_per_100g,
        }


@dataclass(frozen=True)
class Matched:
    item: FoodItem


@dataclass(frozen=True)
class FreeText:
    label: str


Resolution = Matched | FreeText


class FoodDatabase:
    """Immutable after construction; concurrent reads need no locking."""

    def __init__(self, items: list[FoodItem]):
        self.items: tuple[FoodItem, ...] = tuple(items)
        self._by_code: dict[str, FoodItem] = {}
        self._codes_by_name: dict[str, list[str]] = {}
        for item in self.items:
            if item.code in self._by_code:
                raise DuplicateCode(item.code)
            self._by_code[item.code] = item
            self._codes_by_name.setdefault(item.name.lower(), []).append(item.code)

    def __len__(self) -> int:
        return len(self.items)

    def by_code(self, code: str) -> FoodItem | None:
        return self._by_code.get(code)

    def codes_for_name(self, name: str) -> list[str]:
        return list(self._codes_by_name.get(name.lower(), []))

    def list_hash(self) -> str:
        """Stable digest of the list contents; clients cache against this."""
        payload = canonical_json([i.to_dict() for i in self.items])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_food_list(source: Path | str | io.TextIOBase) -> FoodDatabase:
    """Load the food-list CSV, one FoodItem per data row, order preserved.

    Raises ParseError(line, reason) on malformed rows and DuplicateCode
    on a repeated code. A blank energy field parses as absent.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8", newline="") as fh:
            return _parse_rows(fh)
    return _parse_rows(source)


def _parse_rows(fh) -> FoodDatabase:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(1, "missing header") from None
    if header != FOOD_LIST_HEADER:
        raise ParseError(1, f"header must be exactly {','.join(FOOD_LIST_HEADER)!r}")

    items: list[FoodItem] = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise ParseError(lineno, f"expected 3 fields, got {len(row)}")
        code, name, energy_raw = row[0].strip(), row[1], row[2].strip()
        if not _CODE_RE.match(code):
            raise ParseError(lineno, f"bad food code {code!r} (1-8 digits required)")
        if not name.strip():
            raise ParseError(lineno, "empty food name")
        if code in seen:
            raise DuplicateCode(code)
        seen.add(code)
        if energy_raw == "":
            energy = None
        else:
            try:
                energy = float(energy_raw)
            except ValueError:
                raise ParseError(lineno, f"bad energy value {energy_raw!r}") from None
            if energy < 0:
                raise ParseError(lineno, f"negative energy {energy_raw!r}")
        items.append(FoodItem(code=code, name=name.strip(), energy_kcal_per_100g=energy))
    return FoodDatabase(items)


def _is_all_digits(text: str) -> bool:
    return bool(text) and all(c in "0123456789" for c in text)


def search(db: FoodDatabase, query: str) -> list[FoodItem]:
    """Ranked search over names (substring) and codes (prefix, digit queries only).

    Ranking tiers: exact name match, then name-prefix matches, then any
    other hit (name substring or code prefix); within a tier, ordered by
    name then code. Empty query returns the empty list.
    """
    q = query.strip().lower()
    if not q:
        return []
    digits = _is_all_digits(q)

    tiers: tuple[list[FoodItem], list[FoodItem], list[FoodItem]] = ([], [], [])
    for item in db.items:
        name = item.name.lower()
        name_hit = q in name
        code_hit = digits and item.code.startswith(q)
        if not (name_hit or code_hit):
            continue
        if name == q:
            tiers[0].append(item)
        elif name.startswith(q):
            tiers[1].append(item)
        else:
            tiers[2].append(item)

    out: list[FoodItem] = []
    for tier in tiers:
        out.extend(sorted(tier, key=lambda i: (i.name.lower(), i.code)))
    return out


def resolve(db: FoodDatabase, entry: str) -> Resolution:
    """Map a typed entry to a food item, or fall back to a free-text label.

    An exact code match wins; otherwise a case-insensitive unique name
    match; otherwise the trimmed entry becomes the free-text label.
    Raises EmptyEntry on blank input and Ambiguous when the name maps to
    several codes.
    """
    text = entry.strip()
    if not text:
        raise EmptyEntry("entry is blank")
    item = db.by_code(text)
    if item is not None:
        return Matched(item)
    codes = db.codes_for_name(text)
    if len(codes) > 1:
        raise Ambiguous(codes)
    if len(codes) == 1:
        return Matched(db.by_code(codes[0]))  # type: ignore[arg-type]
    return FreeText(text)
