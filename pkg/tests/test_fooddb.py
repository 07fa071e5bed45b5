"""Food list loading, ranked search against a brute-force oracle, resolution."""
from __future__ import annotations

import io
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foodstudy.fooddb import (
    Ambiguous,
    DuplicateCode,
    EmptyEntry,
    FoodDatabase,
    FoodItem,
    FreeText,
    Matched,
    ParseError,
    load_food_list,
    resolve,
    search,
)

from tests.conftest import SAMPLE_FOOD_CSV


def load_text(text: str) -> FoodDatabase:
    return load_food_list(io.StringIO(text))


@pytest.fixture
def sample_db():
    return load_text(SAMPLE_FOOD_CSV)


class TestLoad:
    def test_direct_load(self):
        db = load_text(
            "code,name,energy_kcal_per_100g\n11100000,milk,61\n58100100,potato,93\n"
        )
        assert len(db) == 2
        assert [i.name for i in db.items] == ["milk", "potato"]
        assert db.by_code("58100100").energy_kcal_per_100g == 93.0

    def test_empty_file_header_only(self):
        db = load_text("code,name,energy_kcal_per_100g\n")
        assert len(db) == 0
        assert search(db, "anything") == []

    def test_duplicate_code(self):
        with pytest.raises(DuplicateCode) as info:
            load_text(
                "code,name,energy_kcal_per_100g\n11100000,milk,61\n11100000,cream,200\n"
            )
        assert info.value.code == "11100000"

    def test_missing_header(self):
        with pytest.raises(ParseError) as info:
            load_text("11100000,milk,61\n")
        assert info.value.line == 1

    def test_wrong_field_count(self):
        with pytest.raises(ParseError) as info:
            load_text("code,name,energy_kcal_per_100g\n11100000,milk\n")
        assert info.value.line == 2

    def test_bad_code(self):
        with pytest.raises(ParseError):
            load_text("code,name,energy_kcal_per_100g\n123456789,too long,1\n")
        with pytest.raises(ParseError):
            load_text("code,name,energy_kcal_per_100g\nabc,letters,1\n")

    def test_empty_name(self):
        with pytest.raises(ParseError) as info:
            load_text("code,name,energy_kcal_per_100g\n11100000, ,61\n")
        assert "name" in info.value.reason

    def test_bad_energy(self):
        with pytest.raises(ParseError):
            load_text("code,name,energy_kcal_per_100g\n11100000,milk,soon\n")
        with pytest.raises(ParseError):
            load_text("code,name,energy_kcal_per_100g\n11100000,milk,-5\n")

    def test_blank_energy_is_absent(self):
        db = load_text("code,name,energy_kcal_per_100g\n11100000,milk,\n")
        assert db.by_code("11100000").energy_kcal_per_100g is None

    def test_row_order_preserved(self, sample_db):
        assert [i.code for i in sample_db.items] == [
            "58100100", "58100200", "58100300", "11100000", "63107010", "64100100", "56205000",
        ]


def is_digits(text: str) -> bool:
    return bool(text) and all(c in "0123456789" for c in text)


def search_oracle(items, query: str) -> list[FoodItem]:
    """Naive linear scan implementing the ranked-search contract literally."""
    q = query.strip().lower()
    if not q:
        return []
    exact, prefix, rest = [], [], []
    for item in items:
        name = item.name.lower()
        hit = q in name or (is_digits(q) and item.code.startswith(q))
        if not hit:
            continue
        if name == q:
            exact.append(item)
        elif name.startswith(q):
            prefix.append(item)
        else:
            rest.append(item)
    key = lambda i: (i.name.lower(), i.code)
    return sorted(exact, key=key) + sorted(prefix, key=key) + sorted(rest, key=key)


class TestSearch:
    def test_potato_family(self, sample_db):
        names = [i.name for i in search(sample_db, "potato")]
        assert names == ["potato", "potato wedges", "roast potato"]

    def test_results_carry_codes(self, sample_db):
        results = search(sample_db, "potato")
        assert [i.code for i in results] == ["58100100", "58100200", "58100300"]

    def test_empty_query(self, sample_db):
        assert search(sample_db, "") == []
        assert search(sample_db, "   ") == []

    def test_no_hits(self, sample_db):
        assert search(sample_db, "zzz") == []

    def test_ranking_exact_before_prefix_before_substring(self, sample_db):
        results = search(sample_db, "potato")
        assert results[0].name == "potato"            # exact
        assert results[1].name == "potato wedges"     # prefix
        assert results[2].name == "roast potato"      # substring only

    def test_code_prefix_search(self, sample_db):
        results = search(sample_db, "581")
        assert {i.code for i in results} == {"58100100", "58100200", "58100300"}

    def test_code_search_requires_all_digits(self, sample_db):
        assert search(sample_db, "581x") == []

    def test_case_insensitive(self, sample_db):
        assert [i.name for i in search(sample_db, "POTATO")] == [
            "potato", "potato wedges", "roast potato",
        ]

    def test_query_trimmed(self, sample_db):
        assert search(sample_db, "  potato  ") == search(sample_db, "potato")

    def test_duplicate_names_ordered_by_code(self, sample_db):
        results = search(sample_db, "juice")
        assert [(i.name, i.code) for i in results] == [
            ("juice", "63107010"), ("juice", "64100100"),
        ]


def random_database(rng: random.Random) -> FoodDatabase:
    words = ["potato", "rice", "milk", "tea", "juice", "stew", "bread", "egg"]
    n = rng.randint(0, 12)
    codes = rng.sample(range(1, 10 ** 6), n)
    items = []
    for code in codes:
        name = " ".join(rng.sample(words, rng.randint(1, 3)))
        energy = None if rng.random() < 0.2 else round(rng.uniform(0, 500), 1)
        items.append(FoodItem(code=str(code), name=name, energy_kcal_per_100g=energy))
    return FoodDatabase(items)


def random_query(rng: random.Random, db: FoodDatabase) -> str:
    roll = rng.random()
    if roll < 0.3 and len(db):
        item = rng.choice(db.items)
        name = item.name
        start = rng.randrange(len(name))
        return name[start: start + rng.randint(1, 6)]
    if roll < 0.5 and len(db):
        code = rng.choice(db.items).code
        return code[: rng.randint(1, len(code))]
    if roll < 0.6:
        return str(rng.randint(0, 999))
    alphabet = "abcdefgh "
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 5)))


class TestSearchProperties:
    def test_matches_brute_force_oracle_on_randomized_cases(self):
        rng = random.Random(1234)
        for _ in range(300):
            db = random_database(rng)
            query = random_query(rng, db)
            assert search(db, query) == search_oracle(db.items, query), (query,)

    def test_prefix_monotonicity(self):
        rng = random.Random(99)
        for _ in range(200):
            db = random_database(rng)
            q = random_query(rng, db)
            if not q.strip():
                continue
            extended = q + rng.choice("aeiou")
            base_hits = set(search(db, q))
            for item in search(db, extended):
                if extended.strip().lower() in item.name.lower():
                    assert item in base_hits

    def test_load_search_round_trip(self, sample_db):
        for item in sample_db.items:
            assert item in search(sample_db, item.name)


class TestResolve:
    def test_exact_code_match(self, sample_db):
        result = resolve(sample_db, "58100100")
        assert isinstance(result, Matched)
        assert result.item.name == "potato"

    def test_unique_name_match_case_insensitive(self, sample_db):
        result = resolve(sample_db, "Roast Potato")
        assert isinstance(result, Matched)
        assert result.item.code == "58100300"

    def test_free_text_fallback(self, sample_db):
        result = resolve(sample_db, "dragonfruit smoothie")
        assert result == FreeText("dragonfruit smoothie")

    def test_free_text_is_trimmed(self, sample_db):
        assert resolve(sample_db, "  grandma's stew ") == FreeText("grandma's stew")

    def test_ambiguous_name(self, sample_db):
        with pytest.raises(Ambiguous) as info:
            resolve(sample_db, "juice")
        assert sorted(info.value.codes) == ["63107010", "64100100"]

    def test_empty_entry(self, sample_db):
        with pytest.raises(EmptyEntry):
            resolve(sample_db, "   ")

    def test_resolve_search_coherence(self, sample_db):
        for entry in ("potato", "58100100", "milk", "plain rice"):
            result = resolve(sample_db, entry)
            assert isinstance(result, Matched)
            assert result.item in search(sample_db, entry)


class TestListHash:
    def test_stable_and_content_sensitive(self):
        a = load_text("code,name,energy_kcal_per_100g\n1,milk,61\n")
        b = load_text("code,name,energy_kcal_per_100g\n1,milk,61\n")
        c = load_text("code,name,energy_kcal_per_100g\n1,milk,62\n")
        assert a.list_hash() == b.list_hash()
        assert a.list_hash() != c.list_hash()
