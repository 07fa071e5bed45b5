"""Core domain types: lifecycle state machine, box validation, review merging."""
from __future__ import annotations

from datetime import datetime, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foodstudy.model import (
    LIFECYCLE_ORDER,
    Addition,
    BoundingBox,
    CaptureKind,
    CaptureMetadata,
    ConfirmedFood,
    EatingOccasion,
    IllegalTransition,
    ImageCapture,
    LifecycleState,
    MediaType,
    ParticipantReview,
    PinLocation,
    PredictedFood,
    ResearcherAnnotation,
    UnknownPrediction,
    Verdict,
    VerdictKind,
    advance_state,
    merge_review,
    validate_box,
    validate_initials,
    validate_metadata,
    validate_review,
)

NOW = datetime(2021, 5, 1, 12, 30, tzinfo=timezone.utc)


def image(width=100, height=100, kind=CaptureKind.BEFORE):
    return ImageCapture(
        kind=kind, content_hash="ab" * 32, width_px=width, height_px=height,
        media_type=MediaType.PNG,
    )


def occasion(state=LifecycleState.UPLOADED, with_after=True, version=1):
    return EatingOccasion(
        occasion_id="o1",
        participant_id="p1",
        study_id="s1",
        before=image(),
        after=image(kind=CaptureKind.AFTER) if with_after else None,
        metadata=CaptureMetadata(captured_at=NOW),
        state=state,
        version=version,
    )


class TestAdvanceState:
    def test_first_legal_transition(self):
        occ = advance_state(occasion(), LifecycleState.ANALYZED)
        assert occ.state is LifecycleState.ANALYZED
        assert occ.version == 2

    def test_skip_forbidden(self):
        with pytest.raises(IllegalTransition):
            advance_state(occasion(), LifecycleState.REFINED)

    def test_backward_forbidden(self):
        with pytest.raises(IllegalTransition):
            advance_state(occasion(state=LifecycleState.FINALIZED), LifecycleState.UPLOADED)

    def test_terminal_state_has_no_successor(self):
        final = occasion(state=LifecycleState.FINALIZED)
        for target in LIFECYCLE_ORDER:
            with pytest.raises(IllegalTransition):
                advance_state(final, target)

    def test_full_chain_bumps_version_each_step(self):
        occ = occasion()
        for target in LIFECYCLE_ORDER[1:]:
            previous = occ.version
            occ = advance_state(occ, target)
            assert occ.version == previous + 1
        assert occ.state is LifecycleState.FINALIZED
        assert occ.version == 5

    def test_missing_after_image_blocks_advancement(self):
        with pytest.raises(IllegalTransition):
            advance_state(occasion(with_after=False), LifecycleState.ANALYZED)

    @given(st.lists(st.sampled_from(LIFECYCLE_ORDER), min_size=1, max_size=12))
    def test_random_sequences_observe_prefix_of_canonical_order(self, targets):
        occ = occasion()
        observed = [occ.state]
        for target in targets:
            try:
                occ = advance_state(occ, target)
            except IllegalTransition:
                continue
            observed.append(occ.state)
        assert tuple(observed) == LIFECYCLE_ORDER[: len(observed)]

    @given(st.lists(st.sampled_from(LIFECYCLE_ORDER), min_size=1, max_size=12))
    def test_version_strictly_increases_on_mutation(self, targets):
        occ = occasion()
        for target in targets:
            try:
                advanced = advance_state(occ, target)
            except IllegalTransition:
                continue
            assert advanced.version > occ.version
            occ = advanced


def box_ok(box: BoundingBox, img: ImageCapture) -> bool:
    """Inequality oracle, straight from the constraints."""
    return (
        box.w_px >= 1
        and box.h_px >= 1
        and box.x_px >= 0
        and box.y_px >= 0
        and box.x_px + box.w_px <= img.width_px
        and box.y_px + box.h_px <= img.height_px
    )


class TestValidateBox:
    def test_strictly_interior_box(self):
        assert validate_box(BoundingBox(0, 0, 10, 10), image(100, 100)) == []

    def test_exceeds_right_and_bottom(self):
        violations = validate_box(BoundingBox(95, 95, 10, 10), image(100, 100))
        assert len(violations) == 2
        assert any("right" in v for v in violations)
        assert any("bottom" in v for v in violations)

    def test_degenerate_width(self):
        violations = validate_box(BoundingBox(0, 0, 0, 5), image(100, 100))
        assert violations == ["w_px < 1"]

    def test_exhaustive_8x8_agreement(self):
        img = image(8, 8)
        accepted = 0
        for x in range(-2, 10):
            for y in range(-2, 10):
                for w in range(-1, 11):
                    for h in range(-1, 11):
                        box = BoundingBox(x, y, w, h)
                        ok = validate_box(box, img) == []
                        assert ok == box_ok(box, img), (x, y, w, h)
                        accepted += ok
        assert accepted == 1296   # 36 valid (x, w) pairs per axis, squared

    @given(
        st.integers(-50, 50), st.integers(-50, 50),
        st.integers(-50, 50), st.integers(-50, 50),
        st.integers(1, 40), st.integers(1, 40),
    )
    def test_matches_oracle_on_random_inputs(self, x, y, w, h, width, height):
        img = image(width, height)
        box = BoundingBox(x, y, w, h)
        assert (validate_box(box, img) == []) == box_ok(box, img)


def predictions(*labels: str) -> list[PredictedFood]:
    return [
        PredictedFood(prediction_id=f"p{i + 1}", label=label,
                      pin=PinLocation(10 * (i + 1), 5 * (i + 1)), confidence=0.9)
        for i, label in enumerate(labels)
    ]


def review_of(verdicts=(), additions=()) -> ParticipantReview:
    return ParticipantReview(verdicts=tuple(verdicts), additions=tuple(additions), submitted_at=NOW)


class TestMergeReview:
    def test_identity_review(self):
        preds = predictions("pasta", "bread")
        review = review_of([
            Verdict("p1", VerdictKind.CONFIRMED),
            Verdict("p2", VerdictKind.CONFIRMED),
        ])
        assert merge_review(preds, review) == [
            ConfirmedFood("pasta", preds[0].pin),
            ConfirmedFood("bread", preds[1].pin),
        ]

    def test_relabel_remove_and_add(self):
        preds = predictions("pasta", "bread")
        extra_pin = PinLocation(77, 66)
        review = review_of(
            [Verdict("p1", VerdictKind.RELABELED, new_label="lasagna"),
             Verdict("p2", VerdictKind.REMOVED)],
            [Addition("water", extra_pin)],
        )
        assert merge_review(preds, review) == [
            ConfirmedFood("lasagna", preds[0].pin),
            ConfirmedFood("water", extra_pin),
        ]

    def test_unknown_prediction_id(self):
        review = review_of([Verdict("p9", VerdictKind.CONFIRMED)])
        with pytest.raises(UnknownPrediction):
            merge_review(predictions("pasta"), review)

    def test_duplicate_verdict_rejected(self):
        review = review_of([
            Verdict("p1", VerdictKind.CONFIRMED),
            Verdict("p1", VerdictKind.REMOVED),
        ])
        with pytest.raises(ValueError):
            merge_review(predictions("pasta"), review)

    def test_validate_review_reports_unknown_and_duplicates(self):
        preds = predictions("pasta")
        review = review_of([
            Verdict("p1", VerdictKind.CONFIRMED),
            Verdict("p1", VerdictKind.REMOVED),
            Verdict("p9", VerdictKind.CONFIRMED),
        ])
        violations = validate_review(preds, review)
        assert any("duplicate" in v for v in violations)
        assert any("p9" in v for v in violations)

    def test_validate_review_checks_addition_pins(self):
        review = review_of(additions=[Addition("tea", PinLocation(500, 5))])
        violations = validate_review([], review, image(100, 100))
        assert violations == ["additions[0].pin.x_px out of range"]


@st.composite
def review_cases(draw):
    n = draw(st.integers(0, 6))
    preds = predictions(*[f"food{i}" for i in range(n)])
    kinds = draw(st.lists(
        st.sampled_from([None, VerdictKind.CONFIRMED, VerdictKind.RELABELED, VerdictKind.REMOVED]),
        min_size=n, max_size=n,
    ))
    verdicts = []
    for pred, kind in zip(preds, kinds):
        if kind is None:
            continue
        new_label = "renamed" if kind is VerdictKind.RELABELED else None
        verdicts.append(Verdict(pred.prediction_id, kind, new_label))
    additions = [
        Addition(label, PinLocation(1, 1))
        for label in draw(st.lists(st.sampled_from(["water", "tea"]), max_size=3))
    ]
    return preds, review_of(verdicts, additions), verdicts


class TestMergeReviewProperties:
    @given(review_cases())
    def test_cardinality(self, case):
        preds, review, verdicts = case
        kept = [v for v in verdicts if v.kind is not VerdictKind.REMOVED]
        out = merge_review(preds, review)
        assert len(out) == len(kept) + len(review.additions)

    @given(review_cases())
    def test_removed_labels_absent(self, case):
        preds, review, verdicts = case
        removed_pins = {
            p.pin for p in preds
            for v in verdicts
            if v.kind is VerdictKind.REMOVED and v.prediction_id == p.prediction_id
        }
        out_pins = {c.pin for c in merge_review(preds, review) if c.label.startswith("food")}
        assert removed_pins.isdisjoint(out_pins)

    @given(review_cases())
    def test_pure_function_same_inputs_same_output(self, case):
        preds, review, _ = case
        assert merge_review(preds, review) == merge_review(preds, review)


class TestMetadataValidation:
    def test_valid_metadata(self):
        md = CaptureMetadata(
            captured_at=NOW, gps=(40.0, -86.0), camera_pose_angle=45.0,
            exif={"Make": "Cam"}, fiducial_marker_present=True,
            fiducial_scale_mm_per_px=0.5,
        )
        assert validate_metadata(md) == []

    def test_latitude_out_of_range(self):
        md = CaptureMetadata(captured_at=NOW, gps=(123.0, 0.0))
        assert validate_metadata(md) == ["gps.latitude"]

    def test_longitude_out_of_range(self):
        md = CaptureMetadata(captured_at=NOW, gps=(0.0, -181.0))
        assert validate_metadata(md) == ["gps.longitude"]

    def test_scale_requires_marker(self):
        md = CaptureMetadata(captured_at=NOW, fiducial_scale_mm_per_px=0.5)
        assert "fiducial_marker_present" in validate_metadata(md)

    def test_scale_must_be_positive(self):
        md = CaptureMetadata(
            captured_at=NOW, fiducial_marker_present=True, fiducial_scale_mm_per_px=0.0
        )
        assert "fiducial_scale_mm_per_px" in validate_metadata(md)

    def test_marker_without_scale_is_fine(self):
        md = CaptureMetadata(captured_at=NOW, fiducial_marker_present=True)
        assert validate_metadata(md) == []


class TestInitials:
    @pytest.mark.parametrize("value", ["A", "AB", "SYS", "WXYZ"])
    def test_valid(self, value):
        assert validate_initials(value)

    @pytest.mark.parametrize("value", ["", "abcde", "ab", "A1", "ABCDE", " AB"])
    def test_invalid(self, value):
        assert not validate_initials(value)


class TestRoundTrips:
    def test_occasion_json_round_trip(self):
        occ = occasion(state=LifecycleState.ANALYZED, version=2)
        assert EatingOccasion.from_dict(occ.to_dict()) == occ

    def test_review_json_round_trip(self):
        review = review_of(
            [Verdict("p1", VerdictKind.RELABELED, new_label="rice")],
            [Addition("tea", PinLocation(3, 4))],
        )
        assert ParticipantReview.from_dict(review.to_dict()) == review

    def test_annotation_json_round_trip(self):
        ann = ResearcherAnnotation(
            annotation_id="a1", initials="AB", box=BoundingBox(1, 2, 3, 4),
            label="rice", food_code="56205000", energy_kcal=120.5,
            energy_source="manual", created_at=NOW,
        )
        assert ResearcherAnnotation.from_dict(ann.to_dict()) == ann
