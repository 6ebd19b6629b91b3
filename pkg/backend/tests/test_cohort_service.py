"""
Tests for exam pairing, population slices, epoch sampling and image sizing.
"""
import datetime as dt

import numpy as np
import pytest

from models.exam import BreastLabels, Cohort, Exam, ExamPair, Split, View
from schemas.cohort import SplitConfig, SynthConfig
from services.cohort_service import (
    FULL_SIZES,
    CohortService,
    cohort_service,
    assign_split,
    crop_or_pad,
    epoch_indices,
    epoch_sample,
    generate_test_pairs,
    generate_train_pairs,
    slice_population,
    split_pairs,
    standardize_size,
    target_size,
)
from services.phantom_service import synth_generate
from utils.errors import PairingError, SamplingError, UsageError


@pytest.fixture
def patient_exams(make_exam):
    def factory(n, patient_id="P1", shuffle=True):
        exams = [make_exam(patient_id, f"{patient_id}-E{k}", 365 * k, size=(2, 2), fill=0.5) for k in range(n)]
        if shuffle:
            exams = exams[::-1]
        return exams

    return factory


def mixed_pairs(make_exam, n=10, biopsied=4):
    pairs = []
    for i in range(n):
        prior = make_exam(f"M{i}", f"M{i}-0", 0, size=(2, 2), fill=0.5)
        current = make_exam(f"M{i}", f"M{i}-1", 365, size=(2, 2), fill=0.5, biopsied=i < biopsied)
        pairs.append(ExamPair(prior, current))
    return pairs


# =============================================================================
# Pair generation
# =============================================================================

class TestPairGeneration:

    @pytest.mark.parametrize("n", range(1, 9))
    def test_train_pair_count(self, patient_exams, n):
        pairs = generate_train_pairs(patient_exams(n))
        assert len(pairs) == n * (n - 1) // 2
        assert len({(p.prior.exam_id, p.current.exam_id) for p in pairs}) == len(pairs)
        assert all(p.prior.date < p.current.date for p in pairs)

    def test_three_exams_give_three_pairs(self, patient_exams):
        pairs = generate_train_pairs(patient_exams(3))
        assert {(p.prior.exam_id, p.current.exam_id) for p in pairs} == {
            ("P1-E0", "P1-E1"), ("P1-E0", "P1-E2"), ("P1-E1", "P1-E2"),
        }

    @pytest.mark.parametrize("n", range(1, 6))
    def test_test_pairs_end_at_latest(self, patient_exams, n):
        pairs = generate_test_pairs(patient_exams(n))
        assert len(pairs) == max(n - 1, 0)
        assert all(p.current.exam_id == f"P1-E{n - 1}" for p in pairs)

    def test_same_date_raises(self, make_exam):
        exams = [make_exam("P1", "A", 10), make_exam("P1", "B", 10)]
        with pytest.raises(PairingError):
            generate_train_pairs(exams)

    def test_mixed_patients_raise(self, make_exam):
        with pytest.raises(PairingError):
            ExamPair(make_exam("P1", "A", 0), make_exam("P2", "B", 10))

    def test_reversed_dates_raise(self, make_exam):
        with pytest.raises(PairingError):
            ExamPair(make_exam("P1", "A", 10), make_exam("P1", "B", 0))

    def test_split_pairs_use_split_rule(self, patient_exams):
        exams = {"A": tuple(patient_exams(3, "A")), "B": tuple(patient_exams(3, "B"))}
        cohort = Cohort(exams, {"A": Split.TRAIN, "B": Split.TEST})
        assert len(split_pairs(cohort, Split.TRAIN)) == 3
        assert len(split_pairs(cohort, Split.TEST)) == 2
        assert split_pairs(cohort, Split.VAL) == []
        assert len(CohortService().all_pairs(cohort)) == 5

    def test_cohort_requires_splits(self, patient_exams):
        with pytest.raises(PairingError):
            Cohort({"A": tuple(patient_exams(2, "A"))}, {})


# =============================================================================
# Populations and sampling
# =============================================================================

class TestPopulations:

    def test_slice_sizes(self, make_exam):
        pairs = mixed_pairs(make_exam)
        assert len(slice_population(pairs, "screening")) == 10
        assert len(slice_population(pairs, "biopsied")) == 4
        assert CohortService().population_sizes(pairs) == {"screening": 10, "biopsied": 4}

    def test_epoch_balance_ok(self, make_exam):
        sizes = cohort_service.check_epoch_balance(mixed_pairs(make_exam, n=10, biopsied=4))
        assert sizes == {"screening": 10, "biopsied": 4}

    def test_epoch_balance_too_few_rest(self, make_exam):
        with pytest.raises(UsageError, match="non-biopsied"):
            cohort_service.check_epoch_balance(mixed_pairs(make_exam, n=10, biopsied=6))

    def test_epoch_balance_explicit_b(self, make_exam):
        with pytest.raises(UsageError):
            cohort_service.check_epoch_balance(mixed_pairs(make_exam, n=10, biopsied=2), b=9)

    def test_no_biopsied(self, make_exam):
        assert slice_population(mixed_pairs(make_exam, biopsied=0), "biopsied") == []

    def test_all_biopsied(self, make_exam):
        pairs = mixed_pairs(make_exam, n=3, biopsied=3)
        assert slice_population(pairs, "biopsied") == slice_population(pairs, "screening")

    def test_patient_level_includes_prior_biopsy(self, make_exam):
        prior = make_exam("P", "P-0", 0, size=(2, 2), biopsied=True)
        current = make_exam("P", "P-1", 365, size=(2, 2))
        pair = ExamPair(prior, current)
        assert slice_population([pair], "biopsied", "exam") == []
        assert slice_population([pair], "biopsied", "patient") == [pair]

    def test_unknown_population(self, make_exam):
        with pytest.raises(ValueError):
            slice_population(mixed_pairs(make_exam), "everyone")


class TestEpochSampling:

    def test_invariants_over_many_seeds(self, make_exam):
        pairs = mixed_pairs(make_exam, n=12, biopsied=4)
        biopsied = {p.pair_id for p in slice_population(pairs, "biopsied")}
        for seed in range(1000):
            epoch = epoch_sample(pairs, 4, seed)
            ids = [p.pair_id for p in epoch]
            assert len(ids) == 8
            assert len(set(ids)) == 8
            assert biopsied <= set(ids)

    def test_desk_scale_length(self, make_exam):
        epoch = epoch_sample(mixed_pairs(make_exam, n=12, biopsied=5), 5, 0)
        assert len(epoch) == 10
        assert sum(p.biopsied for p in epoch) == 5

    def test_dry_run_at_full_scale(self):
        order = epoch_indices(2519, 60_000, 2519, seed=0)
        assert order.size == 5038
        assert np.unique(order).size == 5038
        assert set(range(2519)) <= set(order.tolist())

    def test_deterministic_by_seed(self, make_exam):
        pairs = mixed_pairs(make_exam, n=12, biopsied=4)
        first = [p.pair_id for p in epoch_sample(pairs, 4, 7)]
        assert first == [p.pair_id for p in epoch_sample(pairs, 4, 7)]
        assert first != [p.pair_id for p in epoch_sample(pairs, 4, 8)]

    def test_default_b_is_biopsied_count(self, make_exam):
        assert len(epoch_sample(mixed_pairs(make_exam, n=12, biopsied=3), None, 0)) == 6

    def test_rest_too_small(self, make_exam):
        with pytest.raises(SamplingError):
            epoch_sample(mixed_pairs(make_exam, n=6, biopsied=4), 4, 0)

    def test_b_must_match_biopsied(self, make_exam):
        with pytest.raises(SamplingError):
            epoch_sample(mixed_pairs(make_exam, n=12, biopsied=4), 3, 0)


# =============================================================================
# Sizes and splits
# =============================================================================

class TestSizes:

    def test_full_sizes(self):
        assert target_size(View.L_CC) == FULL_SIZES[View.L_CC.projection] == (2677, 1942)
        assert target_size(View.R_MLO) == (2974, 1748)

    @pytest.mark.parametrize("view,expected", [(View.L_CC, (134, 97)), (View.R_MLO, (149, 87))])
    def test_desk_scale(self, view, expected):
        assert target_size(view, 20) == expected

    def test_crop_and_pad_are_centered(self):
        image = np.arange(20, dtype=np.float32).reshape(4, 5)
        out = crop_or_pad(image, (6, 3))
        assert out.shape == (6, 3)
        np.testing.assert_array_equal(out[0], 0)
        np.testing.assert_array_equal(out[1:5], image[:, 1:4])
        np.testing.assert_array_equal(out[5], 0)

    def test_standardize_size(self):
        out = standardize_size(np.ones((100, 120)), View.L_MLO, 20)
        assert out.shape == (149, 87) and out.dtype == np.float32


class TestSplits:

    def test_assignment_is_stable(self):
        assert assign_split("P00001") is assign_split("P00001")

    def test_fractions_roughly_respected(self):
        counts = {s: 0 for s in Split}
        for i in range(2000):
            counts[assign_split(f"P{i:05d}")] += 1
        assert 0.65 < counts[Split.TRAIN] / 2000 < 0.75
        assert counts[Split.VAL] > 0 and counts[Split.TEST] > 0

    def test_all_train(self):
        fractions = SplitConfig(train=1.0, val=0.0, test=0.0)
        assert all(assign_split(f"P{i}", fractions) is Split.TRAIN for i in range(50))

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SplitConfig(train=0.5, val=0.1, test=0.1)

    def test_same_seed_same_partition(self):
        ids = [f"P{i:05d}" for i in range(200)]
        assert [assign_split(p, seed=3) for p in ids] == [assign_split(p, seed=3) for p in ids]

    def test_seed_changes_partition(self):
        ids = [f"P{i:05d}" for i in range(200)]
        first = [assign_split(p, seed=0) for p in ids]
        second = [assign_split(p, seed=1) for p in ids]
        assert first != second
        assert sum(a is not b for a, b in zip(first, second)) > 20


def test_exam_labels_default_empty():
    exam = Exam("P", "E", dt.date(2020, 1, 1), {})
    assert not exam.labels.any()
    assert exam.labels == BreastLabels()


# =============================================================================
# Default synthetic cohorts fill balanced epochs
# =============================================================================

def default_train_pairs(image_scale: int):
    cohort = synth_generate(SynthConfig(n_patients=800, image_scale=image_scale), seed=0)
    return split_pairs(cohort, Split.TRAIN)


def assert_epoch_fits(pairs):
    biopsied = slice_population(pairs, "biopsied")
    n_rest = len(pairs) - len(biopsied)
    assert len(biopsied) < n_rest
    order = epoch_indices(len(biopsied), n_rest, None, seed=0)
    assert order.size == 2 * len(biopsied)
    cohort_service.check_epoch_balance(pairs)


class TestDefaultCohortBalance:

    def test_default_fractions_at_coarse_scale(self):
        assert_epoch_fits(default_train_pairs(image_scale=40))

    @pytest.mark.slow
    def test_default_experiment_cohort(self):
        assert_epoch_fits(default_train_pairs(image_scale=SynthConfig().image_scale))
