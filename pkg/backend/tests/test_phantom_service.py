"""
Tests for the synthetic phantom cohort generator.
"""
import numpy as np
import pytest

from models.exam import VIEWS, LabelKind, Side, View
from models.transform import AffineTransform
from schemas.cohort import SynthConfig
from services.phantom_service import (
    Lesion,
    _lesion_kind,
    breast_phantom,
    render_exam_view,
    synth_generate,
)


def small_config(**overrides):
    values = dict(n_patients=6, exams_per_patient=3, image_scale=20)
    values.update(overrides)
    return SynthConfig(**values)


# =============================================================================
# Phantom and lesion rendering
# =============================================================================

class TestRendering:

    def test_phantom_background_is_exactly_zero(self):
        image = breast_phantom(View.L_CC, (134, 97), np.random.default_rng(0))
        assert image.dtype == np.float32
        assert image[:, -1].max() == 0.0
        assert image[0, 0] == 0.0
        assert 0.0 < image.max() <= 1.0
        assert image[67, 0] > 0.0

    def test_benign_lesion_is_static(self):
        lesion = Lesion(LabelKind.BENIGN, (30.0, 60.0), 5.0, 0.3)
        assert lesion.at_exam(0, 3) == lesion.at_exam(2, 3) == (5.0, 0.3)

    def test_malignant_lesion_grows(self):
        lesion = Lesion(LabelKind.MALIGNANT, (30.0, 60.0), 6.0, 0.4, radius_growth=1.5, intensity_growth=1.2)
        assert lesion.at_exam(2, 3) == (6.0, 0.4)
        radius, intensity = lesion.at_exam(0, 3)
        assert radius == pytest.approx(6.0 / 2.25)
        assert intensity == pytest.approx(0.4 / 1.44)

    def test_lesion_brightens_breast_only(self):
        base = breast_phantom(View.L_CC, (134, 97), np.random.default_rng(1))
        lesion = Lesion(LabelKind.BENIGN, (30.0, 67.0), 6.0, 0.3)
        plain, _ = render_exam_view(base, AffineTransform.identity(), None, 0, 1, 1.0)
        image, mask = render_exam_view(base, AffineTransform.identity(), lesion, 0, 1, 1.0)
        assert mask.sum() > 0
        assert np.all(image[mask] >= plain[mask])
        np.testing.assert_array_equal(image[base == 0], 0.0)
        assert image.max() <= 1.0

    def test_lesion_below_min_radius_is_not_drawn(self):
        base = breast_phantom(View.L_CC, (134, 97), np.random.default_rng(1))
        lesion = Lesion(LabelKind.MALIGNANT, (30.0, 67.0), 2.0, 0.3, radius_growth=4.0)
        image, mask = render_exam_view(base, AffineTransform.identity(), lesion, 0, 2, 1.0)
        assert mask is None

    def test_lesion_kind_frequencies(self):
        config = small_config(malignant_fraction=0.2, benign_fraction=0.3)
        rng = np.random.default_rng(5)
        kinds = [_lesion_kind(config, rng) for _ in range(20_000)]
        assert kinds.count(LabelKind.MALIGNANT) / 20_000 == pytest.approx(0.2, abs=0.015)
        assert kinds.count(LabelKind.BENIGN) / 20_000 == pytest.approx(0.3, abs=0.015)


# =============================================================================
# Cohort generation
# =============================================================================

class TestSynthGenerate:

    def test_structure(self):
        cohort = synth_generate(small_config(), seed=3)
        assert cohort.patient_ids == [f"P{i:05d}" for i in range(6)]
        for exams in cohort.exams.values():
            assert len(exams) == 3
            assert all(a.date < b.date for a, b in zip(exams, exams[1:]))
            for exam in exams:
                assert set(exam.images) == set(VIEWS)
                assert exam.image(View.L_CC).shape == (134, 97)
                assert exam.image(View.R_MLO).shape == (149, 87)
                assert all(0.0 <= img.min() and img.max() <= 1.0 for img in exam.images.values())

    def test_same_seed_is_bit_identical(self):
        a = synth_generate(small_config(), seed=11)
        b = synth_generate(small_config(), seed=11)
        for ea, eb in zip(a.all_exams(), b.all_exams()):
            assert (ea.exam_id, ea.date, ea.labels, ea.biopsied) == (eb.exam_id, eb.date, eb.labels, eb.biopsied)
            for view in VIEWS:
                assert ea.image(view).tobytes() == eb.image(view).tobytes()

    def test_patient_independent_of_cohort_size(self):
        small = synth_generate(small_config(n_patients=2), seed=4)
        large = synth_generate(small_config(n_patients=5), seed=4)
        for ea, eb in zip(small.exams["P00001"], large.exams["P00001"]):
            assert ea.image(View.L_CC).tobytes() == eb.image(View.L_CC).tobytes()

    def test_no_malignant_when_fraction_zero(self):
        cohort = synth_generate(small_config(n_patients=20, malignant_fraction=0.0, benign_fraction=0.5), seed=0)
        assert not any(e.labels.malignant_left or e.labels.malignant_right for e in cohort.all_exams())

    def test_biopsied_follows_lesions(self):
        cohort = synth_generate(small_config(n_patients=20, malignant_fraction=0.3, benign_fraction=0.3), seed=2)
        assert all(e.biopsied == e.labels.any() for e in cohort.all_exams())

    def test_malignant_only_rule(self):
        config = small_config(n_patients=20, malignant_fraction=0.0, benign_fraction=0.6, biopsy_rule="malignant_only")
        assert not any(e.biopsied for e in synth_generate(config, seed=1).all_exams())

    def test_malignant_lesion_area_grows(self):
        cohort = synth_generate(small_config(n_patients=25, malignant_fraction=1.0, benign_fraction=0.0), seed=7)
        checked = 0
        for exams in cohort.exams.values():
            for view in VIEWS:
                areas = [int(cohort.lesion_masks.get((e.exam_id, view), np.zeros(1, bool)).sum()) for e in exams]
                for earlier, later in zip(areas, areas[1:]):
                    assert later > earlier
                checked += 1
        assert checked == 100

    def test_benign_lesion_labelled_in_every_exam(self):
        cohort = synth_generate(small_config(n_patients=10, malignant_fraction=0.0, benign_fraction=1.0), seed=8)
        for exam in cohort.all_exams():
            assert exam.labels.benign_left and exam.labels.benign_right

    def test_masks_mirror_right_views(self):
        cohort = synth_generate(small_config(n_patients=4, malignant_fraction=0.0, benign_fraction=1.0), seed=9)
        for (exam_id, view), mask in cohort.lesion_masks.items():
            cols = np.nonzero(mask.any(axis=0))[0]
            if cols.size == 0:
                continue
            width = mask.shape[1]
            if view.side is Side.LEFT:
                assert cols.mean() < 0.8 * width
            else:
                assert cols.mean() > 0.2 * width

    def test_empty_cohort(self):
        cohort = synth_generate(small_config(n_patients=0), seed=0)
        assert cohort.n_exams == 0

    @pytest.mark.slow
    def test_label_marginals(self):
        config = SynthConfig(n_patients=2000, exams_per_patient=2, image_scale=40,
                             malignant_fraction=0.15, benign_fraction=0.15)
        cohort = synth_generate(config, seed=0)
        latest = [cohort.exams[p][-1] for p in cohort.patient_ids]
        breasts = 2 * len(latest)
        malignant = sum(e.labels.malignant_left + e.labels.malignant_right for e in latest)
        benign = sum(e.labels.benign_left + e.labels.benign_right for e in latest)
        assert malignant / breasts == pytest.approx(0.15, abs=0.02)
        assert benign / breasts == pytest.approx(0.15, abs=0.02)
