"""
Tests for AUC, ensembling, evaluation cells and the results table.
"""
import itertools

import numpy as np
import pandas as pd
import pytest

from schemas.evaluation import EvalCell, EvalReport
from schemas.network import Variant
from services import ndtensor as nd
from services.checkpoint_service import checkpoint_from_model
from services.evaluation_service import (
    REPORT_COLUMNS,
    auc,
    confident_cases,
    emit_report,
    ensemble_scores,
    evaluate,
    evaluation_service,
    format_value,
    read_report,
)
from services.nets import PairModel
from utils.errors import AUCUndefinedError, UsageError


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


# =============================================================================
# AUC
# =============================================================================

class TestAUC:

    def test_small_example(self):
        assert auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == pytest.approx(0.75)

    def test_perfect_and_inverted(self):
        assert auc([0.1, 0.9], [False, True]) == 1.0
        assert auc([0.9, 0.1], [False, True]) == 0.0

    def test_ties_count_half(self):
        assert auc([0.5, 0.5], [False, True]) == 0.5

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 30))
            labels = rng.uniform(size=n) < 0.4
            labels[0], labels[1] = True, False
            scores = np.round(rng.uniform(size=n), 1)
            assert auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores = rng.uniform(size=50)
        labels = rng.uniform(size=50) < 0.5
        assert auc(scores, labels) == pytest.approx(auc(np.exp(3 * scores), labels))

    def test_complement(self):
        rng = np.random.default_rng(2)
        scores = rng.uniform(size=40)
        labels = rng.uniform(size=40) < 0.5
        assert auc(-scores, labels) == pytest.approx(1.0 - auc(scores, labels))

    def test_single_class_undefined(self):
        with pytest.raises(AUCUndefinedError, match="AUC undefined"):
            auc([0.1, 0.2], [True, True])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [True])


# =============================================================================
# Ensembles
# =============================================================================

class TestEnsemble:

    def test_mean_of_members(self):
        key = ("p", "left", "malignant")
        assert ensemble_scores([{key: 0.4}, {key: 0.8}])[key] == pytest.approx(0.6)

    def test_key_mismatch(self):
        with pytest.raises(ValueError):
            ensemble_scores([{("a", "left", "benign"): 0.1}, {("b", "left", "benign"): 0.1}])

    def test_member_order_irrelevant(self):
        rng = np.random.default_rng(3)
        keys = [(f"p{i}", "left", "benign") for i in range(10)]
        members = [{k: float(rng.uniform()) for k in keys} for _ in range(5)]
        forward = ensemble_scores(members)
        backward = ensemble_scores(members[::-1])
        assert all(forward[k] == backward[k] for k in keys)

    def test_empty(self):
        with pytest.raises(ValueError):
            ensemble_scores([])


# =============================================================================
# Evaluation
# =============================================================================

class TestEvaluate:

    def test_cells_for_one_member(self, tiny_model_config, toy_pairs):
        model = PairModel(tiny_model_config(Variant.GLOBAL_COMPARE))
        report = evaluate([model], toy_pairs)
        assert len(report.cells) == 12
        assert report.models == ["GlobalCompare"]
        assert report.get("GlobalCompare", "screening", "malignant", "std") == 0.0
        mean = report.get("GlobalCompare", "screening", "malignant", "mean")
        assert report.get("GlobalCompare", "screening", "malignant", "ensemble") == pytest.approx(mean)

    def test_undefined_cells(self, tiny_model_config, toy_pairs):
        report = evaluate([PairModel(tiny_model_config(Variant.GLOBAL_COMPARE))], toy_pairs)
        # No toy pair has a benign finding.
        for population in ("screening", "biopsied"):
            for statistic in ("ensemble", "mean", "std"):
                assert report.get("GlobalCompare", population, "benign", statistic) is None

    def test_no_biopsied_pairs(self, tiny_model_config, toy_pairs):
        report = evaluate([PairModel(tiny_model_config(Variant.GLOBAL_COMPARE))], toy_pairs[2:])
        assert report.get("GlobalCompare", "biopsied", "malignant", "ensemble") is None

    def test_members_and_checkpoints_mix(self, tiny_model_config, toy_pairs):
        a = PairModel(tiny_model_config(Variant.GLOBAL_COMPARE), seed=1)
        b = PairModel(tiny_model_config(Variant.GLOBAL_COMPARE), seed=2)
        report = evaluate([a, checkpoint_from_model(b, epoch=1)], toy_pairs, model_name="gc")
        aucs = report.member_aucs["gc/screening/malignant"]
        assert len(aucs) == 2
        assert report.get("gc", "screening", "malignant", "std") == pytest.approx(float(np.std(aucs)))

    def test_mixed_variants(self, tiny_model_config, toy_pairs):
        members = [
            PairModel(tiny_model_config(Variant.GLOBAL_COMPARE)),
            PairModel(tiny_model_config(Variant.SINGLE_BASELINE)),
        ]
        with pytest.raises(UsageError):
            evaluate(members, toy_pairs)

    def test_no_members(self, toy_pairs):
        with pytest.raises(UsageError):
            evaluate([], toy_pairs)

    def test_mixed_model_configs(self, tiny_model_config, toy_pairs):
        members = [
            PairModel(tiny_model_config(Variant.GLOBAL_COMPARE, hidden_dim=4)),
            PairModel(tiny_model_config(Variant.GLOBAL_COMPARE, hidden_dim=6)),
        ]
        with pytest.raises(UsageError, match="model configuration"):
            evaluate(members, toy_pairs)

    def test_mixed_precision(self, tiny_model_config, toy_pairs):
        single = PairModel(tiny_model_config(Variant.GLOBAL_COMPARE))
        with nd.precision("float64"):
            double = PairModel(tiny_model_config(Variant.GLOBAL_COMPARE))
        with pytest.raises(UsageError, match="precision"):
            evaluate([single, double], toy_pairs)

    def test_feature_caches_emptied(self, tiny_model_config, toy_pairs):
        members = [PairModel(tiny_model_config(Variant.GLOBAL_COMPARE), seed=s) for s in range(2)]
        evaluate(members, toy_pairs)
        assert all(not m._feature_cache for m in members)
        evaluation_service.ensemble_map(members, toy_pairs)
        assert all(not m._feature_cache for m in members)


# =============================================================================
# Reports
# =============================================================================

class TestReport:

    def _report(self):
        return EvalReport(cells=[
            EvalCell(model="b", population="screening", label="malignant", statistic="mean", value=0.86641),
            EvalCell(model="a", population="biopsied", label="benign", statistic="std", value=None),
            EvalCell(model="a", population="biopsied", label="benign", statistic="ensemble", value=0.5),
        ])

    def test_format(self):
        assert format_value(0.86641) == "0.8664"
        assert format_value(None) == "undefined"

    def test_rows_sorted(self, tmp_path):
        path = emit_report(self._report(), tmp_path / "report.csv")
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        assert list(frame.columns) == REPORT_COLUMNS
        assert frame.values.tolist() == [
            ["a", "biopsied", "benign", "ensemble", "0.5000"],
            ["a", "biopsied", "benign", "std", "undefined"],
            ["b", "screening", "malignant", "mean", "0.8664"],
        ]

    def test_read_back(self, tmp_path):
        restored = read_report(emit_report(self._report(), tmp_path / "report.csv"))
        assert restored.get("b", "screening", "malignant", "mean") == 0.8664
        assert restored.get("a", "biopsied", "benign", "std") is None

    def test_merge(self):
        other = EvalReport(cells=[EvalCell(model="c", population="screening", label="benign", statistic="mean")])
        assert self._report().merge(other).models == ["a", "b", "c"]


class TestConfidentCases:

    def test_margin_ranking(self):
        truths = {("p1", "left", "malignant"): True, ("p2", "left", "malignant"): False,
                  ("p3", "left", "malignant"): True}
        a = {("p1", "left", "malignant"): 0.9, ("p2", "left", "malignant"): 0.1, ("p3", "left", "malignant"): 0.2}
        b = {("p1", "left", "malignant"): 0.5, ("p2", "left", "malignant"): 0.2, ("p3", "left", "malignant"): 0.6}
        frame = confident_cases(a, b, truths, top_k=5)
        assert frame["pair_id"].tolist() == ["p1", "p2"]
        assert frame["margin"].tolist() == pytest.approx([0.4, 0.1])
        assert len(confident_cases(a, b, truths, top_k=1)) == 1
