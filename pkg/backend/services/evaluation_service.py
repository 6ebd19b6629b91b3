"""
Evaluation Service - AUC, ensembling and results-table reports.
"""
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from models.checkpoint import Checkpoint
from models.exam import ExamPair, LabelKind
from models.prediction import ScoredBreast
from schemas.evaluation import LABELS, POPULATIONS, EvalCell, EvalReport
from services.checkpoint_service import model_from_checkpoint
from services.cohort_service import PopulationLevel, slice_population
from services.nets import PairModel
from utils.errors import AUCUndefinedError, UsageError
from utils.logger import logger

REPORT_COLUMNS = ["model", "population", "label", "statistic", "value"]
UNDEFINED = "undefined"

ScoreKey = Tuple[str, str, str]  # (pair_id, side, label)
ScoreMap = Dict[ScoreKey, float]


def auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUC with midranks for ties (each tied pos/neg pair counts 0.5)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-d sequences")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise AUCUndefinedError(f"AUC undefined: {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ensemble_scores(member_scores: Sequence[Mapping[ScoreKey, float]]) -> ScoreMap:
    """Per-key arithmetic mean over members."""
    if not member_scores:
        raise ValueError("ensemble_scores needs at least one member")
    keys = set(member_scores[0])
    for i, member in enumerate(member_scores[1:], start=1):
        if set(member) != keys:
            raise ValueError(f"member {i} scored a different key set than member 0")
    n = len(member_scores)
    return {key: math.fsum(m[key] for m in member_scores) / n for key in member_scores[0]}


def score_pairs(model: PairModel, pairs: Sequence[ExamPair]) -> List[ScoredBreast]:
    """Every (pair, side, label) score of one model, with the current exam's truth."""
    scored: List[ScoredBreast] = []
    for pair in pairs:
        for side, prediction in model.predict_pair(pair).items():
            for kind in LabelKind:
                scored.append(
                    ScoredBreast(pair.pair_id, side, kind, pair.labels.get(side, kind), prediction.get(kind))
                )
    return scored


def _param_dtypes(model: PairModel) -> set:
    return {p.data.dtype for p in model.params.values()}


def _safe_auc(scores: Sequence[float], truths: Sequence[bool]) -> Optional[float]:
    try:
        return auc(scores, truths)
    except AUCUndefinedError:
        return None


def evaluate(
    members: Sequence[Union[Checkpoint, PairModel]],
    pairs: Sequence[ExamPair],
    model_name: Optional[str] = None,
    level: PopulationLevel = "exam",
) -> EvalReport:
    """Member mean/std AUC and ensemble AUC per population x label."""
    if not members:
        raise UsageError("evaluate needs at least one checkpoint")
    models = [m if isinstance(m, PairModel) else model_from_checkpoint(m) for m in members]
    variants = {m.variant for m in models}
    if len(variants) != 1:
        raise UsageError(f"checkpoints mix variants: {sorted(v.value for v in variants)}")
    for i, model in enumerate(models[1:], start=1):
        if model.config != models[0].config:
            raise UsageError(f"member {i} has a different model configuration than member 0")
        if _param_dtypes(model) != _param_dtypes(models[0]):
            raise UsageError(f"member {i} runs at a different precision than member 0")
    name = model_name or models[0].variant.value

    per_member = [score_pairs(m, pairs) for m in models]
    for model in models:
        model.clear_cache()
    truths = {s.key: s.truth for s in per_member[0]}
    member_maps = [{s.key: s.score for s in scored} for scored in per_member]
    ensemble = ensemble_scores(member_maps)

    cells: List[EvalCell] = []
    member_aucs: Dict[str, List[Optional[float]]] = {}
    for population in POPULATIONS:
        pair_ids = {p.pair_id for p in slice_population(pairs, population, level)}
        for label in LABELS:
            keys = [k for k in truths if k[0] in pair_ids and k[2] == label]
            y = [truths[k] for k in keys]
            aucs = [_safe_auc([m[k] for k in keys], y) for m in member_maps]
            member_aucs[f"{name}/{population}/{label}"] = aucs
            ens = _safe_auc([ensemble[k] for k in keys], y)
            if ens is None or any(a is None for a in aucs):
                logger.warning(f"{name}: AUC undefined for {population}/{label} ({len(keys)} breasts)")
                values = {"ensemble": None, "mean": None, "std": None}
            else:
                values = {
                    "ensemble": ens,
                    "mean": math.fsum(aucs) / len(aucs),
                    "std": float(np.std(aucs)),
                }
            cells.extend(EvalCell(model=name, population=population, label=label, statistic=s, value=v)
                         for s, v in values.items())

    logger.info(f"Evaluated {name}: {len(models)} member(s) on {len(pairs)} pairs")
    return EvalReport(cells=cells, member_aucs=member_aucs)


def format_value(value: Optional[float]) -> str:
    return UNDEFINED if value is None else f"{value:.4f}"


def emit_report(report: EvalReport, path: Union[str, Path]) -> Path:
    """CSV with header model,population,label,statistic,value; rows sorted."""
    path = Path(path)
    rows = [[*c.sort_key, format_value(c.value)] for c in report.sorted_cells()]
    pd.DataFrame(rows, columns=REPORT_COLUMNS).to_csv(path, index=False, encoding="utf-8")
    logger.info(f"Evaluation report written to {path} ({len(rows)} rows)")
    return path


def read_report(path: Union[str, Path]) -> EvalReport:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    if list(frame.columns) != REPORT_COLUMNS:
        raise ValueError(f"{path}: unexpected report header {list(frame.columns)}")
    cells = [
        EvalCell(
            model=row.model,
            population=row.population,
            label=row.label,
            statistic=row.statistic,
            value=None if row.value == UNDEFINED else float(row.value),
        )
        for row in frame.itertuples(index=False)
    ]
    return EvalReport(cells=cells)


def confident_cases(
    scores_a: Mapping[ScoreKey, float],
    scores_b: Mapping[ScoreKey, float],
    truths: Mapping[ScoreKey, bool],
    top_k: int = 10,
) -> pd.DataFrame:
    """Breasts where model A is more confident than model B in the correct direction.

    margin = score_a - score_b for positives and score_b - score_a for
    negatives; rows with margin > 0, largest first, ties broken by key.
    """
    rows = []
    for key, truth in truths.items():
        a, b = scores_a[key], scores_b[key]
        margin = (a - b) if truth else (b - a)
        if margin > 0:
            rows.append([*key, bool(truth), a, b, margin])
    frame = pd.DataFrame(rows, columns=["pair_id", "side", "label", "truth", "score_a", "score_b", "margin"])
    frame = frame.sort_values(["margin", "pair_id", "side", "label"], ascending=[False, True, True, True])
    return frame.head(top_k).reset_index(drop=True)


class EvaluationService:
    """Scores checkpoints on test pairs and writes the results table."""

    def evaluate(self, members, pairs, model_name=None, level: PopulationLevel = "exam") -> EvalReport:
        return evaluate(members, pairs, model_name, level)

    def ensemble_map(self, members: Sequence[PairModel], pairs: Sequence[ExamPair]) -> Tuple[ScoreMap, Dict[ScoreKey, bool]]:
        scored = [score_pairs(m, pairs) for m in members]
        for model in members:
            model.clear_cache()
        truths = {s.key: s.truth for s in scored[0]}
        return ensemble_scores([{s.key: s.score for s in run} for run in scored]), truths

    def emit(self, report: EvalReport, path) -> Path:
        return emit_report(report, path)


# Singleton instance
evaluation_service = EvaluationService()
