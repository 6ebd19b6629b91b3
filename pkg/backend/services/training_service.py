"""
Training Service - per-pair optimization, validation and model selection.

One epoch is every biopsied training pair plus an equal number of other
pairs, shuffled; the seed of epoch e is derived from (seed, e). After each
epoch the model is scored on the biopsied validation slice and the malignant
AUC becomes that epoch's checkpoint metric.
"""
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models.checkpoint import Checkpoint
from models.exam import VIEWS, Cohort, ExamPair, LabelKind, Split
from schemas.network import PairModelConfig, Variant
from schemas.training import TrainConfig
from services import ndtensor as nd
from services.alignment_service import AlignmentService
from services.checkpoint_service import checkpoint_from_model
from services.cohort_service import cohort_service, epoch_sample, slice_population, split_pairs
from services.evaluation_service import auc, score_pairs
from services.nets import Params, PairModel
from utils.errors import AUCUndefinedError, NumericalError, SamplingError
from utils.logger import logger

METRIC_COLUMNS = ["epoch", "mean_loss", "val_biopsied_malignant_auc", "steps"]
PRETRAIN_STREAM = 1_000_003


def loss_for_pair(model: PairModel, pair: ExamPair) -> nd.Tensor:
    """Mean of 4 views x 2 heads cross-entropy terms against the current exam's breast labels."""
    model.check_views(pair)
    terms = []
    for view in VIEWS:
        benign, malignant = model.forward_view(pair, view)
        for kind, probs in ((LabelKind.BENIGN, benign), (LabelKind.MALIGNANT, malignant)):
            terms.append(nd.cross_entropy(probs, [int(pair.labels.get(view.side, kind))]))
    return nd.mean_scalars(terms)


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: Params, state: OptimizerState, config: TrainConfig) -> None:
    """Apply one Adam or SGD update to every parameter that requires a gradient."""
    live = {k: p for k, p in params.items() if p.requires_grad and p.grad is not None}
    for name, param in live.items():
        if np.isnan(param.grad).any():
            logger.error(f"NaN gradient in {name} at optimizer step {state.step + 1}")
            raise NumericalError(f"NaN gradient in parameter {name} at optimizer step {state.step + 1}")

    state.step += 1
    lr = config.learning_rate
    for name, param in live.items():
        g = param.grad
        if config.optimizer == "sgd":
            update = lr * g
        else:
            b1, b2 = config.beta1, config.beta2
            m = state.m.get(name, np.zeros_like(param.data))
            v = state.v.get(name, np.zeros_like(param.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            state.m[name], state.v[name] = m, v
            m_hat = m / (1 - b1 ** state.step)
            v_hat = v / (1 - b2 ** state.step)
            update = lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        param.data = (param.data - update).astype(param.data.dtype)


def epoch_seed(seed: int, epoch: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, epoch]).generate_state(1)[0])


def validation_metric(model: PairModel, val_pairs: Sequence[ExamPair], level: str = "exam") -> float:
    """Malignant AUC on the biopsied validation slice; NaN when undefined."""
    biopsied = slice_population(val_pairs, "biopsied", level)
    scored = [s for s in score_pairs(model, biopsied) if s.label is LabelKind.MALIGNANT]
    try:
        return auc([s.score for s in scored], [s.truth for s in scored])
    except AUCUndefinedError:
        logger.warning(f"Validation AUC undefined ({len(biopsied)} biopsied validation pairs); recording NaN")
        return math.nan


def _run_epoch(
    model: PairModel,
    pairs: Sequence[ExamPair],
    state: OptimizerState,
    config: TrainConfig,
) -> Tuple[float, int]:
    """One pass over `pairs`; returns (mean loss, optimizer steps)."""
    losses: List[float] = []
    steps = 0
    pending = 0
    params = model.trainable_parameters()
    model.zero_grad()
    for pair in pairs:
        loss = loss_for_pair(model, pair)
        loss.backward()
        losses.append(loss.item())
        pending += 1
        if pending == config.accumulate:
            _step(params, state, config, pending)
            steps += 1
            pending = 0
            model.zero_grad()
    if pending:
        _step(params, state, config, pending)
        steps += 1
        model.zero_grad()
    return (math.fsum(losses) / len(losses) if losses else math.nan), steps


def _step(params: Params, state: OptimizerState, config: TrainConfig, count: int) -> None:
    if count > 1:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad / count
    optimizer_step(params, state, config)


def _epoch_pairs(pairs: Sequence[ExamPair], config: TrainConfig, seed: int) -> List[ExamPair]:
    biopsied = slice_population(pairs, "biopsied", config.population_level)
    if not biopsied:
        raise SamplingError("training split has no biopsied pairs to balance epochs with")
    return epoch_sample(pairs, config.biopsied_per_epoch, seed, config.population_level)


def pretrain_backbone(train_pairs: Sequence[ExamPair], config: TrainConfig, seed: int) -> Dict[str, np.ndarray]:
    """Train a SingleBaseline model end to end and return its backbone arrays."""
    model = PairModel(
        PairModelConfig(
            variant=Variant.SINGLE_BASELINE,
            backbone=config.backbone,
            hidden_dim=config.hidden_dim,
            freeze_backbone=False,
        ),
        seed=seed,
    )
    opt_config = config.model_copy(update={"learning_rate": config.pretrain_learning_rate})
    state = OptimizerState()
    for epoch in range(1, config.pretrain_epochs + 1):
        pairs = _epoch_pairs(train_pairs, config, epoch_seed(seed, epoch, PRETRAIN_STREAM))
        mean_loss, steps = _run_epoch(model, pairs, state, opt_config)
        logger.info(f"Pretrain seed {seed} epoch {epoch}/{config.pretrain_epochs}: loss={mean_loss:.4f} steps={steps}")
    return {k: v for k, v in model.state_dict().items() if k.startswith("backbone.")}


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    val_metric: float
    steps: int


@dataclass
class TrainingRun:
    """Outcome of one member's training: retained checkpoints and the metric log."""
    checkpoints: List[Checkpoint]
    metrics: List[EpochMetrics]

    @property
    def best(self) -> Checkpoint:
        return select_best(self.checkpoints)

    @property
    def last(self) -> Checkpoint:
        return max(self.checkpoints, key=lambda c: c.epoch)

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[m.epoch, m.mean_loss, m.val_metric, m.steps] for m in self.metrics],
            columns=METRIC_COLUMNS,
        )

    def write_metrics(self, path: Path) -> Path:
        self.metrics_frame().to_csv(path, index=False, na_rep="nan")
        return path


def select_best(checkpoints: Sequence[Checkpoint], metrics: Optional[Sequence[float]] = None) -> Checkpoint:
    """Highest metric wins, ties go to the earliest epoch, NaN never beats a number."""
    if not checkpoints:
        raise ValueError("select_best needs at least one checkpoint")
    values = list(metrics) if metrics is not None else [c.metric for c in checkpoints]
    if len(values) != len(checkpoints):
        raise ValueError(f"{len(checkpoints)} checkpoints but {len(values)} metrics")
    order = sorted(range(len(checkpoints)), key=lambda i: checkpoints[i].epoch)
    best = order[0]
    for i in order[1:]:
        if not math.isnan(values[i]) and (math.isnan(values[best]) or values[i] > values[best]):
            best = i
    return checkpoints[best]


def _retain(kept: List[Checkpoint], ckpt: Checkpoint, retention: str) -> List[Checkpoint]:
    if retention == "all":
        return kept + [ckpt]
    candidates = kept + [ckpt]
    best = select_best(candidates)
    return [best] if best is ckpt else [best, ckpt]


def prepare_pairs(cohort: Cohort, split: Split, variant: Variant, aligner: Optional[AlignmentService] = None,
                  threads: int = 1) -> List[ExamPair]:
    pairs = split_pairs(cohort, split)
    if variant.needs_alignment and pairs and not all(p.is_aligned for p in pairs):
        pairs = (aligner or AlignmentService()).align_pairs(pairs, threads)
    return pairs


def train(
    cohort: Optional[Cohort],
    config: TrainConfig,
    train_pairs: Optional[Sequence[ExamPair]] = None,
    val_pairs: Optional[Sequence[ExamPair]] = None,
    backbone: Optional[Dict[str, np.ndarray]] = None,
) -> TrainingRun:
    """Train one pair model; pairs default to the cohort's train/val splits."""
    if train_pairs is None:
        train_pairs = prepare_pairs(cohort, Split.TRAIN, config.variant)
    if val_pairs is None:
        val_pairs = prepare_pairs(cohort, Split.VAL, config.variant)

    if backbone is None and config.freeze_backbone and config.pretrain_epochs > 0:
        backbone = pretrain_backbone(train_pairs, config, config.seed)
    model = PairModel(config.pair_model_config().model_copy(update={"freeze_backbone": False}), seed=config.seed)
    if backbone is not None:
        model.load_backbone(backbone)
    if config.freeze_backbone:
        model.freeze_backbone()

    snapshot = config.model_dump(mode="json")
    state = OptimizerState()
    kept: List[Checkpoint] = []
    metrics: List[EpochMetrics] = []
    for epoch in range(1, config.epochs + 1):
        pairs = _epoch_pairs(train_pairs, config, epoch_seed(config.seed, epoch))
        mean_loss, steps = _run_epoch(model, pairs, state, config)
        metric = validation_metric(model, val_pairs, config.population_level)
        metrics.append(EpochMetrics(epoch, mean_loss, metric, steps))
        logger.info(
            f"{config.variant.value} seed {config.seed} epoch {epoch}/{config.epochs}: "
            f"loss={mean_loss:.4f} val_auc={metric:.4f} steps={steps}"
        )
        ckpt = checkpoint_from_model(model, epoch, metric, snapshot)
        kept = _retain(kept, ckpt, config.retention)
    return TrainingRun(checkpoints=kept, metrics=metrics)


def _train_member(args) -> TrainingRun:
    config, train_pairs, val_pairs, backbone = args
    return train(None, config, train_pairs, val_pairs, backbone)


def _pretrain_member(args) -> Dict[str, np.ndarray]:
    train_pairs, config = args
    return pretrain_backbone(train_pairs, config, config.seed)


def _pool_map(fn, jobs: list, threads: int) -> list:
    if threads <= 1 or len(jobs) < 2:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def member_configs(config: TrainConfig, members: int) -> List[TrainConfig]:
    return [config.model_copy(update={"seed": config.seed + i}) for i in range(members)]


def pretrain_members(
    train_pairs: Sequence[ExamPair], config: TrainConfig, members: int, threads: int = 1
) -> List[Dict[str, np.ndarray]]:
    """One pretrained backbone per member seed, in member order."""
    jobs = [(list(train_pairs), c) for c in member_configs(config, members)]
    return _pool_map(_pretrain_member, jobs, threads)


def train_members(
    cohort: Cohort,
    config: TrainConfig,
    members: int,
    threads: int = 1,
    train_pairs: Optional[Sequence[ExamPair]] = None,
    val_pairs: Optional[Sequence[ExamPair]] = None,
    backbones: Optional[Sequence[Dict[str, np.ndarray]]] = None,
) -> List[TrainingRun]:
    """Independent members seeded seed, seed+1, ...; results in member order."""
    if train_pairs is None:
        train_pairs = prepare_pairs(cohort, Split.TRAIN, config.variant, threads=threads)
    if val_pairs is None:
        val_pairs = prepare_pairs(cohort, Split.VAL, config.variant, threads=threads)
    configs = member_configs(config, members)
    if backbones is not None and len(backbones) != members:
        raise ValueError(f"{len(backbones)} backbones for {members} members")
    jobs = [
        (c, list(train_pairs), list(val_pairs), None if backbones is None else backbones[i])
        for i, c in enumerate(configs)
    ]
    logger.info(f"Training {members} {config.variant.value} member(s) with {threads} worker(s)")
    return _pool_map(_train_member, jobs, threads)


class TrainingService:
    """Ensemble training entry point used by the commands."""

    def pretrain_members(
        self, train_pairs: Sequence[ExamPair], config: TrainConfig, members: int, threads: int = 1
    ) -> List[Dict[str, np.ndarray]]:
        return pretrain_members(train_pairs, config, members, threads)

    def train_members(
        self,
        cohort: Cohort,
        config: TrainConfig,
        members: int,
        threads: int = 1,
        train_pairs: Optional[Sequence[ExamPair]] = None,
        val_pairs: Optional[Sequence[ExamPair]] = None,
        backbones: Optional[Sequence[Dict[str, np.ndarray]]] = None,
    ) -> List[TrainingRun]:
        """Check the training pairs can fill balanced epochs, then train."""
        if train_pairs is None:
            train_pairs = prepare_pairs(cohort, Split.TRAIN, config.variant, threads=threads)
        cohort_service.check_epoch_balance(train_pairs, config.biopsied_per_epoch, config.population_level)
        return train_members(cohort, config, members, threads, train_pairs, val_pairs, backbones)


# Singleton instance
training_service = TrainingService()
