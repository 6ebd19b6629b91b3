"""
train command - train an ensemble of pair models and keep each member's
best checkpoint plus its per-epoch metric log.
"""
from pathlib import Path

from commands.common import RunRecorder, add_cohort_arguments, args_config, open_cohort, pairs_for
from config import get_settings
from models.exam import Split
from schemas.network import Variant
from schemas.training import TrainConfig
from services.checkpoint_service import save_checkpoint
from services.training_service import training_service
from utils.errors import UsageError
from utils.logger import logger


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="train ensemble members")
    add_cohort_arguments(parser)
    parser.add_argument("--variant", choices=[v.value for v in Variant], required=True)
    parser.add_argument("--members", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=70)
    parser.add_argument("--B", dest="b", type=int, default=None, help="biopsied pairs per epoch")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--alignment", type=Path, default=None, help="output directory of `align`")
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    parser.add_argument("--accumulate", type=int, default=1)
    parser.add_argument("--pretrain-epochs", type=int, default=3)
    parser.add_argument("--no-freeze", action="store_true", help="train the backbone too")
    parser.add_argument("--retention", choices=["best_last", "all"], default="best_last")
    parser.add_argument("--population-level", choices=["exam", "patient"], default="exam")
    parser.set_defaults(handler=run)


def run(args) -> int:
    if args.members < 1:
        raise UsageError("--members must be at least 1")
    config = TrainConfig(
        variant=Variant(args.variant),
        epochs=args.epochs,
        biopsied_per_epoch=args.b,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        seed=args.seed,
        freeze_backbone=not args.no_freeze,
        accumulate=args.accumulate,
        retention=args.retention,
        population_level=args.population_level,
        pretrain_epochs=args.pretrain_epochs,
    )
    recorder = RunRecorder("train", {**args_config(args), "train": config.model_dump(mode="json")}, args.seed)
    recorder.inputs["cohort"] = str(args.cohort)
    if args.alignment is not None:
        recorder.inputs["alignment"] = str(args.alignment)

    cohort = open_cohort(args)
    train_pairs = pairs_for(cohort, Split.TRAIN, config.variant, args.alignment)
    val_pairs = pairs_for(cohort, Split.VAL, config.variant, args.alignment)
    runs = training_service.train_members(
        cohort, config, args.members, get_settings().threads, train_pairs=train_pairs, val_pairs=val_pairs
    )

    args.out.mkdir(parents=True, exist_ok=True)
    for i, run_ in enumerate(runs):
        best = save_checkpoint(run_.best, args.out / f"member{i}.lvck")
        log = run_.write_metrics(args.out / f"member{i}_metrics.csv")
        recorder.outputs[f"member{i}"] = str(best)
        recorder.outputs[f"member{i}_metrics"] = str(log)
        if config.retention == "all":
            for ckpt in run_.checkpoints:
                save_checkpoint(ckpt, args.out / f"member{i}_epochs" / f"epoch{ckpt.epoch:03d}.lvck")
    recorder.write(args.out)
    logger.info(f"train: {len(runs)} {config.variant.value} member(s) written to {args.out}")
    return 0
