"""
experiment command - end-to-end synthetic run: generate a cohort, align it,
pretrain one backbone per member, train SingleBaseline, GlobalCompare and
AlignLocalCompare ensembles on top of it and write one combined report.
"""
from pathlib import Path

from commands.common import REPORT_FILE, TRANSFORMS_FILE, RunRecorder, args_config
from config import get_settings
from models.exam import Split
from schemas.cohort import SynthConfig
from schemas.network import Variant
from schemas.training import ExperimentConfig, TrainConfig
from services.alignment_service import AlignmentService
from services.checkpoint_service import save_checkpoint
from services.cohort_service import cohort_service, split_pairs
from services.evaluation_service import evaluation_service
from services.phantom_service import phantom_service
from services.storage_service import save_cohort
from services.training_service import training_service
from utils.logger import logger


def register(subparsers) -> None:
    parser = subparsers.add_parser("experiment", help="run the full synthetic protocol")
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--patients", type=int, default=800)
    parser.add_argument("--exams-per-patient", type=int, default=3)
    parser.add_argument("--scale", type=int, default=20)
    parser.add_argument("--members", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=70)
    parser.add_argument("--pretrain-epochs", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.set_defaults(handler=run)


def run_experiment(config: ExperimentConfig, out: Path, recorder: RunRecorder) -> Path:
    threads = get_settings().threads
    cohort = phantom_service.generate(config.synth, config.seed)
    recorder.outputs["cohort"] = str(save_cohort(cohort, out / "cohort"))
    synth_record = RunRecorder(
        "synth", {"scale": config.synth.image_scale, "synth": config.synth.model_dump(mode="json")}, config.seed
    )
    synth_record.write(out / "cohort")

    splits = {s: split_pairs(cohort, s) for s in Split}
    cohort_service.check_epoch_balance(
        splits[Split.TRAIN], config.train.biopsied_per_epoch, config.train.population_level
    )
    aligner = AlignmentService(config.align)
    aligned = {s: aligner.align_pairs(p, threads) for s, p in splits.items()}
    aligner.write_report(
        [p for s in Split for p in aligned[s]], out / REPORT_FILE, out / TRANSFORMS_FILE
    )

    base = config.train.model_copy(update={"seed": config.seed})
    backbones = training_service.pretrain_members(splits[Split.TRAIN], base, config.members, threads)

    report = None
    for variant in config.variants:
        pairs = aligned if variant.needs_alignment else splits
        train_config = base.model_copy(update={"variant": variant})
        runs = training_service.train_members(
            cohort, train_config, config.members, threads,
            train_pairs=pairs[Split.TRAIN], val_pairs=pairs[Split.VAL], backbones=backbones,
        )
        variant_dir = out / variant.value
        for i, run_ in enumerate(runs):
            save_checkpoint(run_.best, variant_dir / f"member{i}.lvck")
            run_.write_metrics(variant_dir / f"member{i}_metrics.csv")
        variant_report = evaluation_service.evaluate([r.best for r in runs], pairs[Split.TEST])
        report = variant_report if report is None else report.merge(variant_report)

    path = evaluation_service.emit(report, out / "report.csv")
    recorder.outputs["report"] = str(path)
    return path


def run(args) -> int:
    config = ExperimentConfig(
        synth=SynthConfig(
            n_patients=args.patients, exams_per_patient=args.exams_per_patient, image_scale=args.scale
        ),
        train=TrainConfig(epochs=args.epochs, pretrain_epochs=args.pretrain_epochs),
        members=args.members,
        variants=(Variant.SINGLE_BASELINE, Variant.GLOBAL_COMPARE, Variant.ALIGN_LOCAL_COMPARE),
        seed=args.seed,
    )
    recorder = RunRecorder("experiment", {**args_config(args), "experiment": config.model_dump(mode="json")}, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    path = run_experiment(config, args.out, recorder)
    recorder.write(args.out)
    logger.info(f"experiment: report written to {path}")
    return 0
