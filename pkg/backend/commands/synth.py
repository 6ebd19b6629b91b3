"""
synth command - write a synthetic phantom cohort to disk.
"""
from pathlib import Path

from commands.common import RunRecorder, args_config
from schemas.cohort import SynthConfig
from services.phantom_service import phantom_service
from services.storage_service import save_cohort
from utils.logger import logger


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="generate a synthetic longitudinal cohort")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--patients", type=int, default=100)
    parser.add_argument("--exams-per-patient", type=int, default=3)
    parser.add_argument("--scale", type=int, default=20, help="divisor of full image size")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--malignant-fraction", type=float, default=0.06)
    parser.add_argument("--benign-fraction", type=float, default=0.16)
    parser.add_argument("--biopsy-rule", choices=["any_lesion", "malignant_only"], default="any_lesion")
    parser.set_defaults(handler=run)


def run(args) -> int:
    config = SynthConfig(
        n_patients=args.patients,
        exams_per_patient=args.exams_per_patient,
        image_scale=args.scale,
        malignant_fraction=args.malignant_fraction,
        benign_fraction=args.benign_fraction,
        biopsy_rule=args.biopsy_rule,
    )
    recorder = RunRecorder("synth", {**args_config(args), "synth": config.model_dump(mode="json")}, args.seed)
    cohort = phantom_service.generate(config, args.seed)
    manifest = save_cohort(cohort, args.out)
    recorder.outputs["manifest"] = str(manifest)
    recorder.write(args.out)
    logger.info(f"synth: {cohort.n_exams} exams written to {args.out}")
    return 0
