"""
align command - align every exam pair of a cohort and write the report,
the transform table and the warped prior images.
"""
from pathlib import Path

from commands.common import REPORT_FILE, TRANSFORMS_FILE, RunRecorder, add_cohort_arguments, args_config, open_cohort
from config import get_settings
from models.exam import VIEWS
from schemas.alignment import AlignConfig
from services.alignment_service import AlignmentService, pair_key
from services.cohort_service import cohort_service
from services.storage_service import write_raster
from utils.logger import logger


def register(subparsers) -> None:
    parser = subparsers.add_parser("align", help="align prior images to current images")
    add_cohort_arguments(parser)
    parser.add_argument("--out", type=Path, required=True)
    parser.add_argument("--eps", type=float, default=1e-6, help="nonzero-mask threshold")
    parser.add_argument("--downsample", type=int, default=1)
    parser.set_defaults(handler=run)


def run(args) -> int:
    config = AlignConfig(eps=args.eps, downsample=args.downsample)
    recorder = RunRecorder("align", {**args_config(args), "align": config.model_dump(mode="json")})
    recorder.inputs["cohort"] = str(args.cohort)

    cohort = open_cohort(args)
    pairs = cohort_service.all_pairs(cohort)
    aligned = AlignmentService(config).align_pairs(pairs, get_settings().threads)

    args.out.mkdir(parents=True, exist_ok=True)
    report, transforms = args.out / REPORT_FILE, args.out / TRANSFORMS_FILE
    AlignmentService.write_report(aligned, report, transforms)
    for pair in aligned:
        for view in VIEWS:
            write_raster(args.out / "warped" / pair_key(pair.pair_id) / f"{view.value}.lvim", pair.prior.image(view))

    recorder.outputs.update(report=str(report), transforms=str(transforms), warped=str(args.out / "warped"))
    recorder.write(args.out)
    logger.info(f"align: {len(aligned)} pairs, {4 * len(aligned)} report rows")
    return 0
