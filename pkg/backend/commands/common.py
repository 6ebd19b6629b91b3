"""
Shared helpers for the commands: run manifests and pair loading.
"""
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import get_settings
from models.exam import Cohort, ExamPair, Split
from schemas.common import RunManifest
from schemas.network import Variant
from services.alignment_service import AlignmentService, alignment_service
from services.cohort_service import split_pairs
from services.storage_service import load_cohort
from utils.errors import UsageError
from utils.logger import logger

MANIFEST_FILE = "run_manifest.json"
REPORT_FILE = "alignment_report.tsv"
TRANSFORMS_FILE = "transforms.tsv"


class RunRecorder:
    """Collects what a command read and wrote, then writes run_manifest.json."""

    def __init__(self, command: str, config: Dict[str, Any], seed: Optional[int] = None):
        self.command = command
        self.config = {k: str(v) if isinstance(v, Path) else v for k, v in config.items()}
        self.seed = seed
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.started_at = datetime.now(timezone.utc)
        self._t0 = time.perf_counter()

    def write(self, out_dir: Path) -> Path:
        manifest = RunManifest(
            command=self.command,
            config=self.config,
            seed=self.seed,
            inputs=self.inputs,
            outputs=self.outputs,
            tool_version=get_settings().version,
            started_at=self.started_at,
            duration_seconds=time.perf_counter() - self._t0,
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_FILE
        path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        return path


def args_config(args) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k != "handler"}


def add_cohort_arguments(parser) -> None:
    parser.add_argument("--cohort", type=Path, required=True, help="cohort directory or manifest")
    parser.add_argument("--split-seed", type=int, default=None,
                        help="seed the cohort was generated with (default: from its run manifest, else 0)")
    parser.add_argument("--scale", type=int, default=None,
                        help="standardize rasters to full size divided by this (default: from its run manifest)")


def open_cohort(args) -> Cohort:
    """Load the --cohort manifest with the split seed and scale it was written with."""
    cohort_dir = args.cohort if args.cohort.is_dir() else args.cohort.parent
    seed, scale = 0, None
    record = cohort_dir / MANIFEST_FILE
    if record.exists():
        manifest = RunManifest.model_validate_json(record.read_text(encoding="utf-8"))
        if manifest.command == "synth":
            seed = manifest.seed or 0
            scale = manifest.config.get("scale")
    seed = seed if args.split_seed is None else args.split_seed
    scale = scale if args.scale is None else args.scale
    return load_cohort(args.cohort, image_scale=scale, seed=seed)


def load_aligned(pairs: List[ExamPair], alignment_dir: Path) -> List[ExamPair]:
    """Re-create aligned pairs from a stored alignment report + transform table."""
    report, table = alignment_dir / REPORT_FILE, alignment_dir / TRANSFORMS_FILE
    if not report.exists() or not table.exists():
        raise UsageError(f"{alignment_dir} has no {REPORT_FILE}/{TRANSFORMS_FILE}; run `align` first")
    transforms = AlignmentService.read_transforms(report, table)
    missing = [p.pair_id for p in pairs if p.pair_id not in transforms]
    if missing:
        raise UsageError(f"{len(missing)} pairs have no stored alignment, e.g. {missing[0]}")
    return [alignment_service.apply_alignment(p, transforms[p.pair_id]) for p in pairs]


def pairs_for(
    cohort: Cohort,
    split: Split,
    variant: Variant,
    alignment_dir: Optional[Path] = None,
) -> List[ExamPair]:
    """Split pairs, aligned when the variant compares locally."""
    pairs = split_pairs(cohort, split)
    if not variant.needs_alignment or not pairs:
        return pairs
    if alignment_dir is not None:
        return load_aligned(pairs, alignment_dir)
    logger.info(f"No stored alignment given; aligning {len(pairs)} {split.value} pairs")
    return alignment_service.align_pairs(pairs, get_settings().threads)
