"""
evaluate command - score checkpoints on the test pairs and write the AUC table.
"""
import glob
from pathlib import Path
from typing import List, Set

import numpy as np

from commands.common import RunRecorder, add_cohort_arguments, args_config, open_cohort, pairs_for
from models.checkpoint import Checkpoint
from models.exam import Split
from services.checkpoint_service import load_checkpoint, model_from_checkpoint
from services.evaluation_service import confident_cases, evaluation_service
from utils.errors import UsageError
from utils.logger import logger


def register(subparsers) -> None:
    parser = subparsers.add_parser("evaluate", help="evaluate an ensemble on the test split")
    add_cohort_arguments(parser)
    parser.add_argument("--checkpoints", required=True, help="glob of member checkpoints")
    parser.add_argument("--out", type=Path, required=True, help="report CSV path")
    parser.add_argument("--alignment", type=Path, default=None, help="output directory of `align`")
    parser.add_argument("--compare-to", default=None, help="glob of a second ensemble to compare against")
    parser.add_argument("--top-k", type=int, default=10)
    parser.add_argument("--population-level", choices=["exam", "patient"], default="exam")
    parser.set_defaults(handler=run)


def load_members(pattern: str) -> List[Checkpoint]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise UsageError(f"no checkpoints match {pattern!r}")
    members = [load_checkpoint(p) for p in paths]
    variants = {m.variant for m in members}
    if len(variants) != 1:
        raise UsageError(f"checkpoints mix variants {sorted(variants)}: {paths}")
    reference = members[0]
    for path, member in zip(paths[1:], members[1:]):
        if member.config.get("model") != reference.config.get("model"):
            raise UsageError(f"{path} has a different model configuration than {paths[0]}")
        if member_dtypes(member) != member_dtypes(reference):
            raise UsageError(f"{path} stores parameters at a different precision than {paths[0]}")
    return members


def member_dtypes(member: Checkpoint) -> Set[str]:
    return {str(np.asarray(v).dtype) for v in member.params.values()}


def run(args) -> int:
    recorder = RunRecorder("evaluate", args_config(args))
    recorder.inputs.update(cohort=str(args.cohort), checkpoints=args.checkpoints)
    cohort = open_cohort(args)

    members = load_members(args.checkpoints)
    variant = model_from_checkpoint(members[0]).variant
    pairs = pairs_for(cohort, Split.TEST, variant, args.alignment)
    report = evaluation_service.evaluate(members, pairs, level=args.population_level)

    if args.compare_to:
        recorder.inputs["compare_to"] = args.compare_to
        others = load_members(args.compare_to)
        other_variant = model_from_checkpoint(others[0]).variant
        other_pairs = pairs_for(cohort, Split.TEST, other_variant, args.alignment)
        other_name = other_variant.value if other_variant is not variant else f"{other_variant.value}-compare"
        report = report.merge(
            evaluation_service.evaluate(others, other_pairs, model_name=other_name, level=args.population_level)
        )

        scores_a, truths = evaluation_service.ensemble_map([model_from_checkpoint(m) for m in members], pairs)
        scores_b, _ = evaluation_service.ensemble_map([model_from_checkpoint(m) for m in others], other_pairs)
        cases = confident_cases(scores_a, scores_b, truths, args.top_k)
        cases_path = args.out.with_suffix(".confident.tsv")
        cases.to_csv(cases_path, sep="\t", index=False)
        recorder.outputs["confident_cases"] = str(cases_path)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    evaluation_service.emit(report, args.out)
    recorder.outputs["report"] = str(args.out)
    recorder.write(args.out.parent)
    logger.info(f"evaluate: {len(members)} member(s), {len(pairs)} test pairs")
    return 0
