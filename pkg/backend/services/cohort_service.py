"""
Cohort Service - exam pairing, population slicing and epoch sampling.
"""
import hashlib
import itertools
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from models.exam import Cohort, Exam, ExamPair, Projection, Split, View
from schemas.cohort import SplitConfig
from utils.errors import PairingError, SamplingError, UsageError
from utils.logger import logger

# Full-resolution (rows, cols) per projection.
FULL_SIZES: Dict[Projection, Tuple[int, int]] = {
    Projection.CC: (2677, 1942),
    Projection.MLO: (2974, 1748),
}

PopulationName = Literal["screening", "biopsied"]
PopulationLevel = Literal["exam", "patient"]


def target_size(view: View, scale: int = 1) -> Tuple[int, int]:
    """Standard image size for a view, divided by `scale` and rounded."""
    rows, cols = FULL_SIZES[view.projection]
    if scale == 1:
        return rows, cols
    return int(round(rows / scale)), int(round(cols / scale))


def standardize_size(image: np.ndarray, view: View, scale: int = 1) -> np.ndarray:
    """Center-crop or zero-pad `image` to the standard size of its view."""
    return crop_or_pad(image, target_size(view, scale))


def crop_or_pad(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    out = np.asarray(image)
    for axis, target in enumerate(size):
        n = out.shape[axis]
        if n > target:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        elif n < target:
            before = (target - n) // 2
            pad = [(0, 0), (0, 0)]
            pad[axis] = (before, target - n - before)
            out = np.pad(out, pad)
    return np.ascontiguousarray(out, dtype=np.float32)


def _sorted_exams(patient_exams: Sequence[Exam]) -> List[Exam]:
    exams = sorted(patient_exams, key=lambda e: e.date)
    for earlier, later in zip(exams, exams[1:]):
        if earlier.date == later.date:
            raise PairingError(
                f"Patient {earlier.patient_id} has two exams on {earlier.date}: {earlier.exam_id}, {later.exam_id}"
            )
    return exams


def generate_train_pairs(patient_exams: Sequence[Exam]) -> List[ExamPair]:
    """All n(n-1)/2 chronologically oriented pairs of one patient's exams."""
    exams = _sorted_exams(patient_exams)
    return [ExamPair(prior, current) for prior, current in itertools.combinations(exams, 2)]


def generate_test_pairs(patient_exams: Sequence[Exam]) -> List[ExamPair]:
    """Pairs (e_i, latest) for every earlier exam e_i."""
    exams = _sorted_exams(patient_exams)
    if len(exams) < 2:
        return []
    latest = exams[-1]
    return [ExamPair(prior, latest) for prior in exams[:-1]]


def split_pairs(cohort: Cohort, split: Split) -> List[ExamPair]:
    """Train/val splits use every combination; the test split only latest-exam pairs."""
    make = generate_test_pairs if split is Split.TEST else generate_train_pairs
    pairs: List[ExamPair] = []
    for patient_id in cohort.patients_in(split):
        pairs.extend(make(cohort.exams[patient_id]))
    return pairs


def assign_split(patient_id: str, fractions: Optional[SplitConfig] = None, seed: int = 0) -> Split:
    """Deterministic split from an md5 bucket of (seed, patient id)."""
    fractions = fractions or SplitConfig()
    key = f"{seed}:{patient_id}".encode("utf-8")
    bucket = int(hashlib.md5(key).hexdigest(), 16) % 10_000 / 10_000
    if bucket < fractions.train:
        return Split.TRAIN
    if bucket < fractions.train + fractions.val:
        return Split.VAL
    return Split.TEST


def slice_population(
    pairs: Sequence[ExamPair],
    which: PopulationName,
    level: PopulationLevel = "exam",
) -> List[ExamPair]:
    """Screening keeps every pair; biopsied keeps pairs whose current exam
    (or, at patient level, any exam of the patient in `pairs`) was biopsied."""
    if which == "screening":
        return list(pairs)
    if which != "biopsied":
        raise ValueError(f"Unknown population: {which!r}")
    if level == "exam":
        return [p for p in pairs if p.current.biopsied]
    biopsied_patients = {
        p.patient_id for p in pairs if p.current.biopsied or p.prior.biopsied
    }
    return [p for p in pairs if p.patient_id in biopsied_patients]


def epoch_indices(n_biopsied: int, n_rest: int, b: Optional[int], seed: int) -> np.ndarray:
    """Dry-run sampler: indices into biopsied (0..n_biopsied-1) followed by rest
    (n_biopsied..), all biopsied plus B rest drawn without replacement, shuffled."""
    b = n_biopsied if b is None else b
    if b != n_biopsied:
        raise SamplingError(f"B={b} must equal the biopsied slice size {n_biopsied}")
    if n_rest < b:
        raise SamplingError(f"Only {n_rest} non-biopsied pairs available for B={b}")
    rng = np.random.default_rng(seed)
    rest = rng.choice(n_rest, size=b, replace=False) + n_biopsied
    order = np.concatenate([np.arange(n_biopsied), rest])
    return order[rng.permutation(order.size)]


def epoch_sample(
    pairs: Sequence[ExamPair],
    b: Optional[int],
    rng_seed: int,
    level: PopulationLevel = "exam",
) -> List[ExamPair]:
    """One balanced epoch: every biopsied pair plus B uniformly drawn others."""
    biopsied = slice_population(pairs, "biopsied", level)
    chosen = {id(p) for p in biopsied}
    rest = [p for p in pairs if id(p) not in chosen]
    pool = biopsied + rest
    return [pool[i] for i in epoch_indices(len(biopsied), len(rest), b, rng_seed)]


class CohortService:
    """Pair construction over a whole cohort."""

    def pairs(self, cohort: Cohort, split: Split) -> List[ExamPair]:
        pairs = split_pairs(cohort, split)
        logger.info(f"{split.value}: {len(pairs)} exam pairs from {len(cohort.patients_in(split))} patients")
        return pairs

    def all_pairs(self, cohort: Cohort) -> List[ExamPair]:
        return [p for split in Split for p in split_pairs(cohort, split)]

    def population_sizes(self, pairs: Sequence[ExamPair], level: PopulationLevel = "exam") -> Dict[str, int]:
        return {
            "screening": len(pairs),
            "biopsied": len(slice_population(pairs, "biopsied", level)),
        }

    def check_epoch_balance(
        self, pairs: Sequence[ExamPair], b: Optional[int] = None, level: PopulationLevel = "exam"
    ) -> Dict[str, int]:
        """Fail before training when the pairs cannot fill a balanced epoch."""
        sizes = self.population_sizes(pairs, level)
        b = sizes["biopsied"] if b is None else b
        rest = sizes["screening"] - sizes["biopsied"]
        if rest < b:
            raise UsageError(
                f"Training pairs hold {sizes['biopsied']} biopsied but only {rest} non-biopsied pairs; "
                f"a balanced epoch needs B={b} of them (lower the lesion fractions or add patients)"
            )
        logger.info(f"Epoch balance: {sizes['biopsied']} biopsied + {b} of {rest} other pairs")
        return sizes


# Singleton instance
cohort_service = CohortService()
