"""
Exam models - screening exams, exam pairs and cohorts.
"""
import datetime as dt
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Tuple

import numpy as np

from utils.errors import PairingError

if TYPE_CHECKING:
    from models.transform import AlignmentResult


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"


class Projection(str, Enum):
    CC = "CC"
    MLO = "MLO"


class View(str, Enum):
    """The four standard mammographic views."""

    L_CC = "L-CC"
    R_CC = "R-CC"
    L_MLO = "L-MLO"
    R_MLO = "R-MLO"

    @property
    def side(self) -> Side:
        return Side.LEFT if self.value.startswith("L") else Side.RIGHT

    @property
    def projection(self) -> Projection:
        return Projection(self.value.split("-")[1])

    @classmethod
    def of_side(cls, side: Side) -> Tuple["View", "View"]:
        return tuple(v for v in cls if v.side is side)


VIEWS: Tuple[View, ...] = (View.L_CC, View.R_CC, View.L_MLO, View.R_MLO)


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class LabelKind(str, Enum):
    BENIGN = "benign"
    MALIGNANT = "malignant"


@dataclass(frozen=True)
class BreastLabels:
    """Presence of benign / malignant findings per breast."""
    benign_left: bool = False
    malignant_left: bool = False
    benign_right: bool = False
    malignant_right: bool = False

    def get(self, side: Side, kind: LabelKind) -> bool:
        return getattr(self, f"{kind.value}_{side.value}")

    def any(self) -> bool:
        return self.benign_left or self.malignant_left or self.benign_right or self.malignant_right

    def as_flags(self) -> Tuple[bool, bool, bool, bool]:
        return (self.benign_left, self.malignant_left, self.benign_right, self.malignant_right)


@dataclass(frozen=True, eq=False)
class Exam:
    """One screening exam: an image per view plus breast-level labels."""
    patient_id: str
    exam_id: str
    date: dt.date
    images: Mapping[View, np.ndarray]
    labels: BreastLabels = field(default_factory=BreastLabels)
    biopsied: bool = False

    def image(self, view: View) -> np.ndarray:
        return self.images[view]

    def missing_views(self) -> List[View]:
        return [v for v in VIEWS if v not in self.images]

    def with_images(self, images: Mapping[View, np.ndarray]) -> "Exam":
        return Exam(self.patient_id, self.exam_id, self.date, dict(images), self.labels, self.biopsied)

    def __repr__(self):
        return f"<Exam(patient_id={self.patient_id}, exam_id={self.exam_id}, date={self.date})>"


@dataclass(frozen=True, eq=False)
class ExamPair:
    """A chronologically ordered (prior, current) pair of one patient's exams."""
    prior: Exam
    current: Exam
    alignment: Optional[Dict[View, "AlignmentResult"]] = None

    def __post_init__(self):
        if self.prior.patient_id != self.current.patient_id:
            raise PairingError(
                f"Exam pair mixes patients {self.prior.patient_id!r} and {self.current.patient_id!r}"
            )
        if not self.prior.date < self.current.date:
            raise PairingError(
                f"Prior exam {self.prior.exam_id} ({self.prior.date}) is not earlier than "
                f"current exam {self.current.exam_id} ({self.current.date})"
            )

    @property
    def pair_id(self) -> str:
        return f"{self.current.patient_id}:{self.prior.exam_id}>{self.current.exam_id}"

    @property
    def patient_id(self) -> str:
        return self.current.patient_id

    @property
    def labels(self) -> BreastLabels:
        return self.current.labels

    @property
    def biopsied(self) -> bool:
        return self.current.biopsied

    @property
    def is_aligned(self) -> bool:
        return self.alignment is not None

    def __repr__(self):
        return f"<ExamPair(pair_id={self.pair_id}, aligned={self.is_aligned})>"


@dataclass(frozen=True, eq=False)
class Cohort:
    """Exams grouped by patient (sorted by date) with a split tag per patient."""
    exams: Mapping[str, Tuple[Exam, ...]]
    splits: Mapping[str, Split]
    # Ground-truth lesion masks keyed by (exam_id, view); synthetic cohorts only.
    lesion_masks: Mapping[Tuple[str, View], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(self.exams) - set(self.splits)
        if missing:
            raise PairingError(f"Patients without a split: {sorted(missing)[:5]}")

    @property
    def patient_ids(self) -> List[str]:
        return sorted(self.exams)

    @property
    def n_exams(self) -> int:
        return sum(len(e) for e in self.exams.values())

    def patients_in(self, split: Split) -> List[str]:
        return [p for p in self.patient_ids if self.splits[p] is split]

    def all_exams(self) -> List[Exam]:
        return [e for p in self.patient_ids for e in self.exams[p]]

    def __repr__(self):
        return f"<Cohort(patients={len(self.exams)}, exams={self.n_exams})>"
