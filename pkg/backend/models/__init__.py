"""Models package for longview."""
from models.checkpoint import Checkpoint
from models.exam import (
    VIEWS,
    BreastLabels,
    Cohort,
    Exam,
    ExamPair,
    LabelKind,
    Projection,
    Side,
    Split,
    View,
)
from models.prediction import Prediction, ScoredBreast
from models.transform import AffineTransform, AlignmentResult, BinaryMask

__all__ = [
    "VIEWS",
    "AffineTransform",
    "AlignmentResult",
    "BinaryMask",
    "BreastLabels",
    "Checkpoint",
    "Cohort",
    "Exam",
    "ExamPair",
    "LabelKind",
    "Prediction",
    "Projection",
    "ScoredBreast",
    "Side",
    "Split",
    "View",
]
