"""
Prediction models - per-image and per-breast presence probabilities.
"""
from dataclasses import dataclass

from models.exam import LabelKind, Side


@dataclass(frozen=True)
class Prediction:
    """Probabilities that benign / malignant findings are present."""
    benign_present: float
    malignant_present: float

    def get(self, kind: LabelKind) -> float:
        return self.benign_present if kind is LabelKind.BENIGN else self.malignant_present


@dataclass(frozen=True)
class ScoredBreast:
    """One (pair, side, label kind) score with its ground truth."""
    pair_id: str
    side: Side
    label: LabelKind
    truth: bool
    score: float

    @property
    def key(self):
        return (self.pair_id, self.side.value, self.label.value)
