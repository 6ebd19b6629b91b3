"""
Checkpoint model - named parameter arrays plus the configuration that made them.
"""
import math
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Snapshot of a model after one training epoch."""
    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    epoch: int
    metric: float = math.nan
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.config["model"]["variant"]

    def same_bits(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every parameter plus identical metadata."""
        if self.config != other.config or self.epoch != other.epoch:
            return False
        if not (self.metric == other.metric or (math.isnan(self.metric) and math.isnan(other.metric))):
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(
            self.params[k].dtype == other.params[k].dtype
            and self.params[k].shape == other.params[k].shape
            and self.params[k].tobytes() == other.params[k].tobytes()
            for k in self.params
        )

    def __repr__(self):
        return f"<Checkpoint(variant={self.config.get('model', {}).get('variant')}, epoch={self.epoch}, metric={self.metric:.4f})>"
