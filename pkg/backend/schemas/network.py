"""
Network Pydantic schemas: backbone and pair model configuration.
"""
from enum import Enum
from math import prod
from typing import Tuple

from pydantic import BaseModel, Field, model_validator


class Variant(str, Enum):
    GLOBAL_COMPARE = "GlobalCompare"
    ALIGN_LOCAL_COMPARE = "AlignLocalCompare"
    SINGLE_BASELINE = "SingleBaseline"

    @property
    def needs_alignment(self) -> bool:
        return self is Variant.ALIGN_LOCAL_COMPARE


class BackboneConfig(BaseModel):
    """Residual backbone plan: a stem conv followed by strided stages."""
    stem_channels: int = Field(default=8, ge=1)
    stage_channels: Tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: Tuple[int, ...] = (1, 1, 1, 1)
    strides: Tuple[int, ...] = (2, 2, 2, 2)
    zero_init_residual: bool = False

    @model_validator(mode="after")
    def check_plan(self) -> "BackboneConfig":
        n = len(self.stage_channels)
        if n == 0 or len(self.blocks_per_stage) != n or len(self.strides) != n:
            raise ValueError("stage_channels, blocks_per_stage and strides must have equal non-zero length")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1 or min(self.strides) < 1:
            raise ValueError("channels, blocks and strides must be positive")
        return self

    @property
    def feature_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def total_stride(self) -> int:
        return prod(self.strides)


class PairModelConfig(BaseModel):
    """Pair model architecture; the variant is fixed for a model's lifetime."""
    variant: Variant = Variant.ALIGN_LOCAL_COMPARE
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    hidden_dim: int = Field(default=32, ge=1)
    freeze_backbone: bool = True
