"""
Alignment Pydantic schemas.
"""
from pydantic import BaseModel, Field


class NCCConfig(BaseModel):
    """Multi-start coordinate descent on NCC.

    One iteration tries one parameter in both directions; steps halve after
    a full sweep without improvement.
    """
    starts: int = Field(default=4, ge=1)
    iters: int = Field(default=200, ge=0)
    step_linear: float = Field(default=0.02, gt=0)
    step_translation: float = Field(default=1.0, gt=0)
    min_step_fraction: float = Field(default=1 / 32, gt=0, le=1)
    perturbation: float = Field(default=0.03, ge=0, description="scale of the extra start jitter")


class AlignConfig(BaseModel):
    """Alignment of prior images to current images."""
    eps: float = Field(default=1e-6, ge=0)
    ncc: NCCConfig = Field(default_factory=NCCConfig)
    downsample: int = Field(default=1, ge=1, description="estimate on every n-th pixel")
