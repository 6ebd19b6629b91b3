"""
Cohort Pydantic schemas: synthetic cohort generation and split assignment.
"""
from typing import Literal, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class LesionParams(BaseModel):
    """Lesion appearance at desk scale (pixels are at the configured image scale).

    Radius and intensity ranges describe a lesion at its latest exam; a
    malignant lesion is smaller and fainter in every earlier exam.
    """
    radius_px: Tuple[float, float] = (3.5, 7.0)
    intensity: Tuple[float, float] = (0.25, 0.45)
    radius_growth: Tuple[float, float] = (1.3, 1.6)
    intensity_growth: float = Field(default=1.2, ge=1.0)
    min_radius_px: float = Field(default=1.0, gt=0)

    @field_validator("radius_px", "intensity", "radius_growth")
    @classmethod
    def check_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0 < low <= high:
            raise ValueError(f"range must satisfy 0 < low <= high, got {value}")
        return value

    @field_validator("radius_growth")
    @classmethod
    def check_growth(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if value[0] <= 1.0:
            raise ValueError("malignant lesions must grow: radius_growth must exceed 1")
        return value


class JitterParams(BaseModel):
    """Random per-exam pose change of the breast."""
    rotation_deg: float = Field(default=8.0, ge=0)
    scale: float = Field(default=0.05, ge=0, lt=0.5)
    translation_frac: float = Field(default=0.04, ge=0, lt=0.5)


class SplitConfig(BaseModel):
    """Fractions of patients per split, assigned by patient-id hash."""
    train: float = Field(default=0.70, ge=0)
    val: float = Field(default=0.15, ge=0)
    test: float = Field(default=0.15, ge=0)

    @model_validator(mode="after")
    def check_total(self) -> "SplitConfig":
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        return self


class SynthConfig(BaseModel):
    """Synthetic phantom cohort configuration."""
    n_patients: int = Field(default=100, ge=0)
    exams_per_patient: int = Field(default=3, ge=1)
    image_scale: int = Field(default=20, ge=1, description="divisor applied to full-size dimensions")
    lesion_params: LesionParams = Field(default_factory=LesionParams)
    jitter: JitterParams = Field(default_factory=JitterParams)
    malignant_fraction: float = Field(default=0.06, ge=0, le=1)
    benign_fraction: float = Field(default=0.16, ge=0, le=1)
    biopsy_rule: Literal["any_lesion", "malignant_only"] = "any_lesion"
    splits: SplitConfig = Field(default_factory=SplitConfig)

    @model_validator(mode="after")
    def check_fractions(self) -> "SynthConfig":
        if self.malignant_fraction + self.benign_fraction > 1.0:
            raise ValueError("malignant_fraction + benign_fraction must not exceed 1")
        return self
