"""
Training Pydantic schemas.
"""
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, Field

from schemas.alignment import AlignConfig, NCCConfig
from schemas.cohort import SynthConfig
from schemas.network import BackboneConfig, PairModelConfig, Variant


class TrainConfig(BaseModel):
    """One training run of one ensemble member."""
    variant: Variant = Variant.ALIGN_LOCAL_COMPARE
    epochs: int = Field(default=70, ge=1)
    biopsied_per_epoch: Optional[int] = Field(
        default=None, ge=1, description="B; defaults to the size of the biopsied training slice"
    )
    learning_rate: float = Field(default=1e-3, gt=0)
    optimizer: Literal["adam", "sgd"] = "adam"
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    seed: int = 0
    freeze_backbone: bool = True
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    hidden_dim: int = Field(default=32, ge=1)
    accumulate: int = Field(default=1, ge=1, description="pairs per optimizer step")
    selection_metric: Literal["val_biopsied_malignant_auc"] = "val_biopsied_malignant_auc"
    population_level: Literal["exam", "patient"] = "exam"
    retention: Literal["best_last", "all"] = "best_last"
    pretrain_epochs: int = Field(default=3, ge=0)
    pretrain_learning_rate: float = Field(default=1e-3, gt=0)

    def pair_model_config(self) -> PairModelConfig:
        return PairModelConfig(
            variant=self.variant,
            backbone=self.backbone,
            hidden_dim=self.hidden_dim,
            freeze_backbone=self.freeze_backbone,
        )


class ExperimentConfig(BaseModel):
    """End-to-end synthetic reproduction of the training/evaluation protocol."""
    synth: SynthConfig = Field(default_factory=lambda: SynthConfig(n_patients=800))
    align: AlignConfig = Field(
        default_factory=lambda: AlignConfig(downsample=2, ncc=NCCConfig(starts=2, iters=120))
    )
    train: TrainConfig = Field(default_factory=TrainConfig)
    members: int = Field(default=5, ge=1)
    variants: Tuple[Variant, ...] = (Variant.SINGLE_BASELINE, Variant.GLOBAL_COMPARE, Variant.ALIGN_LOCAL_COMPARE)
    seed: int = 0
