from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

ADAPTER_DEFAULT_LR = 1e-4
FFT_DEFAULT_LR = 1e-5
PRETRAIN_DEFAULT_LR = 1e-3


class TrainingConfig(BaseModel):
    """Optimizer, scheduler and loop settings."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(2, ge=0)
    batch_size: int = Field(6, gt=0)
    valid_batch_size: int = Field(16, gt=0)
    learning_rate: Optional[float] = Field(
        None, gt=0.0, description="Defaults to 1e-4 for adapter modes and 1e-5 for fft"
    )
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    max_grad_norm: float = Field(5.0, gt=0.0)
    newbob_threshold: float = Field(0.0025, ge=0.0)
    newbob_factor: float = Field(0.8, gt=0.0, le=1.0)
    max_steps: Optional[int] = Field(None, ge=0, description="Stop after this many optimizer steps")
    seed: int = 0


class EpochRecord(BaseModel):
    epoch: int
    steps: int
    train_loss: Optional[float] = None
    valid_loss: Optional[float] = None
    learning_rate: float


class TrainingReport(BaseModel):
    """Outcome of one training run; wall time is kept out of the JSON dump."""

    mode: str
    label: str
    epochs: List[EpochRecord]
    total_steps: int
    trainable_params: int
    base_params: int
    trainable_ratio: float
    initial_learning_rate: float
    learning_rate_source: str
    checkpoint_path: Optional[str] = None
    wall_time_seconds: float = Field(0.0, exclude=True)


class PretrainConfig(TrainingConfig):
    """Base-model training on the seen languages: longer, larger batches, higher rate."""

    epochs: int = Field(3, ge=0)
    batch_size: int = Field(32, gt=0)
    learning_rate: Optional[float] = Field(PRETRAIN_DEFAULT_LR, gt=0.0)
