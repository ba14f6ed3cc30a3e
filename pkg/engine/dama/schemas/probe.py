import io
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ProbeConfig(BaseModel):
    """Linear probe hyperparameters (AdamW, cross-entropy, mean pooling)."""

    model_config = ConfigDict(extra="forbid")

    layer: int = Field(1, ge=1)
    pooling: str = Field("mean", pattern="^mean$")
    learning_rate: float = Field(1e-3, gt=0.0)
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(256, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    num_languages: Optional[int] = Field(None, ge=2, description="Expected language count, checked when set")
    valid_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def check_split(self):
        if self.valid_fraction + self.test_fraction >= 1.0:
            raise ValueError("valid_fraction + test_fraction must leave a training share")
        return self


class LayerProbeResult(BaseModel):
    layer: int
    accuracy: float = Field(..., ge=0.0, le=1.0)
    n_eval: int
    best_epoch: int
    confusion: List[List[int]]
    languages: List[int]


class ProbeResult(BaseModel):
    """Per-layer language-identification accuracy profile."""

    layers: List[LayerProbeResult]

    @property
    def accuracies(self) -> List[float]:
        return [r.accuracy for r in self.layers]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        buffer.write("layer,accuracy,n_eval\n")
        for r in self.layers:
            buffer.write(f"{r.layer},{r.accuracy:.6f},{r.n_eval}\n")
        return buffer.getvalue()

    def per_language_counts(self) -> Dict[int, int]:
        if not self.layers:
            return {}
        first = self.layers[0]
        return {lang: sum(row) for lang, row in zip(first.languages, first.confusion)}
