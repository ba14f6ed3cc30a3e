from decimal import Decimal
from typing import Any, List, Optional
import enum
import math

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Segment(str, enum.Enum):
    """Depth segment of a decoder layer."""
    EARLY = "early"
    MID = "mid"
    LATE = "late"


class Rounding(str, enum.Enum):
    """Rounding policy applied to the rank ramp."""
    NEAREST = "nearest"
    FLOOR = "floor"
    CEIL = "ceil"


class AdaptationMode(str, enum.Enum):
    """How the pretrained model is adapted."""
    FFT = "fft"
    LORA_UNIFORM = "lora_uniform"
    DAMA = "dama"


class ScheduleShape(str, enum.Enum):
    USHAPE = "ushape"
    UNIFORM = "uniform"


class InitMode(str, enum.Enum):
    SVD = "svd"
    RANDOM = "random"


def _floor_fraction(theta: float, l_total: int) -> int:
    # Decimal keeps e.g. 0.3 * 10 == 3 exactly
    return int(math.floor(Decimal(str(theta)) * l_total))


class RankSchedule(BaseModel):
    """U-shaped per-layer rank function with its segment bounds."""

    model_config = ConfigDict(extra="forbid")

    l_total: int = Field(8, gt=0, description="Decoder layer count")
    theta1: float = Field(0.3, gt=0.0, lt=1.0)
    theta2: float = Field(0.7, gt=0.0, lt=1.0)
    r_high: int = Field(32, gt=0)
    r_low: int = Field(8, gt=0)
    rounding: Rounding = Rounding.NEAREST

    @model_validator(mode="after")
    def check_bounds(self):
        if not self.theta1 < self.theta2:
            raise ValueError(f"theta1 ({self.theta1}) must be below theta2 ({self.theta2})")
        if self.r_low > self.r_high:
            raise ValueError(f"r_low ({self.r_low}) must not exceed r_high ({self.r_high})")
        if not 1 <= self.l_early < self.l_late <= self.l_total:
            raise ValueError(
                f"segment bounds l_early={self.l_early}, l_late={self.l_late} "
                f"are invalid for l_total={self.l_total}"
            )
        return self

    @property
    def l_early(self) -> int:
        return _floor_fraction(self.theta1, self.l_total)

    @property
    def l_late(self) -> int:
        return _floor_fraction(self.theta2, self.l_total)

    @classmethod
    def reference(cls, l_total: int = 32) -> "RankSchedule":
        """r_high=32, r_low=8, theta=(0.3, 0.7), round to nearest."""
        return cls(l_total=l_total, theta1=0.3, theta2=0.7, r_high=32, r_low=8)


class SiteSpec(BaseModel):
    """One adapted linear projection: W0 is d_out x d_in."""

    model_config = ConfigDict(extra="forbid")

    name: str
    d_in: int = Field(..., gt=0)
    d_out: int = Field(..., gt=0)


WHISPER_SITE_NAMES = [
    "self_q", "self_k", "self_v", "self_o",
    "cross_q", "cross_k", "cross_v", "cross_o",
]


class ModelGeometry(BaseModel):
    """Adapted sites per decoder layer; the site list is shared by every layer."""

    model_config = ConfigDict(extra="forbid")

    name: str = "custom"
    layers: int = Field(..., gt=0)
    sites: List[SiteSpec] = Field(..., min_length=1)
    base_param_count: Optional[int] = Field(
        None, ge=0, description="Full base-model size, when known; fft reports it"
    )

    @classmethod
    def decoder(cls, name: str, layers: int, d_model: int, ffn_dim: int,
                base_param_count: Optional[int] = None) -> "ModelGeometry":
        """Self/cross attention Q,K,V,O plus FFN in/out per decoder layer."""
        sites = [SiteSpec(name=n, d_in=d_model, d_out=d_model) for n in WHISPER_SITE_NAMES]
        sites.append(SiteSpec(name="ffn_in", d_in=d_model, d_out=ffn_dim))
        sites.append(SiteSpec(name="ffn_out", d_in=ffn_dim, d_out=d_model))
        return cls(name=name, layers=layers, sites=sites, base_param_count=base_param_count)

    @classmethod
    def whisper_large_v2(cls) -> "ModelGeometry":
        """Whisper-large-v2 decoder: 32 layers, d_model 1280, FFN 5120."""
        return cls.decoder("whisper-large-v2", layers=32, d_model=1280, ffn_dim=5120)

    @property
    def site_weight_count(self) -> int:
        return self.layers * sum(s.d_in * s.d_out for s in self.sites)


class AdaptationConfig(BaseModel):
    """Adaptation mode plus the ablation flags (schedule shape, init, BPP)."""

    model_config = ConfigDict(extra="forbid")

    mode: AdaptationMode = AdaptationMode.DAMA
    uniform_rank: int = Field(64, gt=0)
    schedule: RankSchedule = Field(default_factory=RankSchedule)
    schedule_shape: ScheduleShape = ScheduleShape.USHAPE
    init_mode: InitMode = InitMode.SVD
    bpp: bool = True
    alpha: float = Field(32.0, gt=0.0, description="Uniform LoRA defaults to alpha = uniform_rank")

    @model_validator(mode="before")
    @classmethod
    def lora_alpha_follows_rank(cls, data: Any) -> Any:
        if not isinstance(data, dict) or "alpha" in data:
            return data
        if data.get("mode") == AdaptationMode.LORA_UNIFORM.value:
            data = {**data, "alpha": data.get("uniform_rank", cls.model_fields["uniform_rank"].default)}
        return data

    @property
    def label(self) -> str:
        if self.mode != AdaptationMode.DAMA:
            return self.mode.value
        return (
            f"dama[{self.schedule_shape.value},{self.init_mode.value},"
            f"bpp={'on' if self.bpp else 'off'}]"
        )

    @classmethod
    def fft(cls) -> "AdaptationConfig":
        return cls(mode=AdaptationMode.FFT)

    @classmethod
    def lora(cls, rank: int = 64, alpha: float = 64.0, l_total: int = 8) -> "AdaptationConfig":
        """Uniform LoRA baseline (rank 64, alpha 64 by default)."""
        return cls(
            mode=AdaptationMode.LORA_UNIFORM,
            uniform_rank=rank,
            alpha=alpha,
            schedule=RankSchedule(l_total=l_total),
        )

    @classmethod
    def dama(cls, l_total: int = 8, **overrides) -> "AdaptationConfig":
        """DAMA with r_high=32, r_low=8, theta=(0.3, 0.7), alpha=32."""
        return cls(mode=AdaptationMode.DAMA, schedule=RankSchedule.reference(l_total), **overrides)


class LayerAccounting(BaseModel):
    layer: int
    segment: Optional[Segment] = None
    rank: int
    trainable_params: int


class AccountingTotals(BaseModel):
    params: int
    extra_macs_per_token: int


class AccountingReport(BaseModel):
    """Per-layer ranks, trainable parameters and adapter MACs for one config."""

    mode: str
    label: str
    geometry: str
    per_layer: List[LayerAccounting]
    totals: AccountingTotals
    notes: List[str] = Field(default_factory=list)
