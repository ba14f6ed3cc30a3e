from typing import List

from pydantic import BaseModel, ConfigDict, Field, model_validator


class DataConfig(BaseModel):
    """Synthetic multilingual corpus settings."""

    model_config = ConfigDict(extra="forbid")

    n_seen: int = Field(5, ge=1, description="Languages used for base pretraining")
    n_unseen: int = Field(3, ge=1, description="Languages held out for adaptation")
    vocab_size: int = Field(512, gt=0)
    d_feat: int = Field(64, gt=0)
    utterances_per_language: int = Field(2000, gt=0)
    min_len: int = Field(8, ge=2)
    max_len: int = Field(24, ge=2)
    noise_sigma: float = Field(0.1, ge=0.0)
    accent_scale: float = Field(1.0, ge=0.0, description="Norm of each language's feature shift")
    successors_per_token: int = Field(8, gt=0, description="Bigram support size per row")
    seed: int = 0

    @model_validator(mode="after")
    def check_lengths(self):
        if self.min_len > self.max_len:
            raise ValueError(f"min_len ({self.min_len}) exceeds max_len ({self.max_len})")
        return self

    @property
    def n_languages(self) -> int:
        return self.n_seen + self.n_unseen


class LanguageInfo(BaseModel):
    lang: int
    group: str
    noise_sigma: float


class CorpusManifest(BaseModel):
    """Contents of languages.json written next to the corpus files."""

    config: DataConfig
    languages: List[LanguageInfo]
    splits: dict
