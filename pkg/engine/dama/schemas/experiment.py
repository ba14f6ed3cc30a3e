import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from dama.schemas.data import DataConfig
from dama.schemas.model import ToyTransformerConfig
from dama.schemas.probe import ProbeConfig
from dama.schemas.schedule import AdaptationConfig
from dama.schemas.training import PretrainConfig, TrainingConfig

NESTED_DELIMITER = "__"


class ExperimentConfig(BaseSettings):
    """
    Everything one run depends on.

    Sources are init kwargs (command-line overrides) and a single key-value
    file; the process environment is deliberately not consulted.
    """

    model_config = SettingsConfigDict(
        env_nested_delimiter=NESTED_DELIMITER,
        case_sensitive=False,
        extra="forbid",
    )

    seed: int = 0
    output_dir: str = "runs/default"
    budget_fraction: float = Field(1.0, gt=0.0, le=1.0)
    max_new_tokens: int = Field(80, ge=1)

    model: ToyTransformerConfig = Field(default_factory=ToyTransformerConfig)
    adaptation: AdaptationConfig = Field(default_factory=AdaptationConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)

    @classmethod
    def settings_customise_sources(
        cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings
    ):
        return (init_settings, dotenv_settings)

    @model_validator(mode="after")
    def propagate_seed(self):
        # Sections without an explicit seed follow the run seed
        for section in (self.model, self.data, self.training, self.pretrain, self.probe):
            if "seed" not in section.model_fields_set:
                section.seed = self.seed
        return self

    @model_validator(mode="after")
    def align_geometry(self):
        if "l_total" not in self.adaptation.schedule.model_fields_set:
            schedule = self.adaptation.schedule.model_copy(
                update={"l_total": self.model.decoder_layers}
            )
            self.adaptation.schedule = type(schedule).model_validate(schedule.model_dump())
        return self

    @model_validator(mode="after")
    def check_compatibility(self):
        if self.data.vocab_size != self.model.vocab_size:
            raise ValueError(
                f"data.vocab_size ({self.data.vocab_size}) != model.vocab_size ({self.model.vocab_size})"
            )
        if self.data.d_feat != self.model.d_feat:
            raise ValueError(f"data.d_feat ({self.data.d_feat}) != model.d_feat ({self.model.d_feat})")
        if self.data.n_languages > self.model.n_languages:
            raise ValueError(
                f"{self.data.n_languages} languages need more than the model's "
                f"{self.model.n_languages} language tokens"
            )
        if self.data.max_len + 2 > self.model.max_len:
            raise ValueError("model.max_len must cover the longest utterance plus two prefix tokens")
        return self

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None):
        """Read a key-value file and apply ``SECTION__FIELD=value`` overrides on top."""
        nested = unflatten(overrides or {})
        if path is not None:
            return cls(_env_file=str(path), **nested)
        return cls(_env_file=None, **nested)

    def to_env(self) -> str:
        """Resolved config in the same key-value format it is loaded from."""
        lines = [
            f"{key}={value}"
            for key, value in flatten(self.model_dump(mode="json"))
        ]
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "resolved_config.env"
        path.write_text(self.to_env())
        return path


def flatten(data: Dict[str, Any], prefix: str = "") -> Iterable[Tuple[str, str]]:
    for key in sorted(data):
        value = data[key]
        name = f"{prefix}{NESTED_DELIMITER}{key}" if prefix else key
        if isinstance(value, dict):
            yield from flatten(value, name)
        elif value is None:
            continue
        elif isinstance(value, (list, tuple)):
            yield name.upper(), json.dumps(value)
        elif isinstance(value, bool):
            yield name.upper(), "true" if value else "false"
        else:
            yield name.upper(), str(value)


def unflatten(overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Turn {"ADAPTATION__SCHEDULE__R_HIGH": "16"} into nested kwargs."""
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        parts = key.lower().split(NESTED_DELIMITER)
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        if isinstance(value, str) and value.startswith(("[", "{")):
            value = json.loads(value)
        cursor[parts[-1]] = value
    return nested
