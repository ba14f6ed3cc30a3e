from pydantic import BaseModel, ConfigDict, Field, model_validator

PAD_TOKEN = 0
SOT_TOKEN = 1
EOS_TOKEN = 2
LANG_TOKEN_OFFSET = 3


def lang_token(lang: int) -> int:
    """Vocabulary id of the language-id token for ``lang``."""
    return LANG_TOKEN_OFFSET + int(lang)


class ToyTransformerConfig(BaseModel):
    """Geometry of the toy encoder-decoder transformer."""

    model_config = ConfigDict(extra="forbid")

    encoder_layers: int = Field(2, gt=0)
    decoder_layers: int = Field(8, gt=0)
    d_model: int = Field(64, gt=0)
    n_heads: int = Field(4, gt=0)
    ffn_dim: int = Field(256, gt=0)
    vocab_size: int = Field(512, gt=0)
    max_len: int = Field(64, gt=0, description="Longest source or decoder sequence")
    d_feat: int = Field(64, gt=0, description="Source feature dimension")
    n_languages: int = Field(8, ge=1, description="Language-id tokens reserved in the vocab")
    seed: int = 0

    @model_validator(mode="after")
    def check_shapes(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.first_content_token >= self.vocab_size:
            raise ValueError("vocab_size leaves no room for content tokens")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def first_content_token(self) -> int:
        return LANG_TOKEN_OFFSET + self.n_languages
