from dama.models.adapter import AdapterRegistry, LoraAdapter
from dama.models.corpus import Batch, SyntheticLanguage, Utterance
from dama.models.transformer import HiddenStates, ToyTransformer

__all__ = [
    "AdapterRegistry",
    "LoraAdapter",
    "Batch",
    "SyntheticLanguage",
    "Utterance",
    "HiddenStates",
    "ToyTransformer",
]
