from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from dama.core.exceptions import DataError
from dama.numcore.autograd import IGNORE_INDEX
from dama.schemas.model import EOS_TOKEN, PAD_TOKEN, SOT_TOKEN, lang_token

SPLITS = ("train", "valid", "test")


@dataclass
class SyntheticLanguage:
    """A bigram token chain plus the feature emission it is heard through."""

    lang: int
    transition: np.ndarray  # V x V, row-stochastic
    emission: np.ndarray  # V x d_feat, mean feature per token
    noise_sigma: float
    first_content_token: int

    @property
    def vocab_size(self) -> int:
        return self.transition.shape[0]

    @property
    def d_feat(self) -> int:
        return self.emission.shape[1]

    def distance(self, other: "SyntheticLanguage") -> float:
        """
        Row-averaged total variation: the TV distance between each pair of
        corresponding transition rows, averaged over the rows from SOT onward
        (the PAD row never starts a transition). The generator keeps every
        language pair at or above its minimum on this measure.
        """
        rows = slice(SOT_TOKEN, None)
        diff = np.abs(self.transition[rows] - other.transition[rows]).sum(axis=1)
        return float(0.5 * diff.mean())


@dataclass
class Utterance:
    lang: int
    features: np.ndarray  # T x d_feat
    tokens: np.ndarray  # T target tokens
    split: str
    index: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.split not in SPLITS:
            raise DataError(f"unknown split '{self.split}'")
        if self.features.ndim != 2 or self.features.shape[0] != self.tokens.shape[0]:
            raise DataError(
                f"utterance {self.lang}/{self.index}: features {self.features.shape} "
                f"do not match {self.tokens.shape[0]} tokens"
            )

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class Batch:
    """
    Padded teacher-forcing batch.

    Decoder inputs are ``[SOT, LANG, y1..yn]`` and targets ``[IGNORE, y1..yn, EOS]``;
    both are padded to the longest example (PAD / IGNORE respectively).
    """

    features: np.ndarray  # B x S x d_feat
    source_lengths: np.ndarray
    inputs: np.ndarray  # B x T
    targets: np.ndarray  # B x T
    langs: np.ndarray
    token_lengths: np.ndarray  # content tokens per example
    references: List[List[int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @classmethod
    def from_utterances(cls, utterances: Sequence[Utterance]) -> "Batch":
        if not utterances:
            raise DataError("cannot build a batch from zero utterances")
        n = len(utterances)
        d_feat = utterances[0].features.shape[1]
        source_len = max(len(u) for u in utterances)
        decoder_len = source_len + 2

        features = np.zeros((n, source_len, d_feat))
        inputs = np.full((n, decoder_len), PAD_TOKEN, dtype=np.int64)
        targets = np.full((n, decoder_len), IGNORE_INDEX, dtype=np.int64)
        for i, utt in enumerate(utterances):
            t = len(utt)
            if utt.features.shape[1] != d_feat:
                raise DataError(f"mixed feature dimensions in batch: {utt.features.shape[1]} vs {d_feat}")
            features[i, :t] = utt.features
            inputs[i, 0] = SOT_TOKEN
            inputs[i, 1] = lang_token(utt.lang)
            inputs[i, 2:t + 2] = utt.tokens
            targets[i, 1:t + 1] = utt.tokens
            targets[i, t + 1] = EOS_TOKEN

        return cls(
            features=features,
            source_lengths=np.array([len(u) for u in utterances], dtype=np.int64),
            inputs=inputs,
            targets=targets,
            langs=np.array([u.lang for u in utterances], dtype=np.int64),
            token_lengths=np.array([len(u) for u in utterances], dtype=np.int64),
            references=[u.tokens.tolist() for u in utterances],
        )


def batches(utterances: Sequence[Utterance], batch_size: int, order=None) -> List[Batch]:
    """Consecutive batches over ``utterances`` (optionally reordered by ``order``)."""
    if order is not None:
        utterances = [utterances[int(i)] for i in order]
    return [
        Batch.from_utterances(utterances[start:start + batch_size])
        for start in range(0, len(utterances), batch_size)
    ]


def split_of(utterances: Sequence[Utterance], split: str) -> List[Utterance]:
    return [u for u in utterances if u.split == split]
