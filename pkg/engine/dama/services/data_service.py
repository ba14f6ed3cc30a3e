import base64
import json
import logging
from decimal import ROUND_HALF_UP, Decimal
from itertools import combinations
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from dama.core.exceptions import DataError
from dama.models.corpus import SyntheticLanguage, Utterance
from dama.numcore import Rng
from dama.numcore.rng import hash_index
from dama.schemas.data import CorpusManifest, DataConfig, LanguageInfo
from dama.schemas.model import LANG_TOKEN_OFFSET, SOT_TOKEN

logger = logging.getLogger(__name__)

MIN_TV_DISTANCE = 0.1
MAX_REJECTION_ROUNDS = 100
FLOOR_MASS = 0.05
EMISSION_STREAM = 0x5EED
SPLIT_BUCKETS = 10


class DataService:
    """Synthetic languages, corpus sampling, budget subsets and NDJSON files."""

    @staticmethod
    def _transition(rng: Rng, vocab: int, first_content: int, successors: int) -> np.ndarray:
        """Sparse random successors per row plus a uniform floor over content tokens."""
        n_content = vocab - first_content
        k = min(successors, n_content)
        matrix = np.zeros((vocab, vocab))
        matrix[:, first_content:] = FLOOR_MASS / n_content
        rows = np.repeat(np.arange(vocab), k)
        cols = rng.integers(first_content, vocab, vocab * k)
        weights = (rng.uniform(vocab * k) + 0.1).reshape(vocab, k)
        weights = (1.0 - FLOOR_MASS) * weights / weights.sum(axis=1, keepdims=True)
        np.add.at(matrix, (rows, cols), weights.reshape(-1))
        return matrix

    @staticmethod
    def make_languages(
        n: int,
        vocab: int,
        d_feat: int,
        seed: int,
        noise_sigma: float = 0.1,
        accent_scale: float = 1.0,
        successors: int = 8,
        first_content_token: Optional[int] = None,
        start_lang: int = 0,
    ) -> List[SyntheticLanguage]:
        """
        ``n`` languages with pairwise transition TV distance >= 0.1.

        All languages share one base emission table (keyed by ``seed`` only, so
        seen and unseen groups sound alike); each adds its own accent shift.
        """
        if n < 2:
            raise DataError(f"make_languages needs n >= 2, got {n}")
        first_content = (
            first_content_token if first_content_token is not None else LANG_TOKEN_OFFSET + n
        )
        if first_content >= vocab:
            raise DataError(f"vocab {vocab} leaves no content tokens after id {first_content}")

        root = Rng(seed)
        base_emission = root.spawn(EMISSION_STREAM).normal((vocab, d_feat))
        transitions: List[np.ndarray] = []
        shifts: List[np.ndarray] = []
        streams = [root.spawn(start_lang + i) for i in range(n)]
        for rng in streams:
            transitions.append(DataService._transition(rng, vocab, first_content, successors))
            direction = rng.normal(d_feat)
            shifts.append(accent_scale * direction / np.linalg.norm(direction))

        languages = [
            SyntheticLanguage(
                lang=start_lang + i,
                transition=transitions[i],
                emission=base_emission + shifts[i],
                noise_sigma=noise_sigma,
                first_content_token=first_content,
            )
            for i in range(n)
        ]

        for round_index in range(MAX_REJECTION_ROUNDS):
            close = DataService._close_pairs(languages)
            if not close:
                return languages
            for _, j, _ in close:
                languages[j].transition = DataService._transition(
                    streams[j], vocab, first_content, successors
                )
        close = DataService._close_pairs(languages)
        if close:
            worst = min(close, key=lambda c: c[2])
            raise DataError(
                f"languages {worst[0]} and {worst[1]} remain within TV distance {worst[2]:.4f} "
                f"(< {MIN_TV_DISTANCE}) after {MAX_REJECTION_ROUNDS} rejection rounds"
            )
        return languages

    @staticmethod
    def _close_pairs(languages: Sequence[SyntheticLanguage]) -> List[Tuple[int, int, float]]:
        close = []
        for i, j in combinations(range(len(languages)), 2):
            distance = languages[i].distance(languages[j])
            if distance < MIN_TV_DISTANCE:
                close.append((i, j, distance))
        return close

    @staticmethod
    def split_for(index: int, seed: int) -> str:
        bucket = hash_index(index, seed) % SPLIT_BUCKETS
        if bucket < 8:
            return "train"
        return "valid" if bucket == 8 else "test"

    @staticmethod
    def generate_corpus(
        language: SyntheticLanguage,
        n_utts: int,
        len_range: Tuple[int, int],
        seed: int,
        max_len: Optional[int] = None,
    ) -> List[Utterance]:
        """Token chains from the bigram model heard through emission + Gaussian noise."""
        low, high = len_range
        if low < 2 or low > high or (max_len is not None and high > max_len):
            raise DataError(f"length range {len_range} must lie within [2, {max_len}]")

        rng = Rng(seed).spawn(language.lang)
        cdf = np.cumsum(language.transition, axis=1)
        totals = cdf[:, -1]
        lengths = rng.integers(low, high + 1, n_utts)
        utterances = []
        for index in range(n_utts):
            length = int(lengths[index])
            draws = rng.uniform(length)
            tokens = np.empty(length, dtype=np.int64)
            previous = SOT_TOKEN
            for t in range(length):
                u = draws[t] * totals[previous]
                previous = min(int(np.searchsorted(cdf[previous], u, side="right")), language.vocab_size - 1)
                tokens[t] = previous
            features = language.emission[tokens]
            if language.noise_sigma > 0:
                features = features + rng.normal(features.shape, std=language.noise_sigma)
            utterances.append(
                Utterance(
                    lang=language.lang,
                    features=features,
                    tokens=tokens,
                    split=DataService.split_for(index, seed),
                    index=index,
                )
            )
        return utterances

    @staticmethod
    def low_resource_subset(corpus: Sequence[Utterance], budget_fraction: float, seed: int) -> List[Utterance]:
        """Keep round(fraction * |train|) train utterances; valid and test pass through."""
        if not 0 < budget_fraction <= 1:
            raise DataError(f"budget fraction must be in (0, 1], got {budget_fraction}")
        train_positions = [i for i, u in enumerate(corpus) if u.split == "train"]
        keep = int(
            (Decimal(str(budget_fraction)) * len(train_positions)).quantize(
                Decimal(1), rounding=ROUND_HALF_UP
            )
        )
        if keep == 0:
            raise DataError(
                f"budget fraction {budget_fraction} of {len(train_positions)} train utterances is empty"
            )
        order = Rng(seed).permutation(len(train_positions))
        chosen = {train_positions[int(i)] for i in order[:keep]}
        return [u for i, u in enumerate(corpus) if u.split != "train" or i in chosen]

    @staticmethod
    def build(config: DataConfig) -> Tuple[List[SyntheticLanguage], List[Utterance], List[Utterance]]:
        """Languages plus the seen and unseen corpora for a data config."""
        languages = DataService.make_languages(
            config.n_languages,
            config.vocab_size,
            config.d_feat,
            config.seed,
            noise_sigma=config.noise_sigma,
            accent_scale=config.accent_scale,
            successors=config.successors_per_token,
        )
        corpora = [
            DataService.generate_corpus(
                language, config.utterances_per_language, (config.min_len, config.max_len), config.seed
            )
            for language in languages
        ]
        seen = [u for corpus in corpora[: config.n_seen] for u in corpus]
        unseen = [u for corpus in corpora[config.n_seen:] for u in corpus]
        logger.info(
            f"Generated {len(seen)} seen and {len(unseen)} unseen utterances "
            f"over {len(languages)} languages"
        )
        return languages, seen, unseen

    @staticmethod
    def manifest(config: DataConfig, seen: Sequence[Utterance], unseen: Sequence[Utterance]) -> CorpusManifest:
        languages = [
            LanguageInfo(lang=lang, group="seen" if lang < config.n_seen else "unseen",
                         noise_sigma=config.noise_sigma)
            for lang in range(config.n_languages)
        ]
        splits = {}
        for group, corpus in (("seen", seen), ("unseen", unseen)):
            splits[group] = {
                split: sum(1 for u in corpus if u.split == split) for split in ("train", "valid", "test")
            }
        return CorpusManifest(config=config, languages=languages, splits=splits)

    # Serialization

    @staticmethod
    def encode_utterance(utt: Utterance) -> str:
        payload = np.ascontiguousarray(utt.features, dtype="<f4").tobytes()
        record = {
            "lang": utt.lang,
            "split": utt.split,
            "index": utt.index,
            "tokens": utt.tokens.tolist(),
            "features": base64.b64encode(payload).decode("ascii"),
            "shape": list(utt.features.shape),
        }
        return json.dumps(record, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def decode_utterance(line: str, where: str = "record") -> Utterance:
        try:
            record = json.loads(line)
            shape = tuple(record["shape"])
            raw = base64.b64decode(record["features"], validate=True)
            features = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            return Utterance(
                lang=int(record["lang"]),
                features=features,
                tokens=np.asarray(record["tokens"], dtype=np.int64),
                split=record["split"],
                index=int(record.get("index", 0)),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{where}: malformed corpus record ({exc})") from exc

    @staticmethod
    def save_corpus(path: Path, utterances: Iterable[Utterance]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for utt in utterances:
                handle.write(DataService.encode_utterance(utt))
                handle.write("\n")
        return path

    @staticmethod
    def load_corpus(path: Path) -> List[Utterance]:
        path = Path(path)
        if not path.exists():
            raise DataError(f"corpus file {path} does not exist")
        utterances = []
        with path.open("r", encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                if line.strip():
                    utterances.append(DataService.decode_utterance(line, f"{path.name}:{number}"))
        return utterances
