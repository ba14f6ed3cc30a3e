import logging
from dataclasses import dataclass
from decimal import Decimal
from typing import List, Optional, Sequence, Tuple

import numpy as np

from dama.core.exceptions import ProbeError
from dama.models.corpus import Utterance, batches
from dama.models.transformer import HiddenStates, ToyTransformer
from dama.numcore import GradientContext, ParameterStore, Rng
from dama.schemas.probe import LayerProbeResult, ProbeConfig, ProbeResult
from dama.services.training_service import AdamWState, TrainingService

logger = logging.getLogger(__name__)

MIN_EXAMPLES_PER_CLASS = 10
CAPTURE_BATCH_SIZE = 64


@dataclass
class LinearProbe:
    """Softmax classifier over standardized inputs: logits = ((x - mu) / sd) W^T + b."""

    weight: np.ndarray  # C x d
    bias: np.ndarray  # C
    mean: np.ndarray
    scale: np.ndarray
    classes: np.ndarray  # label value of each row
    best_epoch: int
    valid_losses: List[float]

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return z @ self.weight.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.decision_function(x), axis=1)]


class ProbeService:
    """Layer-wise linear probing for language identity on frozen hidden states."""

    @staticmethod
    def pool(states: HiddenStates, l: int) -> np.ndarray:
        """Mean over time of layer-l states, one row per utterance."""
        layer = states.layer(l)
        rows = []
        for i in range(layer.shape[0]):
            sequence = states.sequence(l, i)
            if sequence.shape[0] == 0:
                raise ProbeError(f"utterance {i} has an empty sequence at layer {l}")
            rows.append(sequence.mean(axis=0))
        return np.stack(rows)

    @staticmethod
    def _loss(ctx: GradientContext, z: np.ndarray, targets: np.ndarray):
        logits = ctx.linear(z, ctx.param("probe.weight"), ctx.param("probe.bias"))
        return ctx.cross_entropy(logits, targets)

    @staticmethod
    def train_probe(
        features: np.ndarray,
        labels: Sequence[int],
        config: ProbeConfig,
        valid: Optional[Tuple[np.ndarray, Sequence[int]]] = None,
    ) -> LinearProbe:
        """
        AdamW-trained linear classifier, kept at the epoch with the lowest
        validation loss. Starts from zero weights, so relabeling classes
        permutes the solution without changing it.
        """
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        classes, counts = np.unique(labels, return_counts=True)
        if classes.shape[0] < 2:
            raise ProbeError(f"probe needs at least two languages, got {classes.tolist()}")
        for cls, count in zip(classes, counts):
            if count < MIN_EXAMPLES_PER_CLASS:
                logger.warning(f"Probe class {cls} has only {count} training examples")

        if valid is None:
            held, rest = ProbeService.stratified_split(labels, [config.valid_fraction], Rng(config.seed))
            if held.shape[0] == 0:
                raise ProbeError(f"{labels.shape[0]} examples are too few for a validation split")
            valid = (features[held], labels[held])
            features, labels = features[rest], labels[rest]
        index = {int(cls): i for i, cls in enumerate(classes.tolist())}
        unseen = sorted({int(y) for y in np.asarray(valid[1]).tolist()} - index.keys())
        if unseen:
            raise ProbeError(f"validation languages {unseen} have no training examples")
        valid_x = np.asarray(valid[0], dtype=np.float64)
        valid_y = np.array([index[int(y)] for y in np.asarray(valid[1]).tolist()], dtype=np.int64)
        targets = np.array([index[int(y)] for y in labels.tolist()], dtype=np.int64)

        mean = features.mean(axis=0)
        scale = np.maximum(features.std(axis=0), 1e-8)
        z = (features - mean) / scale
        z_valid = (valid_x - mean) / scale

        store = ParameterStore()
        store.register("probe.weight", np.zeros((classes.shape[0], features.shape[1])))
        store.register("probe.bias", np.zeros(classes.shape[0]))
        adam = AdamWState(
            learning_rate=config.learning_rate,
            betas=tuple(config.betas),
            eps=config.eps,
            weight_decay=config.weight_decay,
        )
        rng = Rng(config.seed)
        best = (np.inf, 0, store.snapshot())
        valid_losses = []
        for epoch in range(1, config.epochs + 1):
            order = rng.spawn(epoch).permutation(z.shape[0])
            for start in range(0, z.shape[0], config.batch_size):
                rows = order[start:start + config.batch_size]
                ctx = GradientContext(store)
                grads = ctx.backward(ProbeService._loss(ctx, z[rows], targets[rows]))
                TrainingService.adamw_step(store, grads, adam)
            ctx = GradientContext(store, grad_enabled=False)
            valid_loss = float(ProbeService._loss(ctx, z_valid, valid_y).value)
            valid_losses.append(valid_loss)
            if valid_loss < best[0]:
                best = (valid_loss, epoch, store.snapshot())

        _, best_epoch, snapshot = best
        return LinearProbe(
            weight=snapshot["probe.weight"],
            bias=snapshot["probe.bias"],
            mean=mean,
            scale=scale,
            classes=classes,
            best_epoch=best_epoch,
            valid_losses=valid_losses,
        )

    @staticmethod
    def stratified_split(labels: Sequence[int], fractions: Sequence[float], rng: Rng) -> List[np.ndarray]:
        """
        Held-out index sets, one per fraction, followed by the remainder.

        Every language gives floor(fraction * its count) examples to each
        held-out set, so a language keeps at least one remaining example
        whenever the fractions sum below one. Indices keep the seeded
        permutation order, which depends only on which examples share a label.
        """
        labels = np.asarray(labels)
        order = rng.permutation(labels.shape[0])
        part = np.full(labels.shape[0], len(fractions))
        for cls in np.unique(labels):
            members = order[labels[order] == cls]
            start = 0
            for k, fraction in enumerate(fractions):
                take = int(Decimal(str(fraction)) * members.shape[0])
                part[members[start:start + take]] = k
                start += take
        ordered = part[order]
        return [order[ordered == k] for k in range(len(fractions) + 1)]

    @staticmethod
    def split_indices(labels: Sequence[int], config: ProbeConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Deterministic train / valid / test split, stratified by language."""
        n = len(labels)
        test, valid, train = ProbeService.stratified_split(
            labels, [config.test_fraction, config.valid_fraction], Rng(config.seed).spawn(n)
        )
        if test.shape[0] == 0 or valid.shape[0] == 0:
            raise ProbeError(f"{n} examples are too few for the probe split")
        return train, valid, test

    @staticmethod
    def evaluate_layer(
        layer: int, pooled: np.ndarray, labels: np.ndarray, config: ProbeConfig
    ) -> LayerProbeResult:
        train_idx, valid_idx, test_idx = ProbeService.split_indices(labels, config)
        probe = ProbeService.train_probe(
            pooled[train_idx], labels[train_idx], config,
            valid=(pooled[valid_idx], labels[valid_idx]),
        )
        predicted = probe.predict(pooled[test_idx])
        truth = labels[test_idx]
        languages = np.unique(labels)
        index = {lang: i for i, lang in enumerate(languages.tolist())}
        confusion = np.zeros((languages.shape[0], languages.shape[0]), dtype=np.int64)
        for t, p in zip(truth.tolist(), predicted.tolist()):
            confusion[index[t], index[p]] += 1
        accuracy = float(np.mean(predicted == truth))
        logger.info(f"Probe layer {layer}: accuracy {accuracy:.4f} on {truth.shape[0]} utterances")
        return LayerProbeResult(
            layer=layer,
            accuracy=accuracy,
            n_eval=int(truth.shape[0]),
            best_epoch=probe.best_epoch,
            confusion=confusion.tolist(),
            languages=languages.tolist(),
        )

    @staticmethod
    def profile_from_pooled(
        pooled_by_layer: Sequence[np.ndarray], labels: Sequence[int], config: ProbeConfig
    ) -> ProbeResult:
        """One probe per layer over already pooled vectors (layer 1 first)."""
        labels = np.asarray(labels, dtype=np.int64)
        if np.unique(labels).shape[0] < 2:
            raise ProbeError("probe profile needs at least two languages in the evaluation set")
        return ProbeResult(
            layers=[
                ProbeService.evaluate_layer(l, np.asarray(pooled), labels, config)
                for l, pooled in enumerate(pooled_by_layer, start=1)
            ]
        )

    @staticmethod
    def pooled_states(model: ToyTransformer, utterances: Sequence[Utterance]) -> List[np.ndarray]:
        """Teacher-forced decoder states, mean-pooled per utterance, for every layer."""
        per_layer: List[List[np.ndarray]] = [[] for _ in range(model.config.decoder_layers)]
        for batch in batches(utterances, CAPTURE_BATCH_SIZE):
            states = model.capture_hidden(batch)
            for l in range(1, states.num_layers + 1):
                per_layer[l - 1].append(ProbeService.pool(states, l))
        return [np.concatenate(chunks) for chunks in per_layer]

    @staticmethod
    def _labels(utterances: Sequence[Utterance], config: ProbeConfig) -> np.ndarray:
        labels = np.array([u.lang for u in utterances], dtype=np.int64)
        n_languages = np.unique(labels).shape[0]
        if n_languages < 2:
            raise ProbeError("probe profile needs at least two languages in the evaluation set")
        if config.num_languages is not None and n_languages != config.num_languages:
            raise ProbeError(
                f"evaluation set has {n_languages} languages, probe config expects {config.num_languages}"
            )
        return labels

    @staticmethod
    def probe_profile(model: ToyTransformer, utterances: Sequence[Utterance], config: ProbeConfig) -> ProbeResult:
        """Per-layer language-identification accuracy; the backbone is only read."""
        labels = ProbeService._labels(utterances, config)
        return ProbeService.profile_from_pooled(
            ProbeService.pooled_states(model, utterances), labels, config
        )

    @staticmethod
    def probe_layer(model: ToyTransformer, utterances: Sequence[Utterance], config: ProbeConfig) -> LayerProbeResult:
        """Probe only decoder layer ``config.layer``."""
        if config.layer > model.config.decoder_layers:
            raise ProbeError(
                f"layer {config.layer} does not exist in a {model.config.decoder_layers}-layer decoder"
            )
        labels = ProbeService._labels(utterances, config)
        pooled = np.concatenate([
            ProbeService.pool(model.capture_hidden(batch), config.layer)
            for batch in batches(utterances, CAPTURE_BATCH_SIZE)
        ])
        return ProbeService.evaluate_layer(config.layer, pooled, labels, config)
