"""
Toy encoder-decoder transformer with adapter injection sites.

Post-norm blocks throughout. Each decoder block is

    x = LN1(x + SelfAttn(x))         sites self_q/k/v/o
    x = LN2(x + CrossAttn(x, mem))   sites cross_q/k/v/o
    x = LN3(x + FFN(x))              sites ffn_in, ffn_out

and the block output after LN3 is the captured hidden state of that layer.
Weights are stored d_out x d_in; a site maps rows x -> x W^T + b, plus the
adapter branch when one is attached to that (layer, site).
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from dama.core.exceptions import AdapterError, ConfigurationError, DataError, ShapeMismatchError
from dama.models.adapter import ADAPTER_PREFIX, AdapterRegistry
from dama.models.corpus import Batch
from dama.numcore import GradientContext, Node, ParameterStore, Rng
from dama.numcore.autograd import MASK_VALUE
from dama.schemas.model import EOS_TOKEN, PAD_TOKEN, SOT_TOKEN, ToyTransformerConfig, lang_token
from dama.schemas.schedule import WHISPER_SITE_NAMES, ModelGeometry

logger = logging.getLogger(__name__)

DECODER_SITES = tuple(WHISPER_SITE_NAMES) + ("ffn_in", "ffn_out")
ENCODER_SITES = ("self_q", "self_k", "self_v", "self_o", "ffn_in", "ffn_out")
CONTENT_OFFSET = 2  # decoder positions taken by SOT and the language token

ParameterLayout = List[Tuple[str, Tuple[int, ...], str]]


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    dims = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, dims / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


def _linear(prefix: str, d_in: int, d_out: int) -> ParameterLayout:
    return [(f"{prefix}.weight", (d_out, d_in), "weight"), (f"{prefix}.bias", (d_out,), "zeros")]


def _norm(prefix: str, d: int) -> ParameterLayout:
    return [(f"{prefix}.gamma", (d,), "ones"), (f"{prefix}.beta", (d,), "zeros")]


@dataclass
class HiddenStates:
    """Decoder block outputs per layer (1-based) plus the encoder output."""

    decoder: List[np.ndarray]  # L arrays of B x T x d_model
    encoder: np.ndarray  # B x S x d_model
    source_lengths: np.ndarray
    token_lengths: np.ndarray
    langs: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.decoder)

    def layer(self, l: int) -> np.ndarray:
        if not 1 <= l <= self.num_layers:
            raise ShapeMismatchError(f"layer {l} outside 1..{self.num_layers}")
        return self.decoder[l - 1]

    def sequence(self, l: int, i: int) -> np.ndarray:
        """Layer-l states of example i at its content positions (T_i x d_model)."""
        n = int(self.token_lengths[i])
        return self.layer(l)[i, CONTENT_OFFSET:CONTENT_OFFSET + n]


class ToyTransformer:
    """Encoder-decoder transformer over a ``ParameterStore``."""

    def __init__(self, config: ToyTransformerConfig, params: Optional[ParameterStore] = None):
        self.config = config
        self.params = params if params is not None else self.initial_parameters(config)
        self.adapters: Optional[AdapterRegistry] = None
        self._positions = sinusoidal_positions(config.max_len, config.d_model)
        self._check_parameters()

    # Parameters

    @staticmethod
    def parameter_layout(config: ToyTransformerConfig) -> ParameterLayout:
        d, f = config.d_model, config.ffn_dim
        layout: ParameterLayout = _linear("enc.in_proj", config.d_feat, d)
        for i in range(1, config.encoder_layers + 1):
            prefix = f"enc.{i}"
            for site in ("self_q", "self_k", "self_v", "self_o"):
                layout += _linear(f"{prefix}.{site}", d, d)
            layout += _norm(f"{prefix}.ln1", d)
            layout += _linear(f"{prefix}.ffn_in", d, f)
            layout += _linear(f"{prefix}.ffn_out", f, d)
            layout += _norm(f"{prefix}.ln2", d)
        layout.append(("dec.embed", (config.vocab_size, d), "embed"))
        for l in range(1, config.decoder_layers + 1):
            prefix = f"dec.{l}"
            for site in ("self_q", "self_k", "self_v", "self_o"):
                layout += _linear(f"{prefix}.{site}", d, d)
            layout += _norm(f"{prefix}.ln1", d)
            for site in ("cross_q", "cross_k", "cross_v", "cross_o"):
                layout += _linear(f"{prefix}.{site}", d, d)
            layout += _norm(f"{prefix}.ln2", d)
            layout += _linear(f"{prefix}.ffn_in", d, f)
            layout += _linear(f"{prefix}.ffn_out", f, d)
            layout += _norm(f"{prefix}.ln3", d)
        layout += _linear("dec.head", d, config.vocab_size)
        return layout

    @classmethod
    def initial_parameters(cls, config: ToyTransformerConfig) -> ParameterStore:
        """Fresh parameters drawn in layout order from one seeded stream."""
        rng = Rng(config.seed)
        store = ParameterStore()
        for name, shape, kind in cls.parameter_layout(config):
            if kind == "weight":
                value = rng.normal(shape, std=1.0 / np.sqrt(shape[1]))
            elif kind == "embed":
                value = rng.normal(shape, std=1.0)
            elif kind == "ones":
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            store.register(name, value)
        return store

    @classmethod
    def base_param_count_for(cls, config: ToyTransformerConfig) -> int:
        return int(sum(np.prod(shape) for _, shape, _ in cls.parameter_layout(config)))

    def _check_parameters(self):
        for name, shape, _ in self.parameter_layout(self.config):
            if name not in self.params:
                raise ConfigurationError(f"parameter '{name}' missing for this model config")
            if self.params[name].value.shape != shape:
                raise ShapeMismatchError(
                    f"parameter '{name}' has shape {self.params[name].value.shape}, expected {shape}"
                )

    def base_parameters(self):
        return [p for p in self.params if not p.name.startswith(ADAPTER_PREFIX)]

    @property
    def base_param_count(self) -> int:
        return int(sum(p.value.size for p in self.base_parameters()))

    def set_base_trainable(self, flag: bool):
        for param in self.base_parameters():
            param.trainable = flag

    def base_weight(self, layer: int, site: str) -> np.ndarray:
        if site not in DECODER_SITES or not 1 <= layer <= self.config.decoder_layers:
            raise AdapterError(f"no decoder site {site} at layer {layer}")
        return self.params[f"dec.{layer}.{site}.weight"].value

    def geometry(self) -> ModelGeometry:
        return ModelGeometry.decoder(
            "toy",
            layers=self.config.decoder_layers,
            d_model=self.config.d_model,
            ffn_dim=self.config.ffn_dim,
            base_param_count=self.base_param_count,
        )

    def copy(self) -> "ToyTransformer":
        """Deep copy, including attached adapters and trainable flags."""
        store = ParameterStore()
        for param in self.base_parameters():
            store.register(param.name, param.value.copy(), param.trainable)
        clone = ToyTransformer(self.config, store)
        if self.adapters is not None:
            clone.attach_adapters(self.adapters.copy())
        return clone

    # Adapters

    def attach_adapters(self, registry: AdapterRegistry):
        if self.adapters is not None:
            raise AdapterError("adapters are already attached to this model")
        for adapter in registry:
            weight = self.base_weight(adapter.layer, adapter.site)
            if weight.shape != (adapter.d_out, adapter.d_in):
                raise ShapeMismatchError(
                    f"adapter {adapter.key} is {adapter.d_out}x{adapter.d_in} "
                    f"but the base weight is {weight.shape[0]}x{weight.shape[1]}"
                )
        for param in registry.parameters():
            self.params.add(param)
        self.adapters = registry
        logger.debug(f"Attached {len(registry)} adapters ({registry.label})")

    def detach_adapters(self) -> Optional[AdapterRegistry]:
        """Remove adapters from the forward pass; returns them for re-attachment."""
        registry = self.adapters
        if registry is None:
            return None
        for param in registry.parameters():
            self.params.remove(param.name)
        self.adapters = None
        return registry

    # Forward

    def _check_tokens(self, tokens: np.ndarray):
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            bad = tokens[(tokens < 0) | (tokens >= self.config.vocab_size)][0]
            raise DataError(f"token id {bad} outside vocabulary [0, {self.config.vocab_size})")
        if tokens.shape[1] > self.config.max_len:
            raise ShapeMismatchError(
                f"decoder length {tokens.shape[1]} exceeds max_len {self.config.max_len}"
            )

    def _project(self, ctx: GradientContext, x: Node, prefix: str, site: str,
                 layer: Optional[int]) -> Node:
        out = ctx.linear(x, ctx.param(f"{prefix}.{site}.weight"), ctx.param(f"{prefix}.{site}.bias"))
        if layer is not None and self.adapters is not None:
            adapter = self.adapters.get(layer, site)
            if adapter is not None:
                out = ctx.add(out, adapter.path(ctx, x))
        return out

    def _norm(self, ctx: GradientContext, x: Node, prefix: str) -> Node:
        return ctx.layer_norm(x, ctx.param(f"{prefix}.gamma"), ctx.param(f"{prefix}.beta"))

    def _split_heads(self, ctx: GradientContext, x: Node) -> Node:
        b, t, _ = x.shape
        h = self.config.n_heads
        return ctx.permute(ctx.reshape(x, (b, t, h, self.config.head_dim)), (0, 2, 1, 3))

    def _attention(self, ctx: GradientContext, x: Node, source: Node, prefix: str, kind: str,
                   mask: np.ndarray, layer: Optional[int]) -> Node:
        b, t, d = x.shape
        q = self._split_heads(ctx, self._project(ctx, x, prefix, f"{kind}_q", layer))
        k = self._split_heads(ctx, self._project(ctx, source, prefix, f"{kind}_k", layer))
        v = self._split_heads(ctx, self._project(ctx, source, prefix, f"{kind}_v", layer))
        scores = ctx.scale(ctx.matmul(q, ctx.transpose(k)), 1.0 / np.sqrt(self.config.head_dim))
        weights = ctx.softmax(scores, mask)
        context = ctx.permute(ctx.matmul(weights, v), (0, 2, 1, 3))
        return self._project(ctx, ctx.reshape(context, (b, t, d)), prefix, f"{kind}_o", layer)

    def _feed_forward(self, ctx: GradientContext, x: Node, prefix: str,
                      layer: Optional[int]) -> Node:
        hidden = ctx.gelu(self._project(ctx, x, prefix, "ffn_in", layer))
        return self._project(ctx, hidden, prefix, "ffn_out", layer)

    @staticmethod
    def padding_mask(lengths: np.ndarray, size: int) -> np.ndarray:
        """Additive key mask of shape B x 1 x 1 x size."""
        keep = np.arange(size)[None, :] < np.asarray(lengths)[:, None]
        return np.where(keep, 0.0, MASK_VALUE)[:, None, None, :]

    def encode(self, ctx: GradientContext, features: np.ndarray,
               source_lengths: np.ndarray) -> Tuple[Node, np.ndarray]:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 3 or features.shape[2] != self.config.d_feat:
            raise ShapeMismatchError(
                f"source features {features.shape} do not match d_feat {self.config.d_feat}"
            )
        s = features.shape[1]
        if s > self.config.max_len:
            raise ShapeMismatchError(f"source length {s} exceeds max_len {self.config.max_len}")
        mask = self.padding_mask(source_lengths, s)
        x = ctx.linear(
            ctx.constant(features), ctx.param("enc.in_proj.weight"), ctx.param("enc.in_proj.bias")
        )
        x = ctx.add(x, self._positions[:s])
        for i in range(1, self.config.encoder_layers + 1):
            prefix = f"enc.{i}"
            x = self._norm(ctx, ctx.add(x, self._attention(ctx, x, x, prefix, "self", mask, None)),
                           f"{prefix}.ln1")
            x = self._norm(ctx, ctx.add(x, self._feed_forward(ctx, x, prefix, None)), f"{prefix}.ln2")
        return x, mask

    def decode(self, ctx: GradientContext, memory: Node, memory_mask: np.ndarray,
               inputs: np.ndarray, capture: Optional[List[np.ndarray]] = None,
               stop_after: Optional[int] = None) -> Node:
        """Decoder logits; with ``stop_after`` returns that layer's block output instead."""
        inputs = np.asarray(inputs, dtype=np.int64)
        self._check_tokens(inputs)
        t = inputs.shape[1]
        causal = np.triu(np.full((t, t), MASK_VALUE), k=1)[None, None]
        x = ctx.add(ctx.embedding(ctx.param("dec.embed"), inputs), self._positions[:t])
        for l in range(1, self.config.decoder_layers + 1):
            prefix = f"dec.{l}"
            x = self._norm(ctx, ctx.add(x, self._attention(ctx, x, x, prefix, "self", causal, l)),
                           f"{prefix}.ln1")
            cross = self._attention(ctx, x, memory, prefix, "cross", memory_mask, l)
            x = self._norm(ctx, ctx.add(x, cross), f"{prefix}.ln2")
            x = self._norm(ctx, ctx.add(x, self._feed_forward(ctx, x, prefix, l)), f"{prefix}.ln3")
            if capture is not None:
                capture.append(x.value)
            if stop_after == l:
                return x
        return ctx.linear(x, ctx.param("dec.head.weight"), ctx.param("dec.head.bias"))

    def forward(self, ctx: GradientContext, batch: Batch,
                capture: Optional[List[np.ndarray]] = None) -> Node:
        memory, mask = self.encode(ctx, batch.features, batch.source_lengths)
        return self.decode(ctx, memory, mask, batch.inputs, capture=capture)

    def loss(self, ctx: GradientContext, batch: Batch) -> Node:
        """Mean teacher-forced token cross-entropy, padding ignored."""
        return ctx.cross_entropy(self.forward(ctx, batch), batch.targets)

    def logits(self, batch: Batch) -> np.ndarray:
        ctx = GradientContext(self.params, grad_enabled=False)
        return self.forward(ctx, batch).value

    def capture_hidden(self, batch: Batch) -> HiddenStates:
        ctx = GradientContext(self.params, grad_enabled=False)
        memory, mask = self.encode(ctx, batch.features, batch.source_lengths)
        captured: List[np.ndarray] = []
        self.decode(ctx, memory, mask, batch.inputs, capture=captured)
        return HiddenStates(
            decoder=captured,
            encoder=memory.value,
            source_lengths=batch.source_lengths.copy(),
            token_lengths=batch.token_lengths.copy(),
            langs=batch.langs.copy(),
        )

    def greedy_decode(self, batch: Batch, max_new_tokens: int) -> List[List[int]]:
        """Argmax decoding from ``[SOT, LANG]`` until EOS or the token cap, per example."""
        if max_new_tokens < 1:
            raise ConfigurationError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
        steps = min(max_new_tokens, self.config.max_len - CONTENT_OFFSET)
        ctx = GradientContext(self.params, grad_enabled=False)
        memory, mask = self.encode(ctx, batch.features, batch.source_lengths)

        n = batch.size
        tokens = np.stack(
            [np.full(n, SOT_TOKEN, dtype=np.int64),
             np.array([lang_token(lang) for lang in batch.langs], dtype=np.int64)],
            axis=1,
        )
        outputs: List[List[int]] = [[] for _ in range(n)]
        active = np.ones(n, dtype=bool)
        for _ in range(steps):
            step_logits = self.decode(ctx, memory, mask, tokens).value[:, -1]
            chosen = np.argmax(step_logits, axis=-1)
            for i in np.nonzero(active)[0]:
                if chosen[i] == EOS_TOKEN:
                    active[i] = False
                else:
                    outputs[i].append(int(chosen[i]))
            if not active.any():
                break
            fed = np.where(active, chosen, PAD_TOKEN)[:, None]
            tokens = np.concatenate([tokens, fed], axis=1)
        return outputs
