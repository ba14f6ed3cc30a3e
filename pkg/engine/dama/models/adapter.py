from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from dama.core.exceptions import AdapterError, ShapeMismatchError
from dama.numcore import GradientContext, Node, Parameter, as_matrix
from dama.schemas.schedule import InitMode, Segment

ADAPTER_PREFIX = "adapters."


def adapter_param_name(layer: int, site: str, kind: str) -> str:
    return f"{ADAPTER_PREFIX}{layer}.{site}.{kind}"


class LoraAdapter:
    """
    Low-rank update ``(alpha / r) * B A`` bound to one decoder-layer site.

    A is r x k and B is d x r for a base weight W0 of shape d x k. Both are
    held as ``Parameter`` objects so that attaching the adapter to a model
    shares the arrays with the model's parameter store; optimizer updates
    through the store are therefore visible here and survive a detach.
    """

    def __init__(
        self,
        layer: int,
        site: str,
        a: np.ndarray,
        b: np.ndarray,
        alpha: float,
        a_frozen: bool = False,
        init_mode: InitMode = InitMode.RANDOM,
        segment: Optional[Segment] = None,
    ):
        self.layer = int(layer)
        self.site = site
        a = as_matrix(a, f"{self.key}.a")
        b = as_matrix(b, f"{self.key}.b")
        if b.shape[1] != a.shape[0]:
            raise ShapeMismatchError(f"adapter {self.key}: B is {b.shape} but A is {a.shape}")
        if alpha < 0:
            raise AdapterError(f"adapter {self.key}: alpha must be non-negative, got {alpha}")
        self.alpha = float(alpha)
        self.init_mode = InitMode(init_mode)
        self.segment = segment
        self.a_param = Parameter(self.param_name("a"), a, trainable=not a_frozen)
        self.b_param = Parameter(self.param_name("b"), b, trainable=True)

    @property
    def key(self) -> str:
        return f"L{self.layer}.{self.site}"

    def param_name(self, kind: str) -> str:
        return adapter_param_name(self.layer, self.site, kind)

    @property
    def a(self) -> np.ndarray:
        return self.a_param.value

    @property
    def b(self) -> np.ndarray:
        return self.b_param.value

    @property
    def a_frozen(self) -> bool:
        return not self.a_param.trainable

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_count(self) -> int:
        return self.b.size + (0 if self.a_frozen else self.a.size)

    def parameters(self) -> List[Parameter]:
        return [self.a_param, self.b_param]

    def path(self, ctx: GradientContext, x: Node) -> Node:
        """Adapter branch for row-major activations: scaling * (x A^T) B^T."""
        a = ctx.param(self.a_param.name)
        b = ctx.param(self.b_param.name)
        low = ctx.matmul(x, ctx.transpose(a))
        return ctx.scale(ctx.matmul(low, ctx.transpose(b)), self.scaling)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            self.layer,
            self.site,
            self.a.copy(),
            self.b.copy(),
            self.alpha,
            a_frozen=self.a_frozen,
            init_mode=self.init_mode,
            segment=self.segment,
        )

    def metadata(self) -> dict:
        return {
            "layer": self.layer,
            "site": self.site,
            "rank": self.rank,
            "alpha": self.alpha,
            "a_frozen": self.a_frozen,
            "init_mode": self.init_mode.value,
            "segment": self.segment.value if self.segment is not None else None,
        }

    def __repr__(self):
        return (
            f"<LoraAdapter {self.key} r={self.rank} alpha={self.alpha} "
            f"frozen_a={self.a_frozen} init={self.init_mode.value}>"
        )


class AdapterRegistry:
    """All adapters of one model, keyed by (layer, site), in injection order."""

    def __init__(self, adapters: Iterable[LoraAdapter] = (), label: str = ""):
        self.label = label
        self._adapters: Dict[Tuple[int, str], LoraAdapter] = {}
        for adapter in adapters:
            self.add(adapter)

    def add(self, adapter: LoraAdapter):
        key = (adapter.layer, adapter.site)
        if key in self._adapters:
            raise AdapterError(f"adapter {adapter.key} is already registered")
        self._adapters[key] = adapter

    def get(self, layer: int, site: str) -> Optional[LoraAdapter]:
        return self._adapters.get((layer, site))

    def __iter__(self) -> Iterator[LoraAdapter]:
        return iter(self._adapters.values())

    def __len__(self) -> int:
        return len(self._adapters)

    def parameters(self) -> List[Parameter]:
        return [p for adapter in self for p in adapter.parameters()]

    def trainable_count(self) -> int:
        return sum(adapter.trainable_count for adapter in self)

    def ranks_by_layer(self) -> Dict[int, int]:
        ranks: Dict[int, int] = {}
        for adapter in self:
            ranks.setdefault(adapter.layer, adapter.rank)
        return ranks

    def copy(self) -> "AdapterRegistry":
        return AdapterRegistry((adapter.copy() for adapter in self), label=self.label)

    def metadata(self) -> dict:
        return {"label": self.label, "adapters": [adapter.metadata() for adapter in self]}
