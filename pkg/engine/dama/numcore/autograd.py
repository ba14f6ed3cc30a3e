"""
Reverse-mode gradient computation over numpy arrays.

A ``GradientContext`` is a tape: every operation called on it evaluates the
forward value immediately and, when any input requires a gradient, records a
node holding its parents and a backward closure. Nodes are appended in
evaluation order, which is already a topological order, so ``backward``
visits each recorded node exactly once by walking the tape in reverse.

Parameters live in a ``ParameterStore`` (name -> array + trainable flag) that
outlives any single context; a context binds a leaf node to each parameter it
reads and reports gradients by parameter name.
"""
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from dama.core.exceptions import ConfigurationError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

MASK_VALUE = -1e30
IGNORE_INDEX = -100

ArrayLike = Union[np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Parameter:
    """A named array with a trainable flag."""

    __slots__ = ("name", "value", "trainable")

    def __init__(self, name: str, value: np.ndarray, trainable: bool = True):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.trainable = trainable

    def __repr__(self):
        return f"<Parameter {self.name} {self.value.shape} trainable={self.trainable}>"


class ParameterStore:
    """Ordered registry of named parameters."""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}

    def register(self, name: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise ConfigurationError(f"Parameter '{name}' is already registered")
        param = Parameter(name, value, trainable)
        self._params[name] = param
        return param

    def add(self, param: Parameter) -> Parameter:
        """Register an existing parameter object (shared, not copied)."""
        if param.name in self._params:
            raise ConfigurationError(f"Parameter '{param.name}' is already registered")
        self._params[param.name] = param
        return param

    def remove(self, name: str) -> Parameter:
        return self._params.pop(name)

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def trainable_names(self) -> List[str]:
        return [p.name for p in self._params.values() if p.trainable]

    def count(self, trainable_only: bool = False) -> int:
        return int(
            sum(p.value.size for p in self._params.values() if p.trainable or not trainable_only)
        )

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Deep copy of every parameter value."""
        return {name: p.value.copy() for name, p in self._params.items()}


class Node:
    """One value on the tape."""

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "param_name")

    def __init__(
        self,
        value: np.ndarray,
        parents: Tuple["Node", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        param_name: Optional[str] = None,
    ):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.param_name = param_name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"<Node {self.value.shape} requires_grad={self.requires_grad}>"


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


class GradientContext:
    """Tape of recorded operations bound to a parameter store."""

    def __init__(self, store: Optional[ParameterStore] = None, grad_enabled: bool = True):
        self.store = store if store is not None else ParameterStore()
        self.grad_enabled = grad_enabled
        self._tape: List[Node] = []
        self._leaves: Dict[str, Node] = {}

    # Leaves

    def param(self, name: str) -> Node:
        """Leaf node for a registered parameter (one per context)."""
        node = self._leaves.get(name)
        if node is None:
            param = self.store[name]
            node = Node(
                param.value,
                requires_grad=self.grad_enabled and param.trainable,
                param_name=name,
            )
            self._leaves[name] = node
        return node

    def constant(self, value: ArrayLike) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def _lift(self, value: Union[Node, ArrayLike]) -> Node:
        return value if isinstance(value, Node) else self.constant(value)

    def _record(self, value: np.ndarray, parents: Sequence[Node], backward_fn: BackwardFn) -> Node:
        requires_grad = self.grad_enabled and any(p.requires_grad for p in parents)
        if not requires_grad:
            return Node(value)
        node = Node(value, tuple(parents), backward_fn, requires_grad=True)
        self._tape.append(node)
        return node

    # Elementwise

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
        )

    def sub(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._record(
            a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
        )

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._record(
            av * bv,
            (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def scale(self, a, factor: float) -> Node:
        a = self._lift(a)
        factor = float(factor)
        return self._record(a.value * factor, (a,), lambda g: (g * factor,))

    def gelu(self, a) -> Node:
        """GELU, tanh approximation."""
        a = self._lift(a)
        x = a.value
        k = np.sqrt(2.0 / np.pi)
        inner = k * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def backward(g):
            d_inner = k * (1.0 + 3.0 * 0.044715 * x**2)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

        return self._record(out, (a,), backward)

    # Shape

    def transpose(self, a) -> Node:
        """Swap the last two axes."""
        a = self._lift(a)
        return self._record(_swap_last(a.value), (a,), lambda g: (_swap_last(g),))

    def reshape(self, a, shape: Tuple[int, ...]) -> Node:
        a = self._lift(a)
        original = a.shape
        return self._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(original),))

    def permute(self, a, axes: Tuple[int, ...]) -> Node:
        a = self._lift(a)
        inverse = tuple(np.argsort(axes))
        return self._record(
            np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),)
        )

    # Linear algebra

    def matmul(self, a, b) -> Node:
        """Batched matrix product with broadcasting over leading axes."""
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
            raise ShapeMismatchError(f"matmul dimension mismatch: a is {av.shape}, b is {bv.shape}")

        def backward(g):
            ga = _unbroadcast(g @ _swap_last(bv), av.shape) if a.requires_grad else None
            gb = _unbroadcast(_swap_last(av) @ g, bv.shape) if b.requires_grad else None
            return ga, gb

        return self._record(av @ bv, (a, b), backward)

    def linear(self, x, weight, bias=None) -> Node:
        """x W^T (+ b) with W stored d_out x d_in."""
        out = self.matmul(x, self.transpose(weight))
        if bias is not None:
            out = self.add(out, bias)
        return out

    # Reductions and normalizations

    def sum(self, a) -> Node:
        a = self._lift(a)
        shape = a.shape
        return self._record(
            np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
        )

    def mean(self, a) -> Node:
        a = self._lift(a)
        n = a.value.size
        return self.scale(self.sum(a), 1.0 / n)

    def softmax(self, a, mask: Optional[np.ndarray] = None) -> Node:
        """Softmax over the last axis; ``mask`` is added to the logits as a constant."""
        a = self._lift(a)
        logits = a.value if mask is None else a.value + mask
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

        return self._record(y, (a,), backward)

    def layer_norm(self, x, gamma, beta, eps: float = 1e-5) -> Node:
        x, gamma, beta = self._lift(x), self._lift(gamma), self._lift(beta)
        xv = x.value
        n = xv.shape[-1]
        mu = xv.mean(axis=-1, keepdims=True)
        centered = xv - mu
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        out = xhat * gamma.value + beta.value

        def backward(g):
            g_xhat = g * gamma.value
            gx = (inv / n) * (
                n * g_xhat
                - g_xhat.sum(axis=-1, keepdims=True)
                - xhat * np.sum(g_xhat * xhat, axis=-1, keepdims=True)
            )
            g_gamma = _unbroadcast(g * xhat, gamma.shape)
            g_beta = _unbroadcast(g, beta.shape)
            return gx, g_gamma, g_beta

        return self._record(out, (x, gamma, beta), backward)

    def embedding(self, table, ids: np.ndarray) -> Node:
        """Row lookup ``table[ids]``."""
        table = self._lift(table)
        ids = np.asarray(ids, dtype=np.int64)
        rows = table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= rows):
            raise ShapeMismatchError(f"embedding index out of range [0, {rows})")

        def backward(g):
            grad = np.zeros_like(table.value)
            np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            return (grad,)

        return self._record(table.value[ids], (table,), backward)

    def cross_entropy(self, logits, targets: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Node:
        """Mean token cross-entropy over positions whose target != ignore_index."""
        logits = self._lift(logits)
        lv = logits.value
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != lv.shape[:-1]:
            raise ShapeMismatchError(
                f"cross_entropy targets {targets.shape} do not match logits {lv.shape}"
            )
        flat_logits = lv.reshape(-1, lv.shape[-1])
        flat_targets = targets.reshape(-1)
        valid = flat_targets != ignore_index
        n_valid = int(valid.sum())
        if n_valid == 0:
            raise ShapeMismatchError("cross_entropy has no non-ignored targets")

        shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_probs = shifted - log_z
        rows = np.nonzero(valid)[0]
        picked = log_probs[rows, flat_targets[rows]]
        loss = np.asarray(-picked.sum() / n_valid)

        def backward(g):
            grad = np.exp(log_probs)
            grad[rows, flat_targets[rows]] -= 1.0
            grad[~valid] = 0.0
            grad *= float(g) / n_valid
            return (grad.reshape(lv.shape),)

        return self._record(loss, (logits,), backward)

    # Backward

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        """Gradients of a scalar loss for every trainable parameter in the store."""
        if loss.value.size != 1:
            raise ShapeMismatchError(f"loss must be scalar, got shape {loss.value.shape}")

        grads: Dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[id(loss)] = np.ones_like(loss.value)

        for node in reversed(self._tape):
            upstream = grads.pop(id(node), None)
            if upstream is None:
                continue
            parent_grads = node.backward_fn(upstream)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad

        result: Dict[str, np.ndarray] = {}
        for param in self.store:
            if not param.trainable:
                continue
            leaf = self._leaves.get(param.name)
            grad = grads.get(id(leaf)) if leaf is not None else None
            result[param.name] = (
                np.zeros_like(param.value) if grad is None else np.asarray(grad, dtype=np.float64)
            )
        return result


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    """L2 norm over all gradients, summed in sorted-name order."""
    total = 0.0
    for name in sorted(grads):
        total += float(np.sum(grads[name] * grads[name]))
    return float(np.sqrt(total))


def clip_grad_norm(
    grads: Dict[str, np.ndarray], max_norm: float = 5.0
) -> Tuple[Dict[str, np.ndarray], float]:
    """Rescale gradients so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteError(f"gradient norm is not finite ({norm})")
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {name: g * factor for name, g in grads.items()}, norm
