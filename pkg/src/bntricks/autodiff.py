"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every non-leaf ``Tensor`` remembers its parents and a closure that maps the
gradient of the output to gradients of the inputs.  Nodes are stamped with a
creation counter, so sorting the reachable nodes by that counter reproduces
forward execution order and ``backward`` walks it once in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_counter = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class LabelError(ValueError):
    """Raised when a class index falls outside the logit range."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


class ContractError(RuntimeError):
    """Raised when an operation is invoked against its contract."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array with an optional gradient and a link into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic used to assemble composite losses
    def __add__(self, other: Tensor | float) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: float) -> Tensor:
        return scale(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index) -> Tensor:
        return take(self, index)

    def sum(self) -> Tensor:
        return reduce_sum(self)

    def mean(self) -> Tensor:
        return reduce_mean(self)

    def backward(self) -> None:
        backward(self)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per parent.  Nothing is recorded when grad mode is off or no parent
    needs a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    nodes.sort(key=lambda n: n._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients live only
    for the duration of one call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a recorded graph")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_graph_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, g in zip(node._parents, node._backward(grad)):
            if g is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = g if key not in pending else pending[key] + g


# elementary ops


def add(a: Tensor | float, b: Tensor | float) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"add: operands {a.shape} and {b.shape} differ")

    def fold(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        return g if g.shape == shape else np.full(shape, g.sum())

    return make_node(
        a.data + b.data, (a, b), lambda g: (fold(g, a.shape), fold(g, b.shape))
    )


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return make_node(a.data * factor, (a,), lambda g: (g * factor,))


def reduce_sum(a: Tensor) -> Tensor:
    return make_node(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size
    return make_node(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def take(a: Tensor, index) -> Tensor:
    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_node(a.data[index], (a,), grad_fn)


def square_sum(a: Tensor) -> Tensor:
    """Sum of squared entries, used for the explicit L2 penalty."""
    return make_node(np.array(np.sum(a.data * a.data)), (a,), lambda g: (2.0 * float(g) * a.data,))


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` over a batch of row vectors."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise DimensionError(
            f"linear: expected x[B,D_in], weight[D_in,D_out], bias[D_out]; "
            f"got x{x.shape}, weight{weight.shape}, bias{bias.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: x{x.shape} does not conform to weight{weight.shape}")
    if weight.shape[1] != bias.shape[0]:
        raise DimensionError(f"linear: weight{weight.shape} does not conform to bias{bias.shape}")
    out = x.data @ weight.data + bias.data

    def grad_fn(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return make_node(out, (x, weight, bias), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# losses


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_ce_loss(
    logits: Tensor,
    labels: Sequence[int] | np.ndarray,
    weights: np.ndarray | None = None,
    normalizer: float | None = None,
) -> Tensor:
    """Softmax cross-entropy averaged over the batch.

    With ``weights`` the per-sample losses are scaled before summation and the
    sum is divided by ``normalizer`` (the batch size when omitted).
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_ce_loss: logits must be 2-D, got {logits.shape}")
    batch, classes = logits.shape
    if batch < 1:
        raise ContractError("softmax_ce_loss: empty batch")
    if labels.shape != (batch,):
        raise DimensionError(f"softmax_ce_loss: {labels.shape[0]} labels for {batch} rows")
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {labels[i]} at batch index {i} outside [0, {classes})")
    logp = _log_softmax(logits.data)
    rows = np.arange(batch)
    per_sample = -logp[rows, labels]
    denom = float(batch if normalizer is None else normalizer)
    if weights is None:
        value = per_sample.sum() / denom
        w = None
    else:
        w = np.asarray(weights, dtype=np.float64)
        value = (per_sample * w).sum() / denom

    def grad_fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        d *= float(g) / denom
        if w is not None:
            d *= w[:, None]
        return (d,)

    return make_node(np.array(value), (logits,), grad_fn)


def logit_mse_loss(current: Tensor, stored: np.ndarray | Tensor) -> Tensor:
    """Mean squared difference between live logits and stored (constant) logits."""
    current = as_tensor(current)
    target = stored.data if isinstance(stored, Tensor) else np.asarray(stored, dtype=np.float64)
    if current.shape != target.shape:
        raise DimensionError(f"logit_mse_loss: {current.shape} vs stored {target.shape}")
    diff = current.data - target
    n = diff.size
    return make_node(np.array(np.mean(diff * diff)), (current,), lambda g: (2.0 * float(g) / n * diff,))


def sigmoid_bce_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy on sigmoid outputs, averaged over every entry.

    Uses the stable form ``max(z, 0) - z*t + log(1 + exp(-|z|))``.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if logits.shape != t.shape:
        raise DimensionError(f"sigmoid_bce_loss: logits {logits.shape} vs targets {t.shape}")
    if np.any((t < 0.0) | (t > 1.0)) or not np.all(np.isfinite(t)):
        raise DomainError("sigmoid_bce_loss: targets must lie in [0, 1]")
    z = logits.data
    per_entry = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def grad_fn(g):
        return ((sigmoid(z) - t) * (float(g) / n),)

    return make_node(np.array(per_entry.mean()), (logits,), grad_fn)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# optimisation


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """``p <- p - lr * (grad + 2 * weight_decay * p)`` then clear gradients.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for p in params:
        grad = p.grad if p.grad is not None else 0.0
        if weight_decay:
            p.data -= lr * (grad + 2.0 * weight_decay * p.data)
        else:
            p.data -= lr * grad
        p.grad = None
