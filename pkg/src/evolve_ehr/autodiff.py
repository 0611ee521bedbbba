"""Small reverse-mode autodiff engine over dense numpy arrays.

Only the operations needed by the transformer are provided. Each op records a
closure computing the local vector-Jacobian product; ``Tensor.backward`` walks
the recorded tape in reverse topological order and frees it afterwards.

Broadcasting is limited to bias-adds (a trailing vector added to every row)
and python scalars. Everything else must match shapes exactly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "masked_softmax_rows",
    "sigmoid",
    "gelu",
    "layer_norm",
    "embedding_lookup",
    "dropout",
    "sum",
    "mean",
    "weighted_sum",
    "bce_with_logits",
    "stable_sigmoid",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (non-scalar loss, reuse after free)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_freed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._freed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None and not self._freed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_non_scalar()

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {self.name or ''} {self.shape}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf reachable from this scalar.

        The tape is released afterwards; calling ``backward`` again without a
        new forward pass raises :class:`GraphError`.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GraphError("graph already consumed by a previous backward(); run forward again")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
            node._parents = ()
            node._backward = None
            node._freed = True


def _raise_non_scalar():
    raise GraphError("item() requires a single-element tensor")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    """``a + b`` for equal shapes, a trailing bias vector, or a python scalar."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + a.dtype.type(c), (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.shape[-1:] == b.shape:
        lead = a.ndim - 1
        return _result(
            a.data + b.data,
            (a, b),
            lambda g: (g, g.sum(axis=tuple(range(lead)))),
        )
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shaped tensors, or tensor times scalar."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


# ----------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (a shared weight) or has the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def _getitem(a: Tensor, idx) -> Tensor:
    orig_shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros(orig_shape, dtype=dtype)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


# ----------------------------------------------------------------------------
# nonlinearities


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function on raw arrays."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = stable_sigmoid(x.data)
    return _result(y, (x,), lambda g: (g * y * (1 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    inner = c * (xd + k * (xd * xd * xd))
    t = np.tanh(inner)
    y = 0.5 * xd * (1 + t)

    def backward(g):
        dinner = c * (1 + 3 * k * (xd * xd))
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _result(y, (x,), backward)


def masked_softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with disallowed entries forced to zero.

    ``mask`` is boolean (True = allowed) and broadcastable to ``x``; entries of
    ``x`` equal to ``-inf`` count as masked too. A row with no allowed entry
    raises ``ValueError``.
    """
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != xd.shape[-2:] and mask.shape[-1:] != xd.shape[-1:]:
            raise ShapeError(f"mask shape {mask.shape} does not fit scores {xd.shape}")
        allowed = np.broadcast_to(mask, xd.shape) & (xd != -np.inf)
    else:
        allowed = xd != -np.inf
    if not np.all(allowed.any(axis=-1)):
        raise ValueError("masked_softmax_rows: a row has every entry masked")
    scores = np.where(allowed, xd, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y,)

    return _result(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back into the rows."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0]
        raise IndexError(f"embedding id {int(bad)} outside table of {vocab} rows")
    shape = table.shape

    def backward(g):
        return (scatter_rows(ids, g.reshape(-1, shape[1]), shape[0]),)

    return _result(table.data[ids], (table,), backward)


def scatter_rows(ids: np.ndarray, rows: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum ``rows`` into an ``n_rows``-row zero matrix at positions ``ids``."""
    flat = ids.reshape(-1)
    full = np.zeros((n_rows, rows.shape[1]), dtype=rows.dtype)
    if flat.size == 0:
        return full
    order = np.argsort(flat, kind="stable")
    sorted_ids = flat[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_ids)) + 1]
    full[sorted_ids[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return full


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    draw = rng.random(x.shape, dtype=np.float32 if x.dtype == np.float32 else np.float64)
    keep = (draw >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# reductions and losses


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _result(
        np.asarray(x.data.mean()),
        (x,),
        lambda g: (np.broadcast_to(g / n, shape).astype(x.dtype),),
    )


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(x * weights)`` for a constant weight array of the same shape."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {x.shape}")
    return _result(np.asarray((x.data * w).sum()), (x,), lambda g: (g * w,))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy evaluated from logits.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so large logits never overflow.
    """
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {z.shape}")
    if np.isnan(z).any() or np.isnan(y).any():
        raise FloatingPointError("NaN passed to bce_with_logits")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = stable_sigmoid(z)
    return _result(loss, (logits,), lambda g: (g * (p - y),))

