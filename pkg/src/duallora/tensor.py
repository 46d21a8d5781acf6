"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is dynamic: every op records its parents and a backward closure
on the output tensor, and ``backward`` replays the closures in reverse
topological order. Gradients accumulate additively, so reusing a leaf in
two places doubles its gradient. All arithmetic is 64-bit.

``finite_difference_grad`` is the verification oracle; it evaluates the
forward path only and never touches the recorded graph.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A numpy-backed array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the module-level functions carry the real contracts
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitive ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports (m,k)@(k,n), (m,k)@(k,) and (k,)@(k,)."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
    elif a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(np.outer(g, b.data))
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
    elif a.ndim == 1 and b.ndim == 1:
        if a.shape != b.shape:
            raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g * b.data)
            if b.requires_grad:
                b.accumulate_grad(g * a.data)
    else:
        raise ShapeError(f"matmul: unsupported ranks, {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), bw)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; a trailing vector broadcasts over the rows of a."""
    b = _as_tensor(b)
    if a.shape == b.shape:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)
    elif a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=0))
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    return _make(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; accepts a python scalar or a trailing vector."""
    if isinstance(b, (int, float)):
        c = float(b)

        def bw_scalar(g):
            if a.requires_grad:
                a.accumulate_grad(g * c)
        return _make(a.data * c, (a,), bw_scalar)
    if a.shape == b.shape:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g * b.data)
            if b.requires_grad:
                b.accumulate_grad(g * a.data)
    elif a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g * b.data)
            if b.requires_grad:
                b.accumulate_grad((g * a.data).sum(axis=0))
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    return _make(a.data * b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)
    return _make(a.data.T, (a,), bw)


def outer(u: Tensor, v: Tensor) -> Tensor:
    """Outer product of two vectors: out[i, j] = u[i] * v[j]."""
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"outer: expected vectors, got {u.shape} and {v.shape}")

    def bw(g):
        if u.requires_grad:
            u.accumulate_grad(g @ v.data)
        if v.requires_grad:
            v.accumulate_grad(g.T @ u.data)
    return _make(np.outer(u.data, v.data), (u, v), bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    if a.ndim != 2 or not (0 <= lo <= hi <= a.shape[1]):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] invalid for shape {a.shape}")

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            a.accumulate_grad(full)
    return _make(a.data[:, lo:hi].copy(), (a,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts or any(p.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: expects a nonempty list of matrices")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[:, lo:hi])
    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; every slice along ``axis`` sums to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            inner = (g * p).sum(axis=axis, keepdims=True)
            x.accumulate_grad(p * (g - inner))
    return _make(p, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalization per row scaled by gain (no mean subtraction)."""
    if x.ndim != 2 or gain.ndim != 1 or gain.shape[0] != x.shape[1]:
        raise ShapeError(f"layer_norm: x {x.shape} vs gain {gain.shape}")
    n = x.shape[1]
    r = np.sqrt((x.data ** 2).mean(axis=1, keepdims=True) + eps)
    y = x.data / r * gain.data

    def bw(g):
        if x.requires_grad:
            gg = g * gain.data
            proj = (gg * x.data).sum(axis=1, keepdims=True)
            x.accumulate_grad(gg / r - x.data * proj / (n * r ** 3))
        if gain.requires_grad:
            gain.accumulate_grad((g * x.data / r).sum(axis=0))
    return _make(y, (x, gain), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * phi

    def bw(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data ** 2) * _INV_SQRT2PI
            x.accumulate_grad(g * (phi + x.data * pdf))
    return _make(y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(g * s * (1.0 - s))
    return _make(s, (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; out-of-range ids raise IndexError."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range [0, {table.shape[0]})")

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            table.accumulate_grad(full)
    return _make(table.data[idx], (table,), bw)


def mean(x: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean along one axis of a matrix."""
    if x.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"mean: axis {axis} invalid for shape {x.shape}")
    n = x.shape[axis]

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.expand_dims(g, axis).repeat(n, axis) / n)
    return _make(x.data.mean(axis=axis), (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))
    return _make(np.asarray(x.data.sum()), (x,), bw)


def cross_entropy(logits: Tensor, target_ids, ignore_id: int | None = None) -> Tensor:
    """Mean token-level cross entropy over non-ignored positions."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    counted = np.ones_like(targets, dtype=bool) if ignore_id is None \
        else targets != ignore_id
    if not counted.any():
        raise ContractError("cross_entropy: every position is ignored")
    safe = np.where(counted, targets, 0)
    if safe.min() < 0 or safe.max() >= logits.shape[1]:
        raise IndexError(
            f"cross_entropy: target id out of range [0, {logits.shape[1]})")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    nll = lse - logits.data[np.arange(len(targets)), safe]
    count = counted.sum()
    loss = (nll * counted).sum() / count

    def bw(g):
        if logits.requires_grad:
            p = np.exp(logits.data - m)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(targets)), safe] -= 1.0
            p *= (counted / count)[:, None] * float(g)
            logits.accumulate_grad(p)
    return _make(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad node reachable from ``loss``."""
    if loss.ndim != 0:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# verification oracles


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor,
                           eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued function at x.

    Forward evaluations only; deliberately independent of the autodiff path
    it is used to check.
    """
    original = x.data.copy()
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = f(x).item()
        flat[i] = saved - eps
        lo = f(x).item()
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * eps)
    x.data[...] = original
    return grad


def rank_of(m: Tensor | np.ndarray, tol: float = 1e-8) -> int:
    """Numerical rank by Gaussian elimination with partial pivoting.

    A pivot counts if its magnitude exceeds tol * max|entry| of the input.
    """
    a = np.array(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"rank_of: expected a matrix, got shape {a.shape}")
    threshold = tol * (np.abs(a).max() if a.size else 0.0)
    rank = 0
    row = 0
    for col in range(a.shape[1]):
        if row >= a.shape[0]:
            break
        pivot = row + int(np.abs(a[row:, col]).argmax())
        if np.abs(a[pivot, col]) <= threshold:
            continue
        a[[row, pivot]] = a[[pivot, row]]
        a[row + 1:] -= np.outer(a[row + 1:, col] / a[row, col], a[row])
        rank += 1
        row += 1
    return rank
