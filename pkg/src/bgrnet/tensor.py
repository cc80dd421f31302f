"""Dense float64 matrices with reverse-mode gradients.

Every matrix is a ``Mat``: an immutable 2-D array plus the link back to the
operation that produced it. Calling :func:`backward` on a result walks those
links in reverse topological order and returns a ``{Mat: ndarray}`` map of
gradients, so no state on the matrices themselves is mutated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, index: tuple[int, ...], detail: str = ""):
        self.op = op
        self.index = index
        msg = f"non-finite value produced by {op!r} at entry {index}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class Mat:
    """Immutable row-major 2-D float64 matrix, optionally part of a gradient record."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Mat needs 2-D data, got shape {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Mat, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def zeros(cls, rows: int, cols: int, requires_grad: bool = False) -> "Mat":
        return cls(np.zeros((rows, cols)), requires_grad=requires_grad)

    @classmethod
    def eye(cls, n: int) -> "Mat":
        return cls(np.eye(n))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Mat":
        return Mat(self.data)

    def __repr__(self) -> str:
        return f"Mat({self.rows}x{self.cols}, op={self.op})"

    def __matmul__(self, other: "Mat") -> "Mat":
        return matmul(self, other)

    def __add__(self, other: "Mat") -> "Mat":
        return scale_add(self, other, 1.0, 1.0)

    def __sub__(self, other: "Mat") -> "Mat":
        return scale_add(self, other, 1.0, -1.0)

    @property
    def T(self) -> "Mat":
        return transpose(self)


def _as_mat(x) -> Mat:
    return x if isinstance(x, Mat) else Mat(x)


def _node(value: np.ndarray, parents: Sequence[Mat], backward_fn, op: str) -> Mat:
    if not np.isfinite(value).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(value))[0])
        raise NonFiniteError(op, bad)
    out = Mat.__new__(Mat)
    value = np.ascontiguousarray(value, dtype=np.float64)
    value.flags.writeable = False
    out.data = value
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(output: Mat, seed: np.ndarray | None = None) -> dict[Mat, np.ndarray]:
    """Reverse-mode sweep from ``output``.

    ``seed`` is the upstream gradient wrt ``output`` (defaults to ones). Returns
    gradients for every node in the record that requires them, leaves included.
    """
    if seed is None:
        seed = np.ones(output.shape)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {output.shape}")

    order: list[Mat] = []
    seen: set[int] = set()
    stack: list[tuple[Mat, bool]] = [(output, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[Mat, np.ndarray] = {output: seed.copy()}
    for node in reversed(order):
        g = grads.get(node)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    return grads


# ---------------------------------------------------------------- elementary ops


def matmul(a: Mat, b: Mat) -> Mat:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _node(A @ B, (a, b), bw, "matmul")


def transpose(a: Mat) -> Mat:
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def scale_add(a: Mat, b: Mat, alpha: float, beta: float) -> Mat:
    """alpha*a + beta*b."""
    if a.shape != b.shape:
        raise ShapeError(f"scale_add: shapes differ, {a.shape} vs {b.shape}")

    def bw(g):
        return alpha * g, beta * g

    return _node(alpha * a.data + beta * b.data, (a, b), bw, "scale_add")


def scale(a: Mat, alpha: float) -> Mat:
    return _node(alpha * a.data, (a,), lambda g: (alpha * g,), "scale")


def hadamard(a: Mat, b: Mat) -> Mat:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _node(A * B, (a, b), lambda g: (g * B, g * A), "hadamard")


def add_row(a: Mat, row: Mat) -> Mat:
    """Broadcast-add a 1 x cols row vector to every row of ``a`` (bias add)."""
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError(f"add_row: expected 1x{a.cols} row, got {row.shape}")
    return _node(a.data + row.data, (a, row), lambda g: (g, g.sum(axis=0, keepdims=True)), "add_row")


def outer_add(col: Mat, row: Mat) -> Mat:
    """(n x 1) + (1 x m) -> n x m, out[i, j] = col[i] + row[j]."""
    if col.cols != 1 or row.rows != 1:
        raise ShapeError(f"outer_add: need n x 1 and 1 x m, got {col.shape} and {row.shape}")

    def bw(g):
        return g.sum(axis=1, keepdims=True), g.sum(axis=0, keepdims=True)

    return _node(col.data + row.data, (col, row), bw, "outer_add")


def relu(a: Mat) -> Mat:
    A = a.data
    pos = A > 0
    return _node(np.where(pos, A, 0.0), (a,), lambda g: (g * pos,), "relu")


def leaky_relu(a: Mat, slope: float = 0.2) -> Mat:
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    A = a.data
    factor = np.where(A >= 0, 1.0, slope)
    return _node(A * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def softmax_axis(a: Mat, axis: str = "rows", mask: np.ndarray | None = None) -> Mat:
    """Softmax so that every row (``axis="rows"``) or column (``axis="cols"``) sums to 1.

    ``mask`` (bool, same shape) marks admissible entries; the rest get weight 0.
    A fully masked row/column becomes a one-hot on the diagonal.
    """
    if axis not in ("rows", "cols"):
        raise ConfigError(f"axis must be 'rows' or 'cols', got {axis!r}")
    ax = 1 if axis == "rows" else 0
    A = a.data
    if mask is None:
        shifted = A - A.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        Y = e / e.sum(axis=ax, keepdims=True)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != A.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != {A.shape}")
        empty = ~mask.any(axis=ax)
        if empty.any():
            if A.shape[0] != A.shape[1]:
                raise ShapeError("fully masked lines need a square matrix for the self-loop fallback")
            logger.warning("softmax: %d fully masked %s replaced by self-loops", int(empty.sum()), axis)
            mask = mask | (np.eye(A.shape[0], dtype=bool) & (empty[:, None] if ax == 1 else empty[None, :]))
        masked = np.where(mask, A, -np.inf)
        shifted = masked - masked.max(axis=ax, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
        Y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (Y * (g - (g * Y).sum(axis=ax, keepdims=True)),)

    return _node(Y, (a,), bw, f"softmax_{axis}")


def concat_cols(a: Mat, b: Mat) -> Mat:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: row counts differ, {a.shape} vs {b.shape}")
    k = a.cols
    return _node(np.hstack([a.data, b.data]), (a, b), lambda g: (g[:, :k], g[:, k:]), "concat_cols")


def concat_rows(a: Mat, b: Mat) -> Mat:
    if a.cols != b.cols:
        raise ShapeError(f"concat_rows: column counts differ, {a.shape} vs {b.shape}")
    k = a.rows
    return _node(np.vstack([a.data, b.data]), (a, b), lambda g: (g[:k], g[k:]), "concat_rows")


def slice_rows(a: Mat, start: int, stop: int) -> Mat:
    if not 0 <= start <= stop <= a.rows:
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _node(a.data[start:stop], (a,), bw, "slice_rows")


def slice_cols(a: Mat, start: int, stop: int) -> Mat:
    if not 0 <= start <= stop <= a.cols:
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")

    def bw(g):
        full = np.zeros(a.shape)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop], (a,), bw, "slice_cols")


def reshape(a: Mat, rows: int, cols: int) -> Mat:
    """Row-major reshape."""
    if rows * cols != a.rows * a.cols:
        raise ShapeError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    shape = a.shape
    return _node(a.data.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),), "reshape")


def sum_all(a: Mat) -> Mat:
    shape = a.shape
    return _node(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum_all")


def mean_of(mats: Iterable[Mat]) -> Mat:
    mats = list(mats)
    if not mats:
        raise ShapeError("mean_of needs at least one matrix")
    out = mats[0]
    for m in mats[1:]:
        out = scale_add(out, m, 1.0, 1.0)
    return scale(out, 1.0 / len(mats)) if len(mats) > 1 else out


def cross_entropy(logits: Mat, labels: Sequence[int]) -> Mat:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax of ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.rows
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else '?'} labels for {n} rows")
    if n == 0:
        return _node(np.zeros((1, 1)), (logits,), lambda g: (np.zeros(logits.shape),), "cross_entropy")
    if labels.min() < 0 or labels.max() >= logits.cols:
        raise ShapeError("cross_entropy: label out of range")
    Z = logits.data
    shifted = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, labels])

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g[0, 0] / n),)

    return _node(np.array([[loss]]), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_input: int = -1
    worst_entry: tuple[int, int] = (-1, -1)


def grad_check(
    op: Callable[..., Mat],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``op`` with central differences.

    The output is reduced to a scalar against a fixed random cotangent. The
    per-entry error is ``|a - n| / max(|a|, |n|, 1)``.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    arrays = [np.array(x, dtype=np.float64, ndmin=2) for x in inputs]
    for i, x in enumerate(arrays):
        if not np.isfinite(x).all():
            raise NonFiniteError(f"grad_check input {i}", tuple(int(j) for j in np.argwhere(~np.isfinite(x))[0]))

    leaves = [Mat(x, requires_grad=True) for x in arrays]
    out = op(*leaves)
    cot = np.random.default_rng(seed).standard_normal(out.shape)
    grads = backward(out, cot)

    def scalar(xs):
        return float(np.sum(op(*[Mat(x) for x in xs]).data * cot))

    worst = (0.0, -1, (-1, -1))
    for i, x in enumerate(arrays):
        analytic = grads.get(leaves[i], np.zeros(x.shape))
        for idx in np.ndindex(x.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += eps
            minus[i][idx] -= eps
            fp, fm = scalar(plus), scalar(minus)
            numeric = (fp - fm) / (2 * eps)
            a = analytic[idx]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NonFiniteError(getattr(op, "__name__", "op"), (i, *idx), "during finite differencing")
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            if err > worst[0]:
                worst = (err, i, (int(idx[0]), int(idx[1])))
    return GradCheckReport(worst[0], worst[0] <= tol, worst[1], worst[2])
