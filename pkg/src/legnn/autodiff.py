"""Dense/sparse 2-D tensors with tape-based reverse-mode differentiation.

Every value is a float64 matrix. Operations record themselves on the tape
that is active in the current context (``with Tape() as tape: ...``) when at
least one input requires a gradient; ``backward`` then replays the tape in
reverse. Outside a tape, operations are plain numpy computations.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, CorruptMatrixError, DimensionError, NonFiniteError

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "legnn_active_tape", default=None
)
_debug_checks: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "legnn_debug_checks", default=False
)

LOG_CLAMP = 1e-12


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise NonFiniteError whenever a tensor with NaN/Inf entries is produced."""
    token = _debug_checks.set(enabled)
    try:
        yield
    finally:
        _debug_checks.reset(token)


class Tensor:
    """A float64 matrix, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got {arr.ndim}-D input")
        if _debug_checks.get() and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite entries in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        if _debug_checks.get() and not np.all(np.isfinite(arr)):
            raise NonFiniteError("operation produced non-finite values")
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def zeros(rows: int, cols: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=requires_grad)


def ones(rows: int, cols: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones((rows, cols)), requires_grad=requires_grad)


def eye(n: int) -> Tensor:
    return Tensor(np.eye(n))


class SparseMatrix:
    """Compressed-sparse-row matrix with validated structure.

    Values are constants; for attention-weighted products whose values depend
    on parameters, see :func:`spmm_values`.
    """

    __slots__ = ("shape", "indptr", "indices", "values", "_csr")

    def __init__(self, shape, indptr, indices, values):
        rows, cols = (int(shape[0]), int(shape[1]))
        indptr = np.asarray(indptr, dtype=np.int64)
        indices = np.asarray(indices, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if rows < 0 or cols < 0:
            raise CorruptMatrixError(f"negative shape {shape}")
        if indptr.shape != (rows + 1,):
            raise CorruptMatrixError(f"row offsets must have length {rows + 1}")
        if indptr[0] != 0 or np.any(np.diff(indptr) < 0):
            raise CorruptMatrixError("row offsets must start at 0 and be non-decreasing")
        if indices.shape != values.shape or indices.ndim != 1:
            raise CorruptMatrixError("column-index and value arrays must be 1-D and equal length")
        if indptr[-1] != len(values):
            raise CorruptMatrixError(
                f"last row offset {indptr[-1]} != number of stored values {len(values)}"
            )
        if len(indices) and (indices.min() < 0 or indices.max() >= cols):
            raise CorruptMatrixError(f"column index out of bounds for {cols} columns")
        if len(indices) > 1:
            step_ok = np.diff(indices) > 0
            # positions where a new row starts are exempt
            starts = indptr[1:-1]
            starts = starts[(starts > 0) & (starts < len(indices))]
            step_ok[starts - 1] = True
            if not step_ok.all():
                pos = int(np.flatnonzero(~step_ok)[0]) + 1
                r = int(np.searchsorted(indptr, pos, side="right")) - 1
                raise CorruptMatrixError(f"column indices of row {r} not strictly increasing")
        self.shape = (rows, cols)
        self.indptr = indptr
        self.indices = indices
        self.values = values
        self._csr = None

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry."""
        return np.repeat(np.arange(self.rows, dtype=np.int64), np.diff(self.indptr))

    def to_scipy(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, self.indices, self.indptr), shape=self.shape
            )
        return self._csr

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.indices] = self.values
        return out

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_scipy(self.to_scipy().T)

    def with_values(self, values) -> "SparseMatrix":
        return SparseMatrix(self.shape, self.indptr, self.indices, values)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2:
            raise DimensionError("from_dense expects a 2-D array")
        return cls.from_scipy(sp.csr_matrix(dense))

    @classmethod
    def from_coo(cls, shape, rows, cols, values=None) -> "SparseMatrix":
        """Build from coordinate lists; duplicate coordinates are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if values is None:
            values = np.ones(len(rows))
        if len(rows) and (
            rows.min() < 0 or rows.max() >= shape[0] or cols.min() < 0 or cols.max() >= shape[1]
        ):
            raise CorruptMatrixError("coordinate out of bounds")
        m = sp.coo_matrix((np.asarray(values, dtype=np.float64), (rows, cols)), shape=shape)
        return cls.from_scipy(m.tocsr())

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape, m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        idx = np.arange(n)
        return cls((n, n), np.arange(n + 1), idx, np.ones(n))

    @classmethod
    def empty(cls, rows: int, cols: int) -> "SparseMatrix":
        return cls((rows, cols), np.zeros(rows + 1, dtype=np.int64), [], [])

    def __repr__(self) -> str:
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


class Tape:
    """Ordered record of differentiable operations.

    Each entry is ``(output, inputs, backward_fn)``; ``backward_fn`` maps the
    output gradient to a tuple of input gradients (``None`` for inputs that do
    not need one). Entries are appended in execution order, so every input is
    produced before the operations that consume it.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self.entries.append((out, tuple(inputs), backward_fn))

    def clear(self) -> None:
        self.entries.clear()


def _emit(arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- primitive operations --------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _emit(A @ B, (a, b), back)


def spmm(s: SparseMatrix, d: Tensor) -> Tensor:
    """Constant sparse matrix times dense tensor."""
    if s.cols != d.rows:
        raise DimensionError(f"spmm: {s.shape} x {d.shape}")
    if s.nnz and (s.indices.min() < 0 or s.indices.max() >= s.cols):
        raise CorruptMatrixError("spmm: column index out of bounds")
    m = s.to_scipy()
    out = np.asarray(m @ d.data)

    def back(g):
        return (np.asarray(m.T @ g),)

    return _emit(out, (d,), back)


def spmm_values(s: SparseMatrix, values: Tensor, d: Tensor) -> Tensor:
    """Sparse matrix whose stored values are the (nnz x 1) tensor ``values``,
    times dense ``d``. Differentiable in both ``values`` and ``d``."""
    if s.cols != d.rows:
        raise DimensionError(f"spmm_values: {s.shape} x {d.shape}")
    if values.shape != (s.nnz, 1):
        raise DimensionError(f"spmm_values: expected values of shape ({s.nnz}, 1)")
    rows = s.row_ids()
    cols = s.indices
    vals = values.data[:, 0]
    m = sp.csr_matrix((vals, cols, s.indptr), shape=s.shape)
    out = np.asarray(m @ d.data)
    D = d.data

    def back(g):
        gv = None
        if values.requires_grad:
            gv = np.einsum("ij,ij->i", g[rows], D[cols]).reshape(-1, 1)
        gd = np.asarray(m.T @ g) if d.requires_grad else None
        return gv, gd

    return _emit(out, (values, d), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum; ``b`` may also be a 1 x cols row vector (bias)."""
    if a.shape == b.shape:
        def back(g):
            return g, g

        return _emit(a.data + b.data, (a, b), back)
    if b.rows == 1 and b.cols == a.cols:
        def back_bias(g):
            return g, g.sum(axis=0, keepdims=True)

        return _emit(a.data + b.data, (a, b), back_bias)
    raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    A, B = a.data, b.data

    def back(g):
        return g * B, g * A

    return _emit(A * B, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        return (g * c,)

    return _emit(a.data * c, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def back(g):
        return (np.full(shape, g[0, 0]),)

    return _emit(np.array([[a.data.sum()]]), (a,), back)


def vstack(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"vstack: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.vstack([p.data for p in parts]), tuple(parts), back)


def hstack(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"hstack: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.hstack([p.data for p in parts]), tuple(parts), back)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.rows:
        raise DimensionError(f"slice_rows: [{start}, {stop}) outside {a.rows} rows")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit(a.data[start:stop].copy(), (a,), back)


def gather_rows(a: Tensor, index) -> Tensor:
    """Rows ``a[index]`` (repeats allowed); backward scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    if len(index) and (index.min() < 0 or index.max() >= a.rows):
        raise DimensionError("gather_rows: index out of range")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(a.data[index], (a,), back)


def apply_activation(t: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    """Element-wise relu / elu / leaky_relu / sigmoid / tanh / identity."""
    x = t.data
    if kind == "relu":
        mask = x > 0
        out = np.where(mask, x, 0.0)
        deriv = mask.astype(np.float64)
    elif kind == "leaky_relu":
        if slope <= 0:
            raise ContractError("leaky_relu slope must be > 0")
        mask = x > 0
        out = np.where(mask, x, slope * x)
        deriv = np.where(mask, 1.0, slope)
    elif kind == "elu":
        neg = np.expm1(np.minimum(x, 0.0))
        out = np.where(x > 0, x, neg)
        deriv = np.where(x > 0, 1.0, neg + 1.0)
    elif kind == "sigmoid":
        out = _sigmoid(x)
        deriv = out * (1.0 - out)
    elif kind == "tanh":
        out = np.tanh(x)
        deriv = 1.0 - out**2
    elif kind == "identity":
        out = x.copy()
        deriv = np.ones_like(x)
    else:
        raise ContractError(f"unknown activation {kind!r}")

    def back(g):
        return (g * deriv,)

    return _emit(out, (t,), back)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_rows(t: Tensor) -> Tensor:
    if t.cols < 1:
        raise DimensionError("softmax_rows needs at least one column")
    z = t.data - t.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit(p, (t,), back)


def edge_softmax(scores: Tensor, indptr) -> Tensor:
    """Softmax of an (nnz x 1) score column within each CSR row segment."""
    indptr = np.asarray(indptr, dtype=np.int64)
    nnz = int(indptr[-1])
    if scores.shape != (nnz, 1):
        raise DimensionError(f"edge_softmax: expected ({nnz}, 1) scores")
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(len(counts)), counts)
    s = scores.data[:, 0]
    nonempty = counts > 0
    seg_max = np.full(len(counts), -np.inf)
    if nnz:
        seg_max[nonempty] = np.maximum.reduceat(s, indptr[:-1][nonempty])
    e = np.exp(s - seg_max[rows])
    denom = np.zeros(len(counts))
    np.add.at(denom, rows, e)
    w = e / denom[rows]

    def back(g):
        gs = g[:, 0]
        dot = np.zeros(len(counts))
        np.add.at(dot, rows, gs * w)
        return ((w * (gs - dot[rows])).reshape(-1, 1),)

    return _emit(w.reshape(-1, 1), (scores,), back)


def dropout(t: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the sampled mask is captured by the backward closure."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return t
    mask = (rng.random(t.shape) >= p) / (1.0 - p)

    def back(g):
        return (g * mask,)

    return _emit(t.data * mask, (t,), back)


def weighted_nll(probs: Tensor, rows, classes, weights) -> Tensor:
    """``-sum_i w_i * log(max(probs[rows_i, classes_i], 1e-12))`` as a 1x1 tensor.

    This is cross-entropy against one-hot targets; clamped entries get zero
    gradient.
    """
    rows = np.asarray(rows, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (rows.shape == classes.shape == weights.shape):
        raise DimensionError("weighted_nll: rows/classes/weights lengths differ")
    picked = probs.data[rows, classes]
    clamped = np.maximum(picked, LOG_CLAMP)
    value = -np.sum(weights * np.log(clamped))
    shape = probs.shape

    def back(g):
        full = np.zeros(shape)
        contrib = np.where(picked > LOG_CLAMP, -weights / clamped, 0.0) * g[0, 0]
        np.add.at(full, (rows, classes), contrib)
        return (full,)

    return _emit(np.array([[value]]), (probs,), back)


# -- differentiation -------------------------------------------------------


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``; returns gradients keyed by
    ``id(tensor)`` and stores them on each ``requires_grad`` tensor's ``.grad``.
    The tape is cleared afterwards."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if tape is None:
        tape = _active_tape.get()
        if tape is None:
            raise ContractError("backward called without a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, fn in reversed(tape.entries):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64)
                holders[key] = inp
    for key, t in holders.items():
        if t.requires_grad:
            t.grad = grads[key] if t.grad is None else t.grad + grads[key]
    tape.clear()
    return grads


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max over ``params`` of ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.

    Magnitudes are Frobenius norms taken per parameter tensor; the numeric
    gradient uses central differences with step ``h``. ``f`` must rebuild the
    loss from the current parameter values on every call and be deterministic.
    """
    params = list(params)
    first, second = f().item(), f().item()
    if first != second and not (math.isnan(first) and math.isnan(second)):
        raise ContractError(
            "grad_check requires a deterministic function (is dropout enabled?)"
        )
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        numeric = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
