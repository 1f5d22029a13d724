"""Dense tensors with reverse-mode automatic differentiation over numpy.

The compute graph is the tensor DAG itself: every tensor produced by an op
records the op name, its parent tensors, and a backward closure. Calling
``backward()`` on a scalar result walks the DAG in reverse topological order
and accumulates gradients into every tensor that requires them. Leaves are
float32 by default; creating leaves as float64 switches the whole graph to
64-bit (used by the verification oracles).

Deliberately small: 2-D matmul, a fixed set of elementwise ops, row/column
slicing and concatenation, reductions, softmax/layer-norm, embedding lookup,
and two fused losses. No broadcasting beyond scalar-with-tensor; anything
else needs an explicit op.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "grad_enabled", default=True
)


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class DomainError(ValueError):
    """Input outside an op's numeric domain (e.g. log of a non-positive)."""


class EvaluationError(RuntimeError):
    """A checked function produced a non-finite value."""


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return plain value tensors."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward",
                 "_backward_ran")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward_fn
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode gradient pass from a scalar root.

        Visits the graph in exact reverse topological order. A second call on
        the same root is rejected; rebuild the graph instead.
        """
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        if self._backward_ran:
            raise RuntimeError("backward() already ran on this graph root; "
                               "rebuild the graph before differentiating again")
        self._backward_ran = True
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def topo_order(root: Tensor) -> list[Tensor]:
    """Topological order of the DAG under ``root`` (parents before children)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward_fn: Callable) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents),
                      backward_fn=backward_fn)
    return Tensor(data, op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# creation helpers

def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, dtype=None,
          requires_grad: bool = False) -> Tensor:
    arr = (rng.standard_normal(shape) * std).astype(dtype or DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# binary elementwise ops (equal shapes, or scalar-with-tensor)

def _binary(a, b, op: str, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar")
    out = fwd(a.data, b.data)

    def bwd(g):
        ga = da(g, a.data, b.data)
        gb = db(g, a.data, b.data)
        if a.size == 1 and ga.shape != a.data.shape:
            ga = ga.sum().reshape(a.data.shape)
        if b.size == 1 and gb.shape != b.data.shape:
            gb = gb.sum().reshape(b.data.shape)
        _accum(a, ga)
        _accum(b, gb)

    return _make(out, op, (a, b), bwd)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    b_arr = b.data if isinstance(b, Tensor) else np.asarray(b)
    if np.any(b_arr == 0):
        raise DomainError("div: zero denominator")
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def bwd(g):
        _accum(x, g * c)

    return _make(out, "scale", (x,), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine shift: [n, m] + [m]. The one sanctioned non-scalar broadcast."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: got {x.shape} and {b.shape}")
    out = x.data + b.data[None, :]

    def bwd(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _make(out, "add_bias", (x, b), bwd)


# ---------------------------------------------------------------------------
# unary elementwise ops

def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                   np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = out.astype(z.dtype)

    def bwd(g):
        _accum(x, g * out * (1.0 - out))

    return _make(out, "sigmoid", (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z ** 2)
        dz = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t ** 2) * dinner
        _accum(x, g * dz)

    return _make(out.astype(z.dtype), "gelu", (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        _accum(x, g * out)

    return _make(out, "exp", (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        bad = float(x.data[x.data <= 0].flat[0])
        raise DomainError(f"log: non-positive input {bad}")
    out = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)

    return _make(out, "log", (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(x.data)

    def bwd(g):
        _accum(x, g * 0.5 / out)

    return _make(out, "sqrt", (x,), bwd)


# ---------------------------------------------------------------------------
# matmul, transpose, slicing, concatenation

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out, "matmul", (a, b), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: needs a 2-D tensor, got {x.shape}")
    out = x.data.T.copy()

    def bwd(g):
        _accum(x, g.T)

    return _make(out, "transpose", (x,), bwd)


def _slice(x: Tensor, axis: int, start: int, stop: int, op: str) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"{op}: needs a 2-D tensor, got {x.shape}")
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"{op}: range [{start}:{stop}] invalid for size {n}")
    sl = (slice(start, stop), slice(None)) if axis == 0 else (slice(None), slice(start, stop))
    out = x.data[sl].copy()

    def bwd(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _make(out, op, (x,), bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    return _slice(x, 0, start, stop, "slice_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    return _slice(x, 1, start, stop, "slice_cols")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts or any(p.ndim != 2 for p in parts):
        raise ShapeError("concat_cols: needs one or more 2-D tensors")
    if len({p.shape[0] for p in parts}) != 1:
        raise ShapeError("concat_cols: row counts differ")
    out = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, off:off + w])
            off += w

    return _make(out, "concat_cols", tuple(parts), bwd)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a [n, d] matrix."""
    vectors = [as_tensor(v) for v in vectors]
    if not vectors or any(v.ndim != 1 for v in vectors):
        raise ShapeError("stack_rows: needs one or more 1-D tensors")
    if len({v.shape[0] for v in vectors}) != 1:
        raise ShapeError("stack_rows: lengths differ")
    out = np.stack([v.data for v in vectors], axis=0)

    def bwd(g):
        for i, v in enumerate(vectors):
            _accum(v, g[i])

    return _make(out, "stack_rows", tuple(vectors), bwd)


# ---------------------------------------------------------------------------
# reductions and normalizations

def _sum_like(x: Tensor, axis, op: str) -> Tensor:
    if axis is not None and not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"{op}: axis {axis} invalid for shape {x.shape}")
    out = x.data.mean(axis=axis) if op == "mean" else x.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            gx = np.broadcast_to(g, x.data.shape).copy()
        else:
            gx = np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy()
        if op == "mean":
            n = x.data.size if axis is None else x.data.shape[axis]
            gx = gx / n
        _accum(x, gx)

    return _make(np.asarray(out, dtype=x.dtype), op, (x,), bwd)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    return _sum_like(x, axis, "sum")


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    return _sum_like(x, axis, "mean")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _make(out.astype(x.dtype), "softmax", (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g):
        _accum(x, g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out.astype(x.dtype), "log_softmax", (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a [n, d] tensor to mean 0 / variance 1, then affine."""
    if x.ndim != 2 or gain.ndim != 1 or bias.ndim != 1:
        raise ShapeError(f"layer_norm: got {x.shape}, {gain.shape}, {bias.shape}")
    if x.shape[1] != gain.shape[0] or x.shape[1] != bias.shape[0]:
        raise ShapeError("layer_norm: feature sizes disagree")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data[None, :] + bias.data[None, :]

    def bwd(g):
        gx_hat = g * gain.data[None, :]
        d = x.shape[1]
        gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True))
        _accum(x, gx.astype(x.dtype))
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))

    return _make(out.astype(x.dtype), "layer_norm", (x, gain, bias), bwd)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Pick rows of a [n, d] table; backward scatter-adds into the table grad."""
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: ids must be a flat sequence")
    n = table.shape[0]
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        raise IndexError(f"gather_rows: row id {int(idx[bad][0])} out of range "
                         f"for table with {n} rows")
    out = table.data[idx].copy()

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _make(out, "gather_rows", (table,), bwd)


# ---------------------------------------------------------------------------
# fused losses

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits, fused stable form.

    Per cell: max(z, 0) - z*y + log(1 + exp(-|z|)); gradient (sigmoid(z) - y)/count.
    """
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {y.shape}")
    z = logits.data
    cell = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(cell.mean(), dtype=logits.dtype)

    def bwd(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                       np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        _accum(logits, g * (sig - y) / z.size)

    return _make(out, "bce_with_logits", (logits,), bwd)


def nll_from_log_probs(log_probs: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of target column per row of [n, k] log-probs."""
    idx = np.asarray(targets, dtype=np.int64)
    n, k = log_probs.shape
    if idx.shape != (n,):
        raise ShapeError(f"nll: expected {n} targets, got {idx.shape}")
    bad = (idx < 0) | (idx >= k)
    if bad.any():
        raise IndexError(f"nll: target id {int(idx[bad][0])} out of range for {k} classes")
    rows = np.arange(n)
    out = np.asarray(-log_probs.data[rows, idx].mean(), dtype=log_probs.dtype)

    def bwd(g):
        gl = np.zeros_like(log_probs.data)
        gl[rows, idx] = -g / n
        _accum(log_probs, gl)

    return _make(out, "nll", (log_probs,), bwd)


# ---------------------------------------------------------------------------
# verification oracle

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar function against central
    finite differences. Returns the max relative error over all elements.

    Must run in 64-bit mode: every checked tensor has to be float64.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 tensors (64-bit mode)")
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise EvaluationError("grad_check: function value is not finite")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise EvaluationError("grad_check: non-finite value during perturbation")
            numeric = (hi - lo) / (2.0 * eps)
            ana = float(a.reshape(-1)[i])
            denom = max(abs(ana), abs(numeric), 1e-6)
            worst = max(worst, abs(ana - numeric) / denom)
    return worst


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
