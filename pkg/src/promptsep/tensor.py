"""Dense float64 tensors with a reverse-mode gradient tape.

Every op takes and returns :class:`Tensor`.  When none of the inputs requires
a gradient (or grad recording is disabled via :func:`no_grad`) the result is
a plain leaf with no parents and no backward closure, so frozen computations
never allocate gradient state.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(like.shape, float(arr))
    return Tensor(arr)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if getattr(_state, "enabled", True) and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out.grad = None
    return out


class Tape:
    """Operations reachable from a root, in topological (production) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf reachable from root."""
    if root.data.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    Tape.from_root(root).replay(root)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.shape[-1:] == b.shape:
        n = b.shape[0]
        return _make(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth everywhere, unlike relu."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


# ------------------------------------------------------------------ reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def sum_along(a: Tensor, axis: int) -> Tensor:
    shape = a.shape
    axis = axis % a.data.ndim

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    if a.data.ndim == 1:
        return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _make(a.data.sum(axis=axis), (a,), bw)


def mean_along(a: Tensor, axis: int = 1) -> Tensor:
    """Average over one axis; the axis is removed from the result."""
    n = a.shape[axis]
    return scale(sum_along(a, axis), 1.0 / n)


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of a[b, :, d] over positions where mask[b, :] is true."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape[:2]:
        raise ShapeError(f"masked_mean: mask {m.shape} does not match tensor {a.shape}")
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ShapeError("masked_mean: a row has no valid positions")
    w = (m / counts[:, None])[:, :, None]
    return _make((a.data * w).sum(axis=1), (a,), lambda g: (g[:, None, :] * w,))


# --------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``(..., m, k) @ (k, n)`` (shared right operand) and batched
    ``(B, m, k) @ (B, k, n)``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if bd.ndim == 2:
        k, n = bd.shape

        a2 = ad.reshape(-1, k)   # one 2-D GEMM instead of a loop over leading axes

        def bw(g):
            g2 = g.reshape(-1, n)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), bw)
    if ad.ndim != bd.ndim or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ between {a.shape} and {b.shape}")

    def bwb(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), bwb)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(y, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors:
        if t.data.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""
    axis = axis % a.data.ndim
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    index = (slice(None),) * axis + (slice(start, stop),)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _make(a.data[index], (a,), bw)


def expand(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` along a new leading axis of size n."""
    y = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make(y, (a,), lambda g: (g.sum(axis=0),))


# ------------------------------------------------------------------- indexing


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), bw)


gather_rows = embedding


def take_positions(a: Tensor, positions) -> Tensor:
    """For a (b, o, d) tensor return out[i] = a[i, positions[i]] with shape (b, d)."""
    pos = np.asarray(positions, dtype=np.int64)
    b = a.shape[0]
    if pos.shape != (b,):
        raise ShapeError(f"take_positions: need {b} positions, got shape {pos.shape}")
    if np.any(pos < 0) or np.any(pos >= a.shape[1]):
        raise ShapeError(f"take_positions: position out of range for length {a.shape[1]}")
    rows = np.arange(b)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, pos] = g
        return (out,)

    return _make(a.data[rows, pos], (a,), bw)


def take_columns(a: Tensor, cols) -> Tensor:
    """Select columns of the last axis: out[..., j] = a[..., cols[j]]."""
    c = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, (Ellipsis, c), g)
        return (out,)

    return _make(a.data[..., c], (a,), bw)


def pick(a: Tensor, index) -> Tensor:
    """For a (b, n) tensor return out[i] = a[i, index[i]]."""
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _make(a.data[rows, idx], (a,), bw)


# ------------------------------------------------------------------ softmaxes


def _check_finite(x: np.ndarray, op: str) -> None:
    # A finite sum is the cheap common case; only then is the full scan skipped.
    if not np.isfinite(x.sum()) and not np.isfinite(x).all():
        raise NumericError(f"{op}: input contains NaN or Inf")


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (broadcastable, bool) drops entries."""
    x = a.data
    _check_finite(x, "softmax_rows")
    if mask is not None:
        if mask.shape != x.shape:
            mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("softmax_rows: a row has no unmasked entries")
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw)


def log_softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax over the last axis.  Masked entries are excluded from the
    normalizer and read as 0 in the output (with zero gradient)."""
    x = a.data
    _check_finite(x, "log_softmax_rows")
    if mask is not None:
        if mask.shape != x.shape:
            mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=-1).all():
            raise ContractError("log_softmax_rows: a row has no unmasked entries")
        xm = np.where(mask, x, -np.inf)
    else:
        xm = x
    m = xm.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(xm - m).sum(axis=-1, keepdims=True))
    y = x - lse
    p = np.exp(xm - lse)
    if mask is not None:
        y = np.where(mask, y, 0.0)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), bw)


# -------------------------------------------------------------- normalization


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if d == 0 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape}, gain {gain.shape}, bias {bias.shape}")
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    x = a.data
    r = 1.0 / d
    xc = x - x.sum(axis=-1, keepdims=True) * r
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) * r + eps)
    xhat = xc * inv
    gd = gain.data
    y = xhat * gd + bias.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.sum(axis=-1, keepdims=True) * r
                    - xhat * ((dxhat * xhat).sum(axis=-1, keepdims=True) * r))
        g2 = g.reshape(-1, d)
        return dx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(y, (a, gain, bias), bw)


def l2_normalize_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    """x / max(||x||, eps) along the last axis."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    clipped = norm <= eps
    denom = np.where(clipped, eps, norm)
    y = x / denom

    def bw(g):
        proj = np.where(clipped, 0.0, (g * y).sum(axis=-1, keepdims=True))
        return ((g - y * proj) / denom,)

    return _make(y, (a,), bw)


# ------------------------------------------------------------ gradient check


def finite_difference(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                      evaluators: Sequence[Callable[[], Tensor]] | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Analytic and central-difference gradients, flattened over ``params``.

    ``f`` must rebuild the graph from ``params`` on each call.  ``evaluators``
    optionally gives, per parameter, a cheaper function used for that
    parameter's perturbed evaluations (for example one that reuses
    intermediate results the parameter cannot influence).  Each must return
    exactly ``f()``'s value at the unperturbed point.
    """
    if h <= 0:
        raise ContractError("grad_check: h must be positive")
    params = list(params)
    evals = [f] * len(params) if evaluators is None else list(evaluators)
    if len(evals) != len(params):
        raise ContractError("grad_check: one evaluator per parameter required")
    for p in params:
        p.zero_grad()
    root = f()
    with no_grad():
        again = f()
        if not np.array_equal(root.data, again.data):
            raise ContractError("grad_check: f is not deterministic")
        for g in {id(g): g for g in evals}.values():
            if not np.array_equal(g().data, root.data):
                raise ContractError("grad_check: an evaluator disagrees with f at the base point")
    backward(root)
    analytic, numeric = [], []
    with no_grad():
        for p, g in zip(params, evals):
            analytic.append(p.grad.reshape(-1).copy())
            flat = p.data.reshape(-1)
            num = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = g().item()
                flat[i] = orig - h
                fm = g().item()
                flat[i] = orig
                num[i] = (fp - fm) / (2 * h)
            numeric.append(num)
    return np.concatenate(analytic), np.concatenate(numeric)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|, 1e-8), entrywise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    a, n = finite_difference(f, params, h)
    return float(relative_errors(a, n).max()) if a.size else 0.0
