"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a closure computing
the input adjoints from the output adjoint. ``backward`` orders the recorded
graph topologically (the tape) and replays the closures in reverse.

Broadcasting is restricted to leading batch dimensions: a binary op accepts
operands whose shapes are equal, or where the lower-rank shape equals the
trailing dimensions of the other (e.g. a bias of shape ``(d,)`` added to
``(B, N, d)``). Scalars (python numbers) are always accepted.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# -- tape ------------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Return the nodes reachable from ``root`` in topological order.

    Reversing the list visits every node after all of its consumers.
    """
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Repeated calls accumulate; clear with ``zero_grad``.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    adj: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(build_tape(loss)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg


# -- broadcasting helpers ------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{name}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _operands(a, b):
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    dtype = (ta if ta is not None else tb).dtype
    if ta is None:
        ta = Tensor(np.asarray(a, dtype=dtype))
    if tb is None:
        tb = Tensor(np.asarray(b, dtype=dtype))
    return ta, tb


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def abs_(x: Tensor) -> Tensor:
    """Absolute value; the derivative at exactly 0 is taken as 0."""
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def gelu(x: Tensor, approximate: str = "none") -> Tensor:
    """GELU; ``approximate="tanh"`` selects the cheaper tanh form."""
    z = x.data
    if approximate == "tanh":
        c = np.sqrt(2.0 / np.pi).astype(z.dtype)
        inner = c * (z + 0.044715 * z * z * z)
        t = np.tanh(inner)
        out = 0.5 * z * (1.0 + t)

        def bw(g):
            dinner = c * (1.0 + 3 * 0.044715 * z * z)
            return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * dinner),)

        return _make(out, (x,), bw, "gelu")
    if approximate != "none":
        raise ValueError(f"unknown GELU approximation {approximate!r}")
    cdf = (0.5 * (1.0 + erf(z / _SQRT2))).astype(z.dtype, copy=False)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)

    def bw_exact(g):
        return (g * (cdf + z * pdf),)

    return _make(z * cdf, (x,), bw_exact, "gelu")


# -- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / count)


# -- shape manipulation ------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def slice_(x: Tensor, index) -> Tensor:
    """Basic (and integer-array) indexing."""
    out = np.array(x.data[index], copy=True)
    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(not isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def bw(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return _make(out, (x,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        sl = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            parts.append(np.ascontiguousarray(g[tuple(sl)]))
        return parts

    return _make(out, tuple(tensors), bw, "concat")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Batched row gather: ``out[b, i] = x[b, index[b, i]]`` for x of shape (B, N, ...)."""
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: index {index.shape} vs input {x.shape}")
    B, N = x.shape[:2]
    flat = (index + N * np.arange(B)[:, None]).ravel()
    rest = x.shape[2:]
    out = x.data.reshape((B * N,) + rest)[flat].reshape(index.shape + rest)

    unique = np.bincount(flat, minlength=B * N).max(initial=0) <= 1

    def bw(g):
        gx = np.zeros((B * N,) + rest, dtype=g.dtype)
        if unique:
            gx[flat] = g.reshape((-1,) + rest)
        else:
            np.add.at(gx, flat, g.reshape((-1,) + rest))
        return (gx.reshape(x.shape),)

    return _make(out, (x,), bw, "gather_rows")


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: ``out[..., :] = table[index[...], :]`` for a 2-D table."""
    index = np.asarray(index, dtype=np.intp)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-D, got {table.shape}")
    n, d = table.shape
    out = table.data[index]

    def bw(g):
        onehot = np.zeros((index.size, n), dtype=g.dtype)
        onehot[np.arange(index.size), index.ravel()] = 1
        return (onehot.T @ g.reshape(-1, d),)

    return _make(out, (table,), bw, "take_rows")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is (..., m, k). ``b`` is either (k, n), shared across the batch,
    or (..., k, n) with the same leading dimensions as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    if a.ndim == 2 and b.ndim > 2:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max subtraction. NaN inputs propagate to NaN outputs."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    d = x.shape[-1]

    def bw(g):
        gx = rstd * (g - g.mean(axis=-1, keepdims=True)
                     - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        return (gx,)

    out = _make(xhat, (x,), bw, "layer_norm")
    if gain is not None:
        if gain.shape != (d,):
            raise DimensionError(f"layer_norm: gain {gain.shape} vs features {d}")
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (n, C)."""
    labels = np.asarray(labels, dtype=np.intp)
    lp = log_softmax(logits, axis=-1)
    picked = slice_(lp, (np.arange(len(labels)), labels))
    return mul(sum_(picked), -1.0 / len(labels))


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def numerical_gradient(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                       indices: Iterable[int] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``param`` (in place perturbation)."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``||a-b|| / max(||a||, ||b||)``; 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)

