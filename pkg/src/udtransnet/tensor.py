"""Dense tensors with reverse-mode automatic differentiation.

Everything downstream (token attention, the segmentation network, the
training loop) is built from the ops in this module. Arrays are NumPy,
float32 by default; gradient checking can run the same graph in float64.
All ops accept optional leading batch axes in front of the documented
shapes, so a (C, d) contract also works as (B, C, d).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

EPS_NORM = 1e-5


class ShapeError(ValueError):
    """Operand shapes are not compatible with the requested op."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward called on a detached or already-consumed graph."""


_grad_enabled = True
_nan_guard = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_nan_guard(enabled: bool) -> bool:
    """Toggle the per-op finiteness check; returns the previous setting."""
    global _nan_guard
    prev = _nan_guard
    _nan_guard = enabled
    return prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # float64 accumulator cannot overflow on finite float32 inputs, so a
    # non-finite sum pins down NaN/Inf without a full isfinite pass
    if _nan_guard and not np.isfinite(arr.sum(dtype=np.float64)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """N-d array with optional gradient tracking.

    ``data`` is immutable once the tensor participates in a forward graph;
    only ``grad`` accumulates. Gradient arrays are treated as immutable and
    rebound on accumulation, never mutated in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        elif arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        elif arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def eye(n, dtype=np.float32) -> "Tensor":
        return Tensor(np.eye(n, dtype=dtype))

    # -- basic protocol --------------------------------------------------------

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

    @property
    def mT(self) -> "Tensor":
        """Swap the last two axes (matrix transpose with batch dims intact)."""
        if self.ndim < 2:
            raise ShapeError("mT needs at least 2 dims")
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return transpose(self, axes)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        grad = "" if self.grad is None else ", grad set"
        return f"Tensor(shape={self.shape}, op={self._op}{grad})"

    # -- operators --------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    # -- autodiff ----------------------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        # rebind, never mutate: grad buffers may be aliased across the tape
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf with d(self)/d(leaf).

        ``self`` must be a scalar produced by tracked ops. The tape is
        consumed; call the forward pass again before another backward.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")
        if self._consumed:
            raise GraphError("tape already consumed; rerun the forward pass")
        if self._bwd is None:
            raise GraphError("backward on a detached graph (no tracked ops reach this tensor)")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p._bwd is not None or p.requires_grad):
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)
                node._bwd = None
                node._parents = ()
                if node is not self:
                    node.grad = None  # intermediate: free after use
        self._consumed = True


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.dtype:
        arr = arr.astype(like.dtype)
    return Tensor(arr)


def _node(data: np.ndarray, parents: Sequence[Tensor], bwd, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad or p._bwd is not None for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents) or any(
            p._bwd is not None for p in parents
        )
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_ok(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    """Exact shapes, a scalar operand, or one shape a trailing suffix of the other."""
    if sa == sb:
        return True
    if int(np.prod(sa)) == 1 or int(np.prod(sb)) == 1:
        return True
    short, long = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return len(short) < len(long) and long[len(long) - len(short):] == short


# -- elementwise family -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad or a._bwd is not None:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad or b._bwd is not None:
            b._accum(_unbroadcast(g, b.shape))

    return _node(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad or a._bwd is not None:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad or b._bwd is not None:
            b._accum(_unbroadcast(-g, b.shape))

    return _node(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad or a._bwd is not None:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._bwd is not None:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}")
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad or a._bwd is not None:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad or b._bwd is not None:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), bwd, "div")


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = a.data * s

    def bwd(g):
        a._accum(g * s)

    return _node(out, (a,), bwd, "scale")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)

    def bwd(g):
        a._accum(g * (a.data > 0))

    return _node(out, (a,), bwd, "relu")


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(a) -> Tensor:
    """Exact-erf GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        a._accum(g * (cdf + x * pdf).astype(x.dtype))

    return _node(out, (a,), bwd, "gelu")


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: add, mul, relu, gelu, scale."""
    table = {"add": add, "mul": mul, "relu": relu, "gelu": gelu, "scale": scale}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind '{kind}'")
    return table[kind](*args)


def add_bias(x, b, axis: int) -> Tensor:
    """Add a 1-d bias along ``axis`` of x (channel or token axis)."""
    x = _as_tensor(x)
    b = _as_tensor(b, like=x)
    ax = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit axis {axis} of {x.shape}")
    view = (1,) * ax + (b.shape[0],) + (1,) * (x.ndim - ax - 1)
    out = x.data + b.data.reshape(view)

    def bwd(g):
        if x.requires_grad or x._bwd is not None:
            x._accum(g)
        if b.requires_grad or b._bwd is not None:
            other = tuple(i for i in range(g.ndim) if i != ax)
            b._accum(g.sum(axis=other))

    return _node(out, (x, b), bwd, "add_bias")


# -- reductions / reshapes ----------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accum(np.full(a.shape, g, dtype=a.dtype) if np.ndim(g) == 0 else
                     np.broadcast_to(g, a.shape).copy())
        else:
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.shape).copy())

    return _node(np.asarray(out), (a,), bwd, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from e

    def bwd(g):
        a._accum(g.reshape(a.shape))

    return _node(out, (a,), bwd, "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a._accum(g.transpose(inv))

    return _node(out, (a,), bwd, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    sizes = [t.shape[axis] for t in ts]
    ax = axis % out.ndim

    def bwd(g):
        off = 0
        for t, s in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(off, off + s)
            off += s
            if t.requires_grad or t._bwd is not None:
                t._accum(g[tuple(sl)])

    return _node(out, ts, bwd, "concat")


def split(a, sections: int, axis: int) -> list[Tensor]:
    """Split into equal sections along axis; inverse of concat."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    if a.shape[ax] % sections != 0:
        raise ShapeError(f"split: axis {axis} size {a.shape[ax]} not divisible by {sections}")
    step = a.shape[ax] // sections
    outs = []
    for i in range(sections):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(i * step, (i + 1) * step)
        sl = tuple(sl)
        piece = a.data[sl].copy()

        def bwd(g, sl=sl):
            full = np.zeros(a.shape, dtype=a.dtype)
            full[sl] = g
            a._accum(full)

        outs.append(_node(piece, (a,), bwd, "split"))
    return outs


# -- normalizations ------------------------------------------------------------------


def softmax(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for ndim {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        gs = (g * out).sum(axis=axis, keepdims=True)
        a._accum(out * (g - gs))

    return _node(out, (a,), bwd, "softmax")


def instance_norm(a) -> Tensor:
    """Standardize each row (last axis) to mean 0, variance 1; no affine.

    Applied to attention similarity logits in place of 1/sqrt(d) scaling.
    A constant row maps to zeros (eps keeps the division finite).
    """
    a = _as_tensor(a)
    if a.ndim < 1 or a.shape[-1] < 2:
        raise ShapeError("instance_norm: rows need at least 2 elements")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + EPS_NORM)
    out = xc * inv
    n = a.shape[-1]

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        a._accum(inv * (g - gm - out * gy))

    return _node(out.astype(a.dtype), (a,), bwd, "instance_norm")


def layer_norm(a, gamma, beta, axis: int = -2) -> Tensor:
    """Normalize along ``axis`` (the channel axis of a token matrix) with affine."""
    a = _as_tensor(a)
    gamma = _as_tensor(gamma, like=a)
    beta = _as_tensor(beta, like=a)
    ax = axis % a.ndim
    c = a.shape[ax]
    if a.shape[ax] < 2:
        raise ShapeError("layer_norm: normalized axis needs at least 2 elements")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match axis size {c}")
    view = (1,) * ax + (c,) + (1,) * (a.ndim - ax - 1)
    mu = a.data.mean(axis=ax, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + EPS_NORM)
    xhat = xc * inv
    gview = gamma.data.reshape(view)
    out = xhat * gview + beta.data.reshape(view)
    other = None  # axes to reduce for affine grads

    def bwd(g):
        nonlocal other
        if other is None:
            other = tuple(i for i in range(g.ndim) if i != ax)
        if gamma.requires_grad or gamma._bwd is not None:
            gamma._accum((g * xhat).sum(axis=other))
        if beta.requires_grad or beta._bwd is not None:
            beta._accum(g.sum(axis=other))
        if a.requires_grad or a._bwd is not None:
            gh = g * gview
            gm = gh.mean(axis=ax, keepdims=True)
            gy = (gh * xhat).mean(axis=ax, keepdims=True)
            a._accum(inv * (gh - gm - xhat * gy))

    return _node(out.astype(a.dtype), (a, gamma, beta), bwd, "layer_norm")


# -- linear algebra --------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from e

    def bwd(g):
        if a.requires_grad or a._bwd is not None:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad or b._bwd is not None:
            b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), bwd, "matmul")


def linear_rows(x, w, b=None) -> Tensor:
    """y = x @ w (+ bias on the last axis): a learned map along the token axis."""
    y = matmul(x, w)
    return add_bias(y, b, axis=-1) if b is not None else y


def linear_cols(x, w, b=None) -> Tensor:
    """y = w @ x (+ bias on the channel axis): a learned map along the channel axis."""
    y = matmul(w, x)
    return add_bias(y, b, axis=-2) if b is not None else y


# -- spatial ops -------------------------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (..., c_in, h, w) with (c_out, c_in, k, k)."""
    x = _as_tensor(x)
    w = _as_tensor(w, like=x)
    if x.ndim < 3 or w.ndim != 4 or w.shape[-1] != w.shape[-2]:
        raise ShapeError(f"conv2d: bad ranks x{x.shape} w{w.shape}")
    co, ci, k, _ = w.shape
    if x.shape[-3] != ci:
        raise ShapeError(f"conv2d: input channels {x.shape[-3]} != kernel {ci}")
    h, wd = x.shape[-2], x.shape[-1]
    if k > h + 2 * pad or k > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    if (h + 2 * pad - k) % stride or (wd + 2 * pad - k) % stride:
        raise ShapeError(f"conv2d: non-integer output size for h={h} w={wd} k={k} s={stride} p={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1

    if pad:
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        xp = np.pad(x.data, widths)
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(-2, -1))
    win = win[..., ::stride, ::stride, :, :]          # (..., ci, ho, wo, k, k)
    win = np.moveaxis(win, -5, -3)                    # (..., ho, wo, ci, k, k)
    cols = win.reshape(win.shape[:-5] + (ho * wo, ci * k * k))
    wmat = w.data.reshape(co, ci * k * k)
    out = np.matmul(cols, wmat.T)                     # (..., ho*wo, co)
    out = np.swapaxes(out, -1, -2).reshape(x.shape[:-3] + (co, ho, wo))
    if b is not None:
        bt = _as_tensor(b, like=x)
        if bt.shape != (co,):
            raise ShapeError(f"conv2d: bias shape {bt.shape} != ({co},)")
        view = (co, 1, 1)
        out = out + bt.data.reshape(view)
    else:
        bt = None

    def bwd(g):
        gmat = np.swapaxes(g.reshape(g.shape[:-2] + (ho * wo,)), -1, -2)  # (..., ho*wo, co)
        if w.requires_grad or w._bwd is not None:
            dw = np.matmul(np.swapaxes(gmat, -1, -2), cols)               # (..., co, ci*k*k)
            dw = _unbroadcast(dw, (co, ci * k * k))
            w._accum(dw.reshape(w.shape))
        if bt is not None and (bt.requires_grad or bt._bwd is not None):
            axes = tuple(range(g.ndim - 3)) + (g.ndim - 2, g.ndim - 1)
            bt._accum(g.sum(axis=axes))
        if x.requires_grad or x._bwd is not None:
            dcols = np.matmul(gmat, wmat)                                 # (..., ho*wo, ci*k*k)
            dcols = dcols.reshape(dcols.shape[:-2] + (ho, wo, ci, k, k))
            dcols = np.moveaxis(dcols, -3, -5)                            # (..., ci, ho, wo, k, k)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxp[..., ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += dcols[..., ki, kj]
            if pad:
                dxp = dxp[..., pad:pad + h, pad:pad + wd]
            x._accum(dxp)

    parents = (x, w) if bt is None else (x, w, bt)
    return _node(out, parents, bwd, "conv2d")


def max_pool(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("max_pool needs spatial dims")
    h, w = x.shape[-2], x.shape[-1]
    if h % factor or w % factor:
        raise ShapeError(f"max_pool: dims {h}x{w} not divisible by {factor}")
    lead = x.shape[:-2]
    h2, w2 = h // factor, w // factor
    xr = x.data.reshape(lead + (h2, factor, w2, factor))
    xr = np.swapaxes(xr, -3, -2).reshape(lead + (h2, w2, factor * factor))
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dxr = np.zeros(lead + (h2, w2, factor * factor), dtype=x.dtype)
        np.put_along_axis(dxr, idx[..., None], g[..., None], axis=-1)
        dxr = np.swapaxes(dxr.reshape(lead + (h2, w2, factor, factor)), -3, -2)
        x._accum(dxr.reshape(x.shape))

    return _node(out, (x,), bwd, "max_pool")


def upsample_nearest(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("upsample needs spatial dims")
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def bwd(g):
        lead = x.shape[:-2]
        h, w = x.shape[-2], x.shape[-1]
        gr = g.reshape(lead + (h, factor, w, factor))
        x._accum(gr.sum(axis=(-3, -1)))

    return _node(out, (x,), bwd, "upsample_nearest")


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Interpolation operator (n_in*factor, n_in), align_corners=False."""
    n_out = n_in * factor
    r = np.zeros((n_out, n_in), dtype=np.float64)
    for dst in range(n_out):
        src = (dst + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        r[dst, i0] += 1.0 - t
        r[dst, i1] += t
    return r.astype(dtype)


def upsample_bilinear(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("upsample needs spatial dims")
    rh = _bilinear_matrix(x.shape[-2], factor, x.dtype)
    rw = _bilinear_matrix(x.shape[-1], factor, x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def bwd(g):
        x._accum(np.matmul(rh.T, np.matmul(g, rw)))

    return _node(out, (x,), bwd, "upsample_bilinear")


def resample(x, factor: int, mode: str) -> Tensor:
    """Spatial resampling: 'max_pool', 'nearest_up' or 'bilinear_up'."""
    if factor < 1:
        raise ShapeError(f"resample factor must be >= 1, got {factor}")
    if mode == "max_pool":
        return max_pool(x, factor)
    if mode == "nearest_up":
        return upsample_nearest(x, factor)
    if mode == "bilinear_up":
        return upsample_bilinear(x, factor)
    raise ValueError(f"unknown resample mode '{mode}'")


# -- losses ------------------------------------------------------------------------------


def cross_entropy_logits(logits, target: np.ndarray) -> Tensor:
    """Pixel-mean softmax cross-entropy.

    logits: (..., K, H, W); target: integer class ids (..., H, W).
    """
    logits = _as_tensor(logits)
    t = np.asarray(target)
    if t.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ShapeError(f"cross_entropy: target {t.shape} does not match logits {logits.shape}")
    k = logits.shape[-3]
    if t.min() < 0 or t.max() >= k:
        raise ValueError(f"cross_entropy: class id out of range [0, {k})")
    tid = t.astype(np.int64)

    z = logits.data - logits.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=-3, keepdims=True)
    logp = z - np.log(e.sum(axis=-3, keepdims=True))
    picked = np.take_along_axis(logp, tid[..., None, :, :], axis=-3)[..., 0, :, :]
    n = picked.size
    out = np.asarray(-picked.sum() / n, dtype=logits.dtype)

    def bwd(g):
        onehot = np.zeros_like(sm)
        np.put_along_axis(onehot, tid[..., None, :, :], 1.0, axis=-3)
        logits._accum((sm - onehot) * (float(g) / n))

    return _node(out, (logits,), bwd, "cross_entropy")


# -- numeric gradient checking --------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the given tensors to a scalar Tensor. The check runs in
    float64 copies of the inputs; any parameters captured by ``f`` should
    already be float64 for tight tolerances.
    """
    ins = [Tensor(t.data.astype(np.float64), requires_grad=True) for t in inputs]
    out = f(*ins)
    if out.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
                for t in ins]

    worst = 0.0
    for t, an in zip(ins, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f(*ins).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f(*ins).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(an.reshape(-1)[i])
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst
