"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    x.grad  # 2 * x

Outside a tape every op is a plain forward computation (inference mode).
Layout is channels-first, row-major; broadcasting is limited to missing
leading dimensions.
"""

import contextvars
import math

import numpy as np
from scipy.special import erf

from . import kernels
from .errors import GraphError, NumericError, ShapeError

_ACTIVE_TAPE = contextvars.ContextVar("volformer_active_tape", default=None)


class Tensor:
    """A float array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return mul(self, 1.0 / other)

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

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self):
        return sum_(self)

    def mean(self, axis=None):
        return mean(self, axis)


class _Node:
    __slots__ = ("op", "parents", "backward_fn", "tape")

    def __init__(self, op, parents, backward_fn, tape):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as ops execute, so the record is already in
    topological order and backward is a single reverse sweep.
    """

    def __init__(self):
        self.nodes = []
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        backward(loss, self)

    def clear(self):
        self.nodes = []


def active_tape():
    return _ACTIVE_TAPE.get()


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise GraphError("loss must be a Tensor")
    if loss.size != 1 or loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._node.tape is not tape:
        raise GraphError("loss was not computed under this tape (detached graph)")
    grads = {loss._node: np.ones((), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        gout = grads.pop(node, None)
        if gout is None:
            continue
        parent_grads = node.backward_fn(gout)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.shape:
                raise GraphError(
                    f"{node.op} backward produced grad {g.shape} for input {parent.shape}"
                )
            _check_finite(g, node.op + " backward")
            pnode = parent._node
            if pnode is not None:
                if pnode in grads:
                    grads[pnode] = grads[pnode] + g
                else:
                    grads[pnode] = g
            elif parent.grad is None:
                parent.grad = np.array(g, dtype=parent.dtype, copy=True)
            else:
                parent.grad = parent.grad + g


def _check_finite(arr, op):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _make(op, data, parents, backward_fn):
    """Wrap an op result and record it on the active tape when needed."""
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, tuple(parents), backward_fn, tape)
        tape.nodes.append(out._node)
    return out


def custom_op(op, data, parents, backward_fn):
    """Public hook for fused ops defined outside this module.

    ``backward_fn(gout)`` must return one gradient array (or None) per parent.
    """
    return _make(op, np.asarray(data), parents, backward_fn)


def _check_leading_broadcast(a_shape, b_shape, op):
    short, long_ = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(
            f"{op}: shapes {a_shape} and {b_shape} differ beyond missing leading dims"
        )
    return long_


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "sub")

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_leading_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, b.shape) if b.requires_grad else None,
        )

    return _make("mul", ad * bd, (a, b), bw)


def matmul(a, b):
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    _check_leading_broadcast(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bw)


def sum_(x):
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), bw)


def mean(x, axis=None):
    if axis is None:
        n = x.size

        def bw(g):
            return (np.full(x.shape, g / n, dtype=x.dtype),)

        return _make("mean", np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw)
    axis = _norm_axis(axis, x.ndim)
    n = x.shape[axis]

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).astype(x.dtype),)

    return _make("mean", x.data.mean(axis=axis), (x,), bw)


def _norm_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# --------------------------------------------------------------- activations


def softmax(x, axis=-1):
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({c},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, c).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return _make("layer_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf-based) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _make("gelu", (xd * cdf).astype(x.dtype, copy=False), (x,), bw)


def leaky_relu(x, slope=0.2):
    xd = x.data
    pos = xd >= 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)

    def bw(g):
        return (g * scale,)

    return _make("leaky_relu", xd * scale, (x,), bw)


# ------------------------------------------------------------ shape handling


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), bw)


def permute(x, axes):
    axes = tuple(int(a) for a in axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)) or len(axes) != x.ndim:
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def roll3d(x, shifts, axes=(0, 1, 2)):
    """Cyclic shift along three axes (torus topology)."""
    if len(shifts) != 3 or len(axes) != 3:
        raise ShapeError("roll3d needs exactly three shifts and three axes")
    axes = tuple(_norm_axis(a, x.ndim) for a in axes)
    shifts = tuple(int(s) for s in shifts)
    if not any(shifts):
        return x
    neg = tuple(-s for s in shifts)

    def bw(g):
        return (np.roll(g, neg, axis=axes),)

    return _make("roll3d", np.roll(x.data, shifts, axis=axes), (x,), bw)


def slice_(x, index):
    """Basic (non-fancy) indexing."""
    if not isinstance(index, tuple):
        index = (index,)
    for item in index:
        if not isinstance(item, (int, np.integer, slice, type(Ellipsis))):
            raise ShapeError(f"slice only supports ints, slices and Ellipsis, got {item!r}")
    out = np.ascontiguousarray(x.data[index])

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[index] = g
        return (gx,)

    return _make("slice", out, (x,), bw)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = _norm_axis(axis, tensors[0].ndim)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _make("concat", out, tuple(tensors), bw)


def gather_rows(table, index):
    """``table[index]`` for an integer index array; scatter-add backward."""
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table of {table.shape[0]} rows")

    def bw(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, index.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (gt,)

    return _make("gather_rows", table.data[index], (table,), bw)


# ----------------------------------------------------------- volumetric ops


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int or three ints, got {v}")
    return v


def conv3d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of ``x[C_in,H,W,D]`` with ``w[C_out,C_in,kh,kw,kd]``."""
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d expects x[C,H,W,D] and w[O,C,k,k,k], got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: input has {x.shape[0]} channels, weight expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv3d: bias shape {b.shape} != ({w.shape[0]},)")
    if x.dtype != w.dtype:
        raise ShapeError(f"conv3d: dtype mismatch {x.dtype} vs {w.dtype}")
    stride = _triple(stride)
    pad = _triple(padding)
    kernel = w.shape[2:]
    for n, k, p in zip(x.shape[1:], kernel, pad):
        if n + 2 * p < k:
            raise ShapeError(f"conv3d: kernel {kernel} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0),) + tuple((p, p) for p in pad)) if any(pad) else x.data
    out = kernels.conv3d_forward(xp, w.data, stride)
    if b is not None:
        out += b.data[:, None, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = kernels.conv3d_backward_input(g, w.data, stride, xp.shape)
            gx = gxp[
                :,
                pad[0] : pad[0] + x.shape[1],
                pad[1] : pad[1] + x.shape[2],
                pad[2] : pad[2] + x.shape[3],
            ]
            gx = np.ascontiguousarray(gx)
        if w.requires_grad:
            gw = kernels.conv3d_backward_weight(xp, g, kernel, stride)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2, 3))

    return _make("conv3d", out, parents, bw)


def linear_interp_matrix(n_in, n_out, dtype=np.float64):
    """1-D linear resampling matrix ``[n_out, n_in]`` (half-voxel centres,
    sample positions clamped to the input extent)."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    t = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - t)
    np.add.at(m, (rows, hi), t)
    return m.astype(dtype)


def resize_trilinear_array(arr, size):
    """Trilinear resize of the last three axes of a numpy array."""
    mh, mw, md = (linear_interp_matrix(n, s, arr.dtype) for n, s in zip(arr.shape[-3:], size))
    return _apply_separable(arr, mh, mw, md)


def _apply_separable(arr, mh, mw, md):
    lead = arr.shape[:-3]
    h, w, d = arr.shape[-3:]
    y = arr.reshape((-1, h, w * d))
    y = (mh @ y).reshape((-1, mh.shape[0], w, d))
    y = mw @ y
    y = y @ md.T
    return y.reshape(lead + (mh.shape[0], mw.shape[0], md.shape[0]))


def upsample_trilinear(x, size):
    """Differentiable trilinear resize of ``x[C,h,w,d]`` to ``size``."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_trilinear expects [C,h,w,d], got {x.shape}")
    size = _triple(size)
    mh, mw, md = (linear_interp_matrix(n, s, x.dtype) for n, s in zip(x.shape[1:], size))

    def bw(g):
        return (_apply_separable(g, mh.T, mw.T, md.T),)

    return _make("upsample_trilinear", _apply_separable(x.data, mh, mw, md), (x,), bw)
