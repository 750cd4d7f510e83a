"""Dense float32 tensor arithmetic with reverse-mode gradients.

Every operation runs eagerly on numpy float32 arrays and, when any input
is attached to a GradTape, appends a replayable record to that tape.
Forward passes are bit-deterministic: reductions use a fixed summation
order (matmul and conv accumulate strictly left-to-right over the
contraction axis), so two runs over the same inputs produce identical
bytes.  grad() walks the tape in reverse to return dLoss/dLeaf.

Tensors are immutable once produced; a tape is confined to one thread.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

F32 = np.float32


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible."""


class UnknownLeafError(ValueError):
    """Raised when grad() is asked about a tensor that is not a tape leaf."""


def _shape_error(op, *shapes):
    return ShapeMismatchError(f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes))


# ---------------------------------------------------------------------------
# forward kernels (dtype-parameterized so a tape can be replayed in float64,
# which the finite-difference test oracles rely on)
# ---------------------------------------------------------------------------

def _mm(a, b, dtype):
    """Matrix product with strict left-to-right accumulation over k."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=dtype)
    tmp = np.empty((m, n), dtype=dtype)
    for kk in range(k):
        np.multiply(a[:, kk, np.newaxis], b[np.newaxis, kk, :], out=tmp)
        out += tmp
    return out


def _im2col(x, stride):
    """3x3 patches of a padded (C,H,W) map as a (C*9, Ho*Wo) matrix."""
    c, h, w = x.shape
    ho, wo = h // stride, w // stride
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, ho, wo), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, dy * 3 + dx] = xp[:, dy:dy + stride * ho:stride, dx:dx + stride * wo:stride]
    return cols.reshape(c * 9, ho * wo)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class _Op:
    def __init__(self, name, forward, vjp):
        self.name = name
        self.forward = forward  # (arrays, params, dtype) -> array
        self.vjp = vjp          # (arrays, params, out, g) -> per-input grads


def _fwd_add(a, p, dt):
    return a[0] + a[1]


def _fwd_sub(a, p, dt):
    return a[0] - a[1]


def _fwd_mul(a, p, dt):
    return a[0] * a[1]


def _fwd_neg(a, p, dt):
    return -a[0]


def _fwd_matmul(a, p, dt):
    return _mm(a[0], a[1], dt)


def _fwd_conv2d(a, p, dt):
    x, w = a
    s = p["stride"]
    co = w.shape[0]
    c, h, _ = x.shape
    cols = _im2col(x, s)
    out = _mm(w.reshape(co, -1), cols, dt)
    return out.reshape(co, h // s, x.shape[2] // s)


def _fwd_silu(a, p, dt):
    sg = _sigmoid(a[0])
    return a[0] * sg


def _fwd_softmax_last(a, p, dt):
    x = a[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_reshape(a, p, dt):
    return a[0].reshape(p["shape"])


def _fwd_transpose2d(a, p, dt):
    return np.ascontiguousarray(a[0].T)


def _fwd_take_flat(a, p, dt):
    return a[0].reshape(-1)[p["idx"]].reshape(p["out_shape"])


def _fwd_take_axis(a, p, dt):
    return np.take(a[0], p["idx"], axis=p["axis"])


def _fwd_mean_axes(a, p, dt):
    return a[0].mean(axis=p["axes"], keepdims=p["keepdims"], dtype=dt)


def _fwd_sum_all(a, p, dt):
    return np.asarray(a[0].sum(dtype=dt), dtype=dt)


def _fwd_mean_all(a, p, dt):
    return np.asarray(a[0].mean(dtype=dt), dtype=dt)


def _fwd_rsqrt_eps(a, p, dt):
    return 1.0 / np.sqrt(a[0] + dt(p["eps"]))


def _fwd_clip01(a, p, dt):
    return np.clip(a[0], 0.0, 1.0)


def _vjp_add(a, p, out, g):
    return _unbroadcast(g, a[0].shape), _unbroadcast(g, a[1].shape)


def _vjp_sub(a, p, out, g):
    return _unbroadcast(g, a[0].shape), _unbroadcast(-g, a[1].shape)


def _vjp_mul(a, p, out, g):
    return _unbroadcast(g * a[1], a[0].shape), _unbroadcast(g * a[0], a[1].shape)


def _vjp_neg(a, p, out, g):
    return (-g,)


def _vjp_matmul(a, p, out, g):
    # Backward order is unconstrained; BLAS matmul is deterministic in-build.
    return np.matmul(g, a[1].T), np.matmul(a[0].T, g)


def _vjp_conv2d(a, p, out, g):
    x, w = a
    s = p["stride"]
    co = w.shape[0]
    c, h, wd = x.shape
    ho, wo = h // s, wd // s
    cols = _im2col(x, s)
    gf = g.reshape(co, -1)
    dw = np.matmul(gf, cols.T).reshape(w.shape)
    dcols = np.matmul(w.reshape(co, -1).T, gf).reshape(c, 3, 3, ho, wo)
    dxp = np.zeros((c, h + 2, wd + 2), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + s * ho:s, dx:dx + s * wo:s] += dcols[:, dy, dx]
    return dxp[:, 1:h + 1, 1:wd + 1], dw


def _vjp_silu(a, p, out, g):
    sg = _sigmoid(a[0])
    return (g * (sg * (1.0 + a[0] * (1.0 - sg))),)


def _vjp_softmax_last(a, p, out, g):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return (out * (g - dot),)


def _vjp_reshape(a, p, out, g):
    return (g.reshape(a[0].shape),)


def _vjp_transpose2d(a, p, out, g):
    return (np.ascontiguousarray(g.T),)


def _vjp_take_flat(a, p, out, g):
    dx = np.zeros(a[0].size, dtype=a[0].dtype)
    np.add.at(dx, p["idx"], g.reshape(-1))
    return (dx.reshape(a[0].shape),)


def _vjp_take_axis(a, p, out, g):
    ax = p["axis"]
    dx = np.zeros(a[0].shape, dtype=a[0].dtype)
    dxm = np.moveaxis(dx, ax, 0)
    np.add.at(dxm, p["idx"], np.moveaxis(g, ax, 0))
    return (dx,)


def _vjp_mean_axes(a, p, out, g):
    x = a[0]
    axes = p["axes"]
    n = 1
    for ax in axes:
        n *= x.shape[ax]
    if not p["keepdims"]:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g, x.shape).astype(x.dtype) / x.dtype.type(n),)


def _vjp_sum_all(a, p, out, g):
    return (np.full(a[0].shape, g, dtype=a[0].dtype),)


def _vjp_mean_all(a, p, out, g):
    return (np.full(a[0].shape, g / a[0].dtype.type(a[0].size), dtype=a[0].dtype),)


def _vjp_rsqrt_eps(a, p, out, g):
    return (g * (-0.5) * out * out * out,)


def _vjp_clip01(a, p, out, g):
    x = a[0]
    return (g * ((x > 0.0) & (x < 1.0)),)


_OPS = {
    "add": _Op("add", _fwd_add, _vjp_add),
    "sub": _Op("sub", _fwd_sub, _vjp_sub),
    "mul": _Op("mul", _fwd_mul, _vjp_mul),
    "neg": _Op("neg", _fwd_neg, _vjp_neg),
    "matmul": _Op("matmul", _fwd_matmul, _vjp_matmul),
    "conv2d": _Op("conv2d", _fwd_conv2d, _vjp_conv2d),
    "silu": _Op("silu", _fwd_silu, _vjp_silu),
    "softmax_last": _Op("softmax_last", _fwd_softmax_last, _vjp_softmax_last),
    "reshape": _Op("reshape", _fwd_reshape, _vjp_reshape),
    "transpose2d": _Op("transpose2d", _fwd_transpose2d, _vjp_transpose2d),
    "take_flat": _Op("take_flat", _fwd_take_flat, _vjp_take_flat),
    "take_axis": _Op("take_axis", _fwd_take_axis, _vjp_take_axis),
    "mean_axes": _Op("mean_axes", _fwd_mean_axes, _vjp_mean_axes),
    "sum_all": _Op("sum_all", _fwd_sum_all, _vjp_sum_all),
    "mean_all": _Op("mean_all", _fwd_mean_all, _vjp_mean_all),
    "rsqrt_eps": _Op("rsqrt_eps", _fwd_rsqrt_eps, _vjp_rsqrt_eps),
    "clip01": _Op("clip01", _fwd_clip01, _vjp_clip01),
}


# ---------------------------------------------------------------------------
# tensors and the tape
# ---------------------------------------------------------------------------

class Tensor:
    """Immutable float32 array, optionally attached to a GradTape node."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape=None, node=None):
        arr = np.asarray(data, dtype=F32)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tracked={self.tape is not None})"

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

    def __neg__(self):
        return _apply("neg", (self,))

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("op", "inputs", "params", "out")

    def __init__(self, op, inputs, params, out):
        self.op = op
        self.inputs = inputs
        self.params = params
        self.out = out


class GradTape:
    """Ordered record of primitive ops; supports grad() and replay().

    Node values are kept so the recorded computation can be re-executed
    (optionally at float64) and so vjp closures can read their operands.
    """

    def __init__(self):
        self.values = []
        self.records = []
        self._n_base = 0  # nodes created as leaves/constants

    def leaf(self, data) -> Tensor:
        """Register a trainable input; grad() can differentiate w.r.t. it."""
        arr = np.asarray(data, dtype=F32)
        nid = self._new_node(arr)
        return Tensor(arr, self, nid)

    def constant(self, data) -> Tensor:
        """Register a fixed input (participates in replay, can be graded too)."""
        return self.leaf(data)

    def _new_node(self, arr):
        self.values.append(arr)
        return len(self.values) - 1

    def _node_for(self, t):
        if isinstance(t, Tensor):
            if t.tape is self:
                return t.node
            if t.tape is not None:
                raise ValueError("tensor belongs to a different tape")
            return self._new_node(t.data)
        return self._new_node(np.asarray(t, dtype=F32))

    def replay(self, overrides=None, dtype=F32):
        """Re-execute every record; returns the full node-value list.

        overrides maps node id -> replacement array for leaf/constant nodes.
        dtype float64 gives a high-precision evaluation of the identical
        computation, which finite-difference oracles use.
        """
        overrides = overrides or {}
        vals = [None] * len(self.values)
        produced = {rec.out for rec in self.records}
        for i, v in enumerate(self.values):
            if i not in produced:
                src = overrides.get(i, v)
                vals[i] = np.asarray(src, dtype=dtype)
        for rec in self.records:
            op = _OPS[rec.op]
            args = [vals[j] for j in rec.inputs]
            vals[rec.out] = op.forward(args, rec.params, dtype)
        return vals


def _apply(op_name, inputs, **params):
    op = _OPS[op_name]
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands come from different tapes")
            tape = t.tape
    arrays = [t.data if isinstance(t, Tensor) else np.asarray(t, dtype=F32) for t in inputs]
    _validate(op_name, arrays, params)
    out = op.forward(arrays, params, F32)
    if tape is None:
        return Tensor(out)
    ids = [tape._node_for(t) for t in inputs]
    out_id = tape._new_node(out)
    tape.records.append(_Record(op_name, ids, params, out_id))
    return Tensor(out, tape, out_id)


def _validate(op_name, arrays, params):
    if op_name in ("add", "sub", "mul"):
        try:
            np.broadcast_shapes(arrays[0].shape, arrays[1].shape)
        except ValueError:
            raise _shape_error(op_name, arrays[0].shape, arrays[1].shape) from None
    elif op_name == "matmul":
        a, b = arrays
        if a.ndim != 2 or b.ndim != 2:
            raise _shape_error("matmul", a.shape, b.shape)
        if a.shape[1] != b.shape[0]:
            raise _shape_error("matmul", a.shape, b.shape)
    elif op_name == "conv2d":
        x, w = arrays
        if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
            raise _shape_error("conv2d", x.shape, w.shape)
        if x.shape[0] != w.shape[1]:
            raise _shape_error("conv2d", x.shape, w.shape)
        s = params["stride"]
        if s not in (1, 2):
            raise ValueError(f"conv2d: stride must be 1 or 2, got {s}")
        if x.shape[1] % s or x.shape[2] % s:
            raise _shape_error("conv2d(stride)", x.shape, w.shape)
    elif op_name == "reshape":
        if int(np.prod(params["shape"])) != arrays[0].size:
            raise _shape_error("reshape", arrays[0].shape, params["shape"])
    elif op_name == "transpose2d":
        if arrays[0].ndim != 2:
            raise _shape_error("transpose2d", arrays[0].shape)
    elif op_name == "take_flat":
        idx = params["idx"]
        if idx.size and (idx.min() < 0 or idx.max() >= arrays[0].size):
            raise IndexError("take_flat: index out of range")


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def matmul(a, b):
    """Matrix product, summation fixed left-to-right over the inner axis."""
    return _apply("matmul", (a, b))


def conv2d(x, w, stride=1):
    """3x3 convolution over a (C,H,W) map, padding 1, stride 1 or 2."""
    return _apply("conv2d", (x, w), stride=stride)


def silu(x):
    return _apply("silu", (x,))


def softmax_last(x):
    """Numerically stable softmax over the last axis."""
    return _apply("softmax_last", (x,))


def reshape(x, shape):
    return _apply("reshape", (x,), shape=tuple(shape))


def transpose2d(x):
    return _apply("transpose2d", (x,))


def take_flat(x, idx, out_shape):
    """Gather from the flattened input by integer index."""
    return _apply("take_flat", (x,), idx=np.asarray(idx, dtype=np.intp), out_shape=tuple(out_shape))


def take_axis(x, idx, axis):
    return _apply("take_axis", (x,), idx=np.asarray(idx, dtype=np.intp), axis=int(axis))


def mean_axes(x, axes, keepdims=True):
    return _apply("mean_axes", (x,), axes=tuple(axes), keepdims=keepdims)


def sum_all(x):
    return _apply("sum_all", (x,))


def mean_all(x):
    return _apply("mean_all", (x,))


def rsqrt_eps(x, eps=1e-5):
    return _apply("rsqrt_eps", (x,), eps=float(eps))


def clip01(x):
    """Clamp into [0,1]; gradient passes only strictly inside the range."""
    return _apply("clip01", (x,))


def scalar(v):
    return Tensor(np.asarray(v, dtype=F32))


def lerp(a, b, alpha):
    """(1-alpha)*a + alpha*b with a fixed evaluation order.

    Shared by prompt interpolation and the KV cache so both paths produce
    bit-identical values; exact at alpha 0 and 1.
    """
    al = F32(alpha)
    return add(mul(a, F32(1.0) - al), mul(b, al))


def group_norm(x, gamma, beta, groups=4, eps=1e-5):
    """Group normalization of a (C,H,W) map with per-channel affine."""
    c, h, w = (x.shape if isinstance(x, Tensor) else np.asarray(x).shape)
    if c % groups:
        raise _shape_error("group_norm", (c, h, w), (groups,))
    xg = reshape(x, (groups, (c // groups) * h * w))
    mu = mean_axes(xg, (1,), keepdims=True)
    cen = sub(xg, mu)
    var = mean_axes(mul(cen, cen), (1,), keepdims=True)
    y = mul(cen, rsqrt_eps(var, eps))
    y = reshape(y, (c, h, w))
    return add(mul(y, reshape(gamma, (c, 1, 1))), reshape(beta, (c, 1, 1)))


@lru_cache(maxsize=None)
def _catmull_rom_taps(n, factor):
    """Clamped tap indices (4,n*f) and weights for 1-D Catmull-Rom resampling."""
    n_out = n * factor
    i = np.arange(n_out, dtype=np.float64)
    s = (i + 0.5) / factor - 0.5
    base = np.floor(s).astype(np.intp)
    t = s - base
    w = np.empty((4, n_out), dtype=np.float64)
    w[0] = -0.5 * t + t * t - 0.5 * t ** 3
    w[1] = 1.0 - 2.5 * t * t + 1.5 * t ** 3
    w[2] = 0.5 * t + 2.0 * t * t - 1.5 * t ** 3
    w[3] = -0.5 * t * t + 0.5 * t ** 3
    idx = np.stack([np.clip(base + k - 1, 0, n - 1) for k in range(4)])
    return idx, w.astype(F32)


def _resample_axis_cubic(x, factor, axis, ndim):
    n = x.shape[axis] if isinstance(x, Tensor) else np.asarray(x).shape[axis]
    idx, w = _catmull_rom_taps(n, factor)
    bshape = [1] * ndim
    bshape[axis] = n * factor
    terms = [mul(take_axis(x, idx[k], axis), w[k].reshape(bshape)) for k in range(4)]
    return add(add(terms[0], terms[1]), add(terms[2], terms[3]))


def upsample_cubic(x, factor, axes=(0, 1)):
    """Separable Catmull-Rom (a=-0.5) upsampling by an integer factor.

    Edge taps clamp to the border sample. factor 1 returns the input
    bit-identically.
    """
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    ndim = len(x.shape)
    out = x
    for ax in axes:
        out = _resample_axis_cubic(out, factor, ax, ndim)
    return out


def upsample_nearest(x, factor, axes=(0, 1)):
    """Nearest-neighbor upsampling by an integer factor."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    out = x
    for ax in axes:
        n = out.shape[ax]
        out = take_axis(out, np.repeat(np.arange(n), factor), ax)
    return out


def downsample_nearest(x, step, axes=(0, 1)):
    """Keep every step-th sample along the given axes."""
    out = x
    for ax in axes:
        out = take_axis(out, np.arange(0, out.shape[ax], step), ax)
    return out


def grad(loss, leaves):
    """Gradient of a scalar tape output with respect to each leaf tensor."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise UnknownLeafError("loss is not attached to a tape")
    if loss.data.shape != ():
        raise ValueError(f"loss must be scalar, has shape {loss.data.shape}")
    tape = loss.tape
    for lf in leaves:
        if not isinstance(lf, Tensor) or lf.tape is not tape or lf.node is None:
            raise UnknownLeafError("leaf is not registered on this tape")
    adjoint = {loss.node: np.ones((), dtype=F32)}
    for rec in reversed(tape.records):
        g = adjoint.pop(rec.out, None)
        if g is None:
            continue
        op = _OPS[rec.op]
        args = [tape.values[j] for j in rec.inputs]
        grads = op.vjp(args, rec.params, tape.values[rec.out], g)
        for j, gj in zip(rec.inputs, grads):
            if gj is None:
                continue
            if j in adjoint:
                adjoint[j] = adjoint[j] + gj
            else:
                adjoint[j] = gj
    out = []
    for lf in leaves:
        g = adjoint.get(lf.node)
        if g is None:
            g = np.zeros(lf.data.shape, dtype=F32)
        out.append(Tensor(np.asarray(g, dtype=F32)))
    return out
