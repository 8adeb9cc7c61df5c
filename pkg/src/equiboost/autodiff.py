"""Minimal reverse-mode automatic differentiation over numpy arrays.

A dynamic tape of Tensor nodes; each op records a closure that scatters the
upstream cotangent into its parents. Everything runs in the dtype of its
inputs, so the same model code executes in float32 or float64.

Only the ops this package needs are implemented. Custom numeric kernels
(spherical harmonics, pairwise distances, segment reductions) are wrapped
as primitive ops with hand-written backward rules backed by
equiboost.kernels.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels

grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the context."""
    global grad_enabled
    prev = grad_enabled
    grad_enabled = False
    try:
        yield
    finally:
        grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self):
        return Tensor(self.data)

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar; non-Tensor operands are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    """Create a graph node unless grad is globally off or no parent needs it."""
    out = Tensor(data)
    if grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss node."""
    if loss.data.size != 1:
        raise ValueError("backward() expects a scalar loss")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def _unbroadcast(g, shape):
    """Reduce a broadcasted cotangent back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw)


def sub(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(-_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw)


def mul(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bw)


def div(a, b):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), bw)


def square(a):
    return mul(a, a)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _node(out_data, (a, b), bw)


def einsum2(spec, a, b):
    """Two-operand einsum with automatic transpose-rule backward."""
    a, b = as_tensor(a), as_tensor(b)
    ins, s_out = spec.split("->")
    s_a, s_b = ins.split(",")
    out_data = np.einsum(spec, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.einsum(f"{s_out},{s_b}->{s_a}", g, b.data))
        if b.requires_grad:
            b.accumulate(np.einsum(f"{s_a},{s_out}->{s_b}", a.data, g))

    return _node(out_data, (a, b), bw)


# ------------------------------------------------------------- reshaping etc.


def reshape(a, shape):
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        a.accumulate(g.reshape(a.data.shape))

    return _node(out_data, (a,), bw)


def transpose(a, axes):
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        a.accumulate(np.transpose(g, inv))

    return _node(out_data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return _node(out_data, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate(np.take(g, k, axis=axis))

    return _node(out_data, tuple(tensors), bw)


def getitem(a, key):
    a = as_tensor(a)
    out_data = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a.accumulate(full)

    return _node(out_data, (a,), bw)


def gather0(a, idx):
    """Row gather a[idx] along axis 0; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = a.data[idx]

    def bw(g):
        lead = g.shape[0]
        flat = g.reshape(lead, -1)
        acc = kernels.segment_sum(flat, idx, a.data.shape[0])
        a.accumulate(acc.reshape(a.data.shape))

    return _node(out_data, (a,), bw)


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _node(out_data, (a,), bw)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------ elementwise fns


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        a.accumulate(g * out_data)

    return _node(out_data, (a,), bw)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bw(g):
        a.accumulate(g / a.data)

    return _node(out_data, (a,), bw)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        a.accumulate(g * (0.5 / out_data))

    return _node(out_data, (a,), bw)


def sin(a):
    a = as_tensor(a)
    out_data = np.sin(a.data)

    def bw(g):
        a.accumulate(g * np.cos(a.data))

    return _node(out_data, (a,), bw)


def cos(a):
    a = as_tensor(a)
    out_data = np.cos(a.data)

    def bw(g):
        a.accumulate(-g * np.sin(a.data))

    return _node(out_data, (a,), bw)


def atan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    out_data = np.arctan2(y.data, x.data)
    denom = y.data * y.data + x.data * x.data

    def bw(g):
        if y.requires_grad:
            y.accumulate(_unbroadcast(g * x.data / denom, y.data.shape))
        if x.requires_grad:
            x.accumulate(_unbroadcast(-g * y.data / denom, x.data.shape))

    return _node(out_data, (y, x), bw)


def sigmoid(a):
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a.accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bw)


def silu(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def bw(g):
        a.accumulate(g * s * (1.0 + a.data * (1.0 - s)))

    return _node(out_data, (a,), bw)


def leaky_relu(a, alpha=0.2):
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, alpha * a.data)

    def bw(g):
        a.accumulate(g * np.where(mask, 1.0, alpha))

    return _node(out_data, (a,), bw)


# ------------------------------------------------------- fused shape helpers


def outer_cr(a, b):
    """(E, C) x (E, R) -> (E, C, R) outer product per row."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data[:, :, None] * b.data[:, None, :]

    def bw(g):
        if a.requires_grad:
            a.accumulate(np.einsum("ecr,er->ec", g, b.data))
        if b.requires_grad:
            b.accumulate(np.einsum("ecr,ec->er", g, a.data))

    return _node(out_data, (a, b), bw)


def scale_cr(x, s):
    """(E, C, R) scaled per channel by (E, C)."""
    x, s = as_tensor(x), as_tensor(s)
    out_data = x.data * s.data[:, :, None]

    def bw(g):
        if x.requires_grad:
            x.accumulate(g * s.data[:, :, None])
        if s.requires_grad:
            s.accumulate(np.einsum("ecr,ecr->ec", g, x.data))

    return _node(out_data, (x, s), bw)


def scale_rows(x, w):
    """(E, ...) scaled per leading row by (E,)."""
    x, w = as_tensor(x), as_tensor(w)
    wshape = (-1,) + (1,) * (x.data.ndim - 1)
    out_data = x.data * w.data.reshape(wshape)

    def bw(g):
        if x.requires_grad:
            x.accumulate(g * w.data.reshape(wshape))
        if w.requires_grad:
            w.accumulate((g * x.data).reshape(g.shape[0], -1).sum(axis=1))

    return _node(out_data, (x, w), bw)


def channel_mix(x, w):
    """(N, C, R) channels mixed by (C, F) -> (N, F, R); degree-preserving
    linear map on irreps channels."""
    x, w = as_tensor(x), as_tensor(w)
    out_data = np.swapaxes(np.swapaxes(x.data, 1, 2) @ w.data, 1, 2)

    def bw(g):
        gt = np.swapaxes(g, 1, 2)
        if x.requires_grad:
            x.accumulate(np.swapaxes(gt @ w.data.T, 1, 2))
        if w.requires_grad:
            xt = np.swapaxes(x.data, 1, 2)
            w.accumulate(np.einsum("nrc,nrf->cf", xt, gt))

    return _node(out_data, (x, w), bw)


# ------------------------------------------------------------- kernel-backed


def segment_sum(a, segments, num_segments):
    """Sum rows of (E, ...) into (num_segments, ...) buckets."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    out_data = kernels.segment_sum(a.data, segments, num_segments)

    def bw(g):
        a.accumulate(g[segments])

    return _node(out_data, (a,), bw)


def sh2(r):
    """Spherical harmonics (degrees 0..2) of edge vectors, see kernels.sh2."""
    r = as_tensor(r)
    out_data = kernels.sh2(r.data)

    def bw(g):
        r.accumulate(kernels.sh2_backward(r.data, g))

    return _node(out_data, (r,), bw)


def pairwise_distances(x):
    x = as_tensor(x)
    out_data = kernels.pairwise_distances(x.data)

    def bw(g):
        x.accumulate(kernels.pairwise_distances_backward(x.data, g))

    return _node(out_data, (x,), bw)


# ------------------------------------------------------------------- helpers


def dot_last(a, b):
    """Row-wise dot product over the last axis."""
    return tsum(mul(a, b), axis=-1)


def norm_last(a, eps=0.0):
    """Row-wise Euclidean norm over the last axis.

    With eps > 0 the norm is smoothed (sqrt(|a|^2 + eps)), which keeps the
    gradient finite at zero vectors.
    """
    sq = tsum(mul(a, a), axis=-1)
    if eps:
        sq = add(sq, eps)
    return sqrt(sq)


def cross3(a, b):
    """Cross product over the last axis (size 3)."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return stack(
        [
            sub(mul(ay, bz), mul(az, by)),
            sub(mul(az, bx), mul(ax, bz)),
            sub(mul(ax, by), mul(ay, bx)),
        ],
        axis=-1,
    )


def segment_softmax(z, segments, num_segments):
    """Softmax of z (E,) normalized within segments (stable via max shift)."""
    segments = np.asarray(segments, dtype=np.int64)
    shift = kernels.segment_max(np.asarray(z.data, dtype=z.data.dtype), segments, num_segments)
    e = exp(sub(z, shift[segments]))
    denom = segment_sum(e, segments, num_segments)
    return div(e, gather0(denom, segments))
