"""Dense tensors with reverse-mode gradients.

This is deliberately not a general autodiff engine: the op set is exactly
what the enhancement network and its composite loss need (pointwise /
depthwise / transposed convolutions, pooling, upsampling, a few
activations, and the scalar arithmetic the SI-SDR term requires).
Layouts are channels-last: rank-3 tensors are F x T x C.

Training runs in float32; gradient checks construct float64 tensors and
use :func:`numeric_grad` / :func:`gradcheck` as the independent oracle.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ShapeError

# Every op validates that its output is finite; a NaN/Inf anywhere in the
# graph is a bug, not a condition to propagate. Tests may disable this to
# time raw throughput.
CHECK_FINITE = True

_LN10 = float(np.log(10.0))


def _finite(arr, ctx):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {ctx}")
    return arr


class Tensor:
    """A numpy array plus an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode pass from a scalar; fills .grad on every reachable node."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        # iterative topological order (graphs can be deep for long losses)
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                _finite(node.grad, "backward")

    # scalar arithmetic used by the loss assembly ------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        c = float(other)
        out = Tensor(self.data + c, (self,))
        out._backward = lambda g: self._accumulate(g)
        return out

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        c = float(other)
        out = Tensor(self.data * c, (self,))
        out._backward = lambda g: self._accumulate(g * c)
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return self * (1.0 / float(other))

    def item(self):
        return float(self.data.reshape(()))


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _rank3(x, op):
    if x.data.ndim != 3:
        raise ShapeError(f"{op}: expected rank-3 F x T x C tensor, got {x.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(_finite(a.data + b.data, "add"), (a, b))

    def bwd(g):
        a._accumulate(g)
        b._accumulate(g)

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(_finite(a.data - b.data, "sub"), (a, b))

    def bwd(g):
        a._accumulate(g)
        b._accumulate(-g)

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(_finite(a.data * b.data, "mul"), (a, b))

    def bwd(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    out._backward = bwd
    return out


def scalar_mul(s: Tensor, x: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (broadcast); both receive gradients."""
    if s.data.size != 1:
        raise ShapeError("scalar_mul: first argument must be a scalar tensor")
    out = Tensor(_finite(s.data.reshape(()) * x.data, "scalar_mul"), (s, x))

    def bwd(g):
        s._accumulate(np.sum(g * x.data).reshape(s.data.shape))
        x._accumulate(g * s.data.reshape(()))

    out._backward = bwd
    return out


def reciprocal(x: Tensor) -> Tensor:
    out = Tensor(_finite(1.0 / x.data, "reciprocal"), (x,))
    out._backward = lambda g: x._accumulate(-g / (x.data * x.data))
    return out


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(_finite(y, "sqrt"), (x,))
    out._backward = lambda g: x._accumulate(g / (2.0 * np.maximum(y, 1e-300)))
    return out


def log10(x: Tensor) -> Tensor:
    out = Tensor(_finite(np.log10(x.data), "log10"), (x,))
    out._backward = lambda g: x._accumulate(g / (x.data * _LN10))
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(x.data, lo, hi)
    out = Tensor(y, (x,))
    inside = (x.data > lo) & (x.data < hi)
    out._backward = lambda g: x._accumulate(g * inside)
    return out


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data).reshape(()), (x,))
    out._backward = lambda g: x._accumulate(np.full_like(x.data, g.reshape(())))
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements, as a scalar tensor."""
    _same_shape(a, b, "mse")
    d = a.data - b.data
    n = d.size
    out = Tensor(np.asarray(np.mean(d * d), dtype=a.data.dtype).reshape(()), (a, b))

    def bwd(g):
        scale = g.reshape(()) * 2.0 / n
        a._accumulate(scale * d)
        b._accumulate(-scale * d)

    out._backward = bwd
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data).astype(x.data.dtype)
    out = Tensor(_finite(y, "sigmoid"), (x,))
    out._backward = lambda g: x._accumulate(g * y * (1.0 - y))
    return out


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with a single learnable slope shared across all elements."""
    if slope.data.size != 1:
        raise ShapeError("prelu: slope must be a scalar tensor")
    a = slope.data.reshape(())
    neg = np.minimum(x.data, 0)
    out = Tensor(_finite(np.maximum(x.data, 0) + a * neg, "prelu"), (x, slope))

    def bwd(g):
        x._accumulate(g * np.where(x.data > 0, 1.0, a))
        slope._accumulate(np.sum(g * neg).reshape(slope.data.shape))

    out._backward = bwd
    return out


def concat_channels(parts) -> Tensor:
    """Concatenate rank-3 tensors along the channel axis."""
    parts = list(parts)
    f, t = parts[0].data.shape[:2]
    for p in parts:
        _rank3(p, "concat_channels")
        if p.data.shape[:2] != (f, t):
            raise ShapeError("concat_channels: F,T extents differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=2), tuple(parts))
    splits = np.cumsum([p.data.shape[2] for p in parts])[:-1]

    def bwd(g):
        for p, gp in zip(parts, np.split(g, splits, axis=2)):
            p._accumulate(gp)

    out._backward = bwd
    return out


def select_channel(x: Tensor, c: int) -> Tensor:
    """Slice one channel out of an F x T x C tensor, yielding F x T."""
    _rank3(x, "select_channel")
    out = Tensor(x.data[:, :, c].copy(), (x,))

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, :, c] = g
        x._accumulate(full)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# convolutions, pooling, upsampling


def pointwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution: out[f,t,co] = sum_ci x[f,t,ci] w[ci,co] (+ b[co])."""
    _rank3(x, "pointwise_conv2d")
    f, t, cin = x.data.shape
    if w.data.ndim != 2 or w.data.shape[0] != cin:
        raise ShapeError(f"pointwise_conv2d: weight {w.data.shape} does not match input channels {cin}")
    cout = w.data.shape[1]
    y = x.data.reshape(f * t, cin) @ w.data
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError("pointwise_conv2d: bias shape mismatch")
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(_finite(y.reshape(f, t, cout), "pointwise_conv2d"), parents)

    def bwd(g):
        gm = g.reshape(f * t, cout)
        x._accumulate((gm @ w.data.T).reshape(f, t, cin))
        w._accumulate(x.data.reshape(f * t, cin).T @ gm)
        if b is not None:
            b._accumulate(gm.sum(axis=0))

    out._backward = bwd
    return out


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel k x k convolution with zero 'same' padding. Weight is k x k x C."""
    _rank3(x, "depthwise_conv2d")
    f, t, c = x.data.shape
    if w.data.ndim != 3 or w.data.shape[2] != c:
        raise ShapeError(f"depthwise_conv2d: weight {w.data.shape} does not match channels {c}")
    k = w.data.shape[0]
    if w.data.shape[1] != k or k % 2 == 0:
        raise ShapeError("depthwise_conv2d: kernel must be square with odd size")
    r = k // 2
    xp = np.pad(x.data, ((r, r), (r, r), (0, 0)))
    y = np.zeros_like(x.data)
    for di in range(k):
        for dj in range(k):
            y += xp[di:di + f, dj:dj + t, :] * w.data[di, dj, :]
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(_finite(y, "depthwise_conv2d"), parents)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for di in range(k):
            for dj in range(k):
                gxp[di:di + f, dj:dj + t, :] += g * w.data[di, dj, :]
                gw[di, dj, :] = np.sum(xp[di:di + f, dj:dj + t, :] * g, axis=(0, 1))
        x._accumulate(gxp[r:r + f, r:r + t, :])
        w._accumulate(gw)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 1)))

    out._backward = bwd
    return out


def depthwise_conv1d(x: Tensor, w: Tensor, axis: str) -> Tensor:
    """Per-channel 1D convolution along 'time' or 'frequency' only, zero 'same' padding.

    Weight is K x C. The orthogonal axis and the channel axis are untouched,
    which is what gives the attention its narrow-band / cross-band locality.
    """
    _rank3(x, "depthwise_conv1d")
    if axis not in ("time", "frequency"):
        raise ShapeError(f"depthwise_conv1d: unknown axis {axis!r}")
    f, t, c = x.data.shape
    if w.data.ndim != 2 or w.data.shape[1] != c:
        raise ShapeError(f"depthwise_conv1d: weight {w.data.shape} does not match channels {c}")
    k = w.data.shape[0]
    if k % 2 == 0:
        raise ShapeError("depthwise_conv1d: kernel size must be odd")
    r = k // 2
    ax = 1 if axis == "time" else 0
    pad = [(0, 0), (0, 0), (0, 0)]
    pad[ax] = (r, r)
    xp = np.pad(x.data, pad)
    n = x.data.shape[ax]
    y = np.zeros_like(x.data)
    for dk in range(k):
        sl = [slice(None)] * 3
        sl[ax] = slice(dk, dk + n)
        y += xp[tuple(sl)] * w.data[dk, :]
    out = Tensor(_finite(y, "depthwise_conv1d"), (x, w))

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for dk in range(k):
            sl = [slice(None)] * 3
            sl[ax] = slice(dk, dk + n)
            gxp[tuple(sl)] += g * w.data[dk, :]
            gw[dk, :] = np.sum(xp[tuple(sl)] * g, axis=(0, 1))
        sl = [slice(None)] * 3
        sl[ax] = slice(r, r + n)
        x._accumulate(gxp[tuple(sl)])
        w._accumulate(gw)

    out._backward = bwd
    return out


def _check_even(x, op):
    f, t = x.data.shape[:2]
    if f % 2 or t % 2:
        raise ShapeError(f"{op}: F and T must be even, got {f}x{t}")


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling per channel."""
    _rank3(x, "avg_pool2")
    _check_even(x, "avg_pool2")
    f, t, c = x.data.shape
    y = x.data.reshape(f // 2, 2, t // 2, 2, c).mean(axis=(1, 3))
    out = Tensor(y, (x,))

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
        x._accumulate(gx.astype(x.data.dtype))

    out._backward = bwd
    return out


def max_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling per channel."""
    _rank3(x, "max_pool2")
    _check_even(x, "max_pool2")
    f, t, c = x.data.shape
    blocks = x.data.reshape(f // 2, 2, t // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(f // 2, t // 2, c, 4)
    idx = np.argmax(blocks, axis=3)
    y = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]
    out = Tensor(y, (x,))

    def bwd(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=3)
        gx = gb.reshape(f // 2, t // 2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(f, t, c)
        x._accumulate(gx)

    out._backward = bwd
    return out


def transposed_conv2(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel; output extents double.

    Weight is 2 x 2 x Cin x Cout. Each input pixel scatters into a 2x2
    output patch, so out[2i+di, 2j+dj] = x[i,j] @ w[di,dj].
    """
    _rank3(x, "transposed_conv2")
    f, t, cin = x.data.shape
    if w.data.shape[:3] != (2, 2, cin):
        raise ShapeError(f"transposed_conv2: weight {w.data.shape} does not match input channels {cin}")
    cout = w.data.shape[3]
    y = np.empty((2 * f, 2 * t, cout), dtype=x.data.dtype)
    flat = x.data.reshape(f * t, cin)
    for di in range(2):
        for dj in range(2):
            y[di::2, dj::2, :] = (flat @ w.data[di, dj]).reshape(f, t, cout)
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(_finite(y, "transposed_conv2"), parents)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for di in range(2):
            for dj in range(2):
                gpatch = g[di::2, dj::2, :].reshape(f * t, cout)
                gx += (gpatch @ w.data[di, dj].T).reshape(f, t, cin)
                gw[di, dj] = flat.T @ gpatch
        x._accumulate(gx)
        w._accumulate(gw)
        if b is not None:
            b._accumulate(g.sum(axis=(0, 1)))

    out._backward = bwd
    return out


def nearest_upsample2(x: Tensor) -> Tensor:
    """Replicate each value into a 2x2 block."""
    _rank3(x, "nearest_upsample2")
    f, t, c = x.data.shape
    y = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)
    out = Tensor(y, (x,))

    def bwd(g):
        x._accumulate(g.reshape(f, 2, t, 2, c).sum(axis=(1, 3)))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


def numeric_grad(f, xs, h=1e-5):
    """Central finite differences of scalar-valued f at float64 precision.

    xs is a list of Tensors; f is re-evaluated with perturbed copies. Returns
    one float64 gradient array per input. This is the independent oracle the
    analytic backward pass is checked against, so it never calls backward().
    """
    datas = [x.data.astype(np.float64).copy() for x in xs]

    def run():
        return float(f([Tensor(d.copy()) for d in datas]).data.reshape(()))

    grads = []
    for i, d in enumerate(datas):
        g = np.zeros_like(d)
        flat = d.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = run()
            flat[j] = orig - h
            down = run()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(f, xs, h=1e-5):
    """Compare backward() against numeric_grad; returns the worst relative error.

    The error for each input is ||g_analytic - g_numeric|| / max(||g_a||, ||g_n||, 1e-8).
    """
    xs64 = [Tensor(x.data.astype(np.float64)) for x in xs]
    loss = f(xs64)
    loss.backward()
    numeric = numeric_grad(f, xs, h=h)
    worst = 0.0
    for x, gn in zip(xs64, numeric):
        ga = x.grad if x.grad is not None else np.zeros_like(x.data)
        denom = max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-8)
        worst = max(worst, float(np.linalg.norm(ga - gn) / denom))
    return worst
