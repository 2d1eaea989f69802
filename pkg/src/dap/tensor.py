"""Dense tensors with reverse-mode automatic differentiation.

Everything the prior networks need, built on numpy arrays: dilated 2-D
convolution, 2x2 max pooling, bilinear upsampling, channel concatenation,
pointwise activations, elementwise arithmetic and (masked) mean-squared
losses. Gradients are recorded on an explicit Tape and replayed in
reverse. One float dtype (32- or 64-bit) per graph.
"""

from __future__ import annotations

import math
import threading
from functools import lru_cache

import numpy as np

_U64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


class Rng:
    """xoshiro256** stream, seeded by splitmix64 expansion of a 64-bit seed.

    Same seed, same sequence. Uniforms are 53-bit reals in [0, 1);
    normals come from Box-Muller with the spare value cached.
    """

    def __init__(self, seed: int):
        s = seed & _U64
        state = []
        for _ in range(4):
            s = (s + _SPLITMIX_GAMMA) & _U64
            z = s
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
            state.append(z ^ (z >> 31))
        self._s = state
        self._spare_normal = None

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & _U64
        result = (((x << 7) | (x >> 57)) & _U64) * 9 & _U64
        t = (s1 << 17) & _U64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _U64
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0 ** -53

    def normal(self) -> float:
        if self._spare_normal is not None:
            z, self._spare_normal = self._spare_normal, None
            return z
        # u1 in (0, 1] keeps the log finite
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._spare_normal = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.fromiter((self.uniform() for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape)

    def normal_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        out = np.fromiter((self.normal() for _ in range(n)), dtype=np.float64, count=n)
        return out.reshape(shape)


def derive_seed(seed: int, stream: int) -> int:
    """Decorrelated child seed for an independent stream (splitmix64 step)."""
    s = (seed + (stream + 1) * _SPLITMIX_GAMMA) & _U64
    z = s
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


class Tensor:
    """N-dimensional real array (order <= 4, NCHW layout) in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self))


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class Tape:
    """Execution-ordered record of ops; insertion order is topological."""

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tls.stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls.stack.pop()
        return False

    def __len__(self):
        return len(self._records)

    def clear(self):
        self._records.clear()


class _Tls(threading.local):
    def __init__(self):
        self.stack = []


_tls = _Tls()


def _finish(out: Tensor, inputs, backward_fn) -> Tensor:
    """Mark grad requirement and record the op on the active tape."""
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        if _tls.stack:
            _tls.stack[-1]._records.append((out, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor, tape: Tape):
    """Populate grads of every requires_grad tensor reachable from `loss`.

    Grads accumulate; the caller zeroes them between iterations. Each
    recorded op is visited exactly once, in reverse execution order.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    _accum(loss, np.ones_like(loss.data))
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _finish(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _finish(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _finish(out, (a, b), bw)


def mean(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    inv_n = 1.0 / x.data.size

    def bw(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, g * inv_n))

    return _finish(out, (x,), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
    pos = x.data >= 0
    out = Tensor(np.where(pos, x.data, x.data * x.dtype.type(slope)))

    def bw(g):
        if x.requires_grad:
            _accum(x, g * np.where(pos, x.dtype.type(1), x.dtype.type(slope)))

    return _finish(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # exp of -|x| cannot overflow
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = Tensor(s)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * s * (1.0 - s))

    return _finish(out, (x,), bw)


def channel_magnitude(x: Tensor) -> Tensor:
    """Per-bin magnitude of a 2-channel (real, imag) map: (N,2,H,W) -> (N,1,H,W)."""
    if x.data.ndim != 4 or x.data.shape[1] != 2:
        raise ValueError(f"channel_magnitude needs (N,2,H,W), got {x.data.shape}")
    re = x.data[:, 0:1]
    im = x.data[:, 1:2]
    mag = np.sqrt(re * re + im * im)
    out = Tensor(mag)

    def bw(g):
        if x.requires_grad:
            # zero magnitude has no defined direction; send zero grad there
            safe = np.where(mag > 0, mag, 1.0)
            _accum(x, np.concatenate([g * re / safe, g * im / safe], axis=1))

    return _finish(out, (x,), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mse shape mismatch: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = Tensor(np.asarray(np.mean(diff * diff), dtype=pred.dtype))
    scale = 2.0 / diff.size

    def bw(g):
        d = g * scale * diff
        if pred.requires_grad:
            _accum(pred, d)
        if target.requires_grad:
            _accum(target, -d)

    return _finish(out, (pred, target), bw)


def masked_mse(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean over ALL elements of mask * (pred - target)^2; zero grad where mask is 0."""
    if pred.data.shape != target.data.shape or pred.data.shape != mask.data.shape:
        raise ValueError("masked_mse needs three equal shapes")
    diff = pred.data - target.data
    out = Tensor(np.asarray(np.mean(mask.data * diff * diff), dtype=pred.dtype))
    scale = 2.0 / pred.data.size

    def bw(g):
        d = g * scale * mask.data * diff
        if pred.requires_grad:
            _accum(pred, d)
        if target.requires_grad:
            _accum(target, -d)

    return _finish(out, (pred, target, mask), bw)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels needs 4-d tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ValueError(f"concat_channels spatial mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def bw(g):
        if a.requires_grad:
            _accum(a, g[:, :ca])
        if b.requires_grad:
            _accum(b, g[:, ca:])

    return _finish(out, (a, b), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pool; backward routes to the first (row-major) argmax per window."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (x.data.reshape(n, c, h2, 2, w2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h2, w2, 4))
    argmax = windows.argmax(axis=-1)  # first max in row-major window order
    out = Tensor(np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0])

    def bw(g):
        if x.requires_grad:
            gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
            np.put_along_axis(gw, argmax[..., None], g[..., None], axis=-1)
            _accum(x, gw.reshape(n, c, h2, w2, 2, 2)
                        .transpose(0, 1, 2, 4, 3, 5)
                        .reshape(n, c, h, w))

    return _finish(out, (x,), bw)


@lru_cache(maxsize=64)
def _bilinear_matrix(n: int, dtype_name: str) -> np.ndarray:
    """(2n, n) interpolation operator: half-pixel centers, edges clamped."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    for y in range(2 * n):
        src = min(max((y + 0.5) / 2.0 - 0.5, 0.0), float(n - 1))
        y0 = int(math.floor(src))
        t = src - y0
        y1 = min(y0 + 1, n - 1)
        m[y, y0] += 1.0 - t
        m[y, y1] += t
    return m.astype(dtype_name)


def upsample_bilinear2(x: Tensor) -> Tensor:
    """x2 bilinear upsampling; exact transpose of the forward operator in backward."""
    n, c, h, w = x.data.shape
    ry = _bilinear_matrix(h, x.dtype.name)
    cx = _bilinear_matrix(w, x.dtype.name)
    out = Tensor(np.matmul(ry, np.matmul(x.data, cx.T)))

    def bw(g):
        if x.requires_grad:
            _accum(x, np.matmul(ry.T, np.matmul(g, cx)))

    return _finish(out, (x,), bw)


def _im2col(xp: np.ndarray, k: int, d: int, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i * d:i * d + h, j * d:j * d + w]
    return cols.reshape(n, c * k * k, h * w)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """Same-padded dilated 2-D convolution, stride 1, odd square kernel.

    out[n,o,y,x] = bias[o]
        + sum_{c,i,j} x[n,c, y+d*(i-(k-1)/2), x+d*(j-(k-1)/2)] * weight[o,c,i,j]
    with out-of-range input read as zero.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError("conv2d needs 4-d input and weight")
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"conv2d kernel must be odd and square, got {kh}x{kw}")
    if cin_w != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight expects {cin_w}")
    if bias.data.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.data.shape}")
    if dilation < 1:
        raise ValueError(f"conv2d dilation must be >= 1, got {dilation}")
    k = kh
    pad = dilation * (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, k, dilation, h, w)  # (n, cin*k*k, h*w)
    w2 = weight.data.reshape(cout, cin * k * k)
    out_flat = np.matmul(w2, cols) + bias.data[:, None]
    out = Tensor(out_flat.reshape(n, cout, h, w))

    def bw(g):
        go = g.reshape(n, cout, h * w)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            # im2col is recomputed to keep no 9x activation copies alive
            cols_b = _im2col(np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))),
                             k, dilation, h, w)
            gw = np.matmul(go, cols_b.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, gw.reshape(cout, cin, k, k))
        if x.requires_grad:
            gcols = np.matmul(w2.T, go).reshape(n, cin, k, k, h, w)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i * dilation:i * dilation + h,
                        j * dilation:j * dilation + w] += gcols[:, :, i, j]
            _accum(x, gxp[:, :, pad:pad + h, pad:pad + w])

    return _finish(out, (x, weight, bias), bw)
