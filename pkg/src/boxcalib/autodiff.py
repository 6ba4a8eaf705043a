"""Dense tensors and the forward/backward kernels needed by the segmentation net.

Activations are NCHW numpy arrays.  Each ``*_forward`` returns ``(out, cache)``
and the matching ``*_backward`` takes ``(dout, cache)`` and returns exact
gradients.  Layer objects wrap the kernels, hold their parameters as
``Tensor`` instances and accumulate parameter gradients into ``Tensor.grad``.

Training runs in float32; gradient checks run the same kernels in float64.
"""

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """A named array with an optional gradient buffer of the same shape."""

    def __init__(self, data, name="", requires_grad=True):
        self.data = np.asarray(data)
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor({self.name!r}, shape={self.shape}, dtype={self.data.dtype})"


def _require(cond, kernel, msg):
    if not cond:
        raise ShapeError(f"{kernel}: {msg}")


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x, w, b=None):
    """Stride-1 convolution with 'same' zero padding (3x3 -> pad 1, 1x1 -> pad 0).

    x: (N, C, H, W); w: (O, C, k, k); b: (O,) or None.
    """
    _require(x.ndim == 4, "conv2d", f"input must be NCHW, got shape {x.shape}")
    _require(w.ndim == 4 and w.shape[2] == w.shape[3] and w.shape[2] in (1, 3), "conv2d",
             f"kernel must be (O, C, 1|3, 1|3), got {w.shape}")
    _require(x.shape[1] == w.shape[1], "conv2d",
             f"input has {x.shape[1]} channels but kernel expects {w.shape[1]}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if k == 1:
        cols = x.reshape(n, c, h * wd)
    else:
        # im2col as (N, 9C, HW), rows ordered (ky, kx, c)
        xp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
        xp[:, :, 1:-1, 1:-1] = x
        cols = np.empty((n, 9, c, h, wd), dtype=x.dtype)
        for i in range(3):
            for j in range(3):
                cols[:, 3 * i + j] = xp[:, :, i:i + h, j:j + wd]
        cols = cols.reshape(n, 9 * c, h * wd)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        _require(b.shape == (o,), "conv2d", f"bias shape {b.shape} != ({o},)")
        out += b[:, None]
    return out.reshape(n, o, h, wd), (x.shape, cols, w, b is not None)


def conv2d_backward(dout, cache):
    """Returns (dx, dw, db); db is None for bias-free convolutions."""
    xshape, cols, w, has_bias = cache
    n, c, h, wd = xshape
    o, _, k, _ = w.shape
    _require(dout.shape == (n, o, h, wd), "conv2d backward",
             f"upstream gradient {dout.shape} != output shape {(n, o, h, wd)}")
    d3 = dout.astype(w.dtype, copy=False).reshape(n, o, h * wd)
    dwmat = d3[0] @ cols[0].T
    for i in range(1, n):
        dwmat += d3[i] @ cols[i].T
    dw = dwmat.reshape(o, k, k, c).transpose(0, 3, 1, 2)
    db = d3.sum(axis=(0, 2)) if has_bias else None
    if k == 1:
        dx = w.reshape(o, c).T @ d3
        return dx.reshape(n, c, h, wd), dw, db
    # stride-1 'same' convolution: dx is dout convolved with the flipped,
    # channel-transposed kernel
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d_forward(dout.astype(w.dtype, copy=False), wt)
    return dx, dw, db


# --------------------------------------------------------------------------
# pooling / resampling


def maxpool_forward(x):
    """2x2 max pooling, stride 2.  Ties go to the first element in row-major order."""
    _require(x.ndim == 4, "maxpool", f"input must be NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, "maxpool", f"spatial size {h}x{w} is not even")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(dout, cache):
    shape, idx = cache
    n, c, h, w = shape
    _require(dout.shape == idx.shape, "maxpool backward",
             f"upstream gradient {dout.shape} != output shape {idx.shape}")
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    dx = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(shape)


def upsample_forward(x):
    """Nearest-neighbor upsampling by 2."""
    _require(x.ndim == 4, "upsample", f"input must be NCHW, got shape {x.shape}")
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def upsample_backward(dout, cache):
    n, c, h, w = cache
    _require(dout.shape == (n, c, 2 * h, 2 * w), "upsample backward",
             f"upstream gradient {dout.shape} != {(n, c, 2 * h, 2 * w)}")
    return dout.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


# --------------------------------------------------------------------------
# pointwise


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    # gradient at exactly 0 is 0
    return dout * (x > 0)


def sigmoid_forward(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    y[~pos] = e / (1.0 + e)
    return y, y


def sigmoid_backward(dout, y):
    return dout * y * (1 - y)


def softmax_forward(x):
    """Softmax over the channel axis (axis 1)."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return y, y


def softmax_backward(dout, y):
    return y * (dout - (dout * y).sum(axis=1, keepdims=True))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, kernel):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kernel}: shapes {a.shape} and {b.shape} do not broadcast") from None


def mul_forward(a, b):
    _check_broadcast(a, b, "mul")
    return a * b, (a, b)


def mul_backward(dout, cache):
    a, b = cache
    return _unbroadcast(dout * b, a.shape), _unbroadcast(dout * a, b.shape)


def add_forward(a, b):
    _check_broadcast(a, b, "add")
    return a + b, (a.shape, b.shape)


def add_backward(dout, cache):
    sa, sb = cache
    return _unbroadcast(dout, sa), _unbroadcast(dout, sb)


def concat_forward(a, b):
    _require(a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:], "concat",
             f"cannot stack {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dout, ca):
    return dout[:, :ca], dout[:, ca:]


# --------------------------------------------------------------------------
# layers


def xavier_init(shape, rng, dtype=np.float32):
    """Uniform Glorot init with variance 2 / (fan_in + fan_out)."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, name, cin, cout, k=3, bias=True, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(xavier_init((cout, cin, k, k), rng, dtype), f"{name}.weight")
        self.bias = Tensor(np.zeros(cout, dtype=dtype), f"{name}.bias") if bias else None
        self._cache = None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        y, self._cache = conv2d_forward(x, self.weight.data,
                                        None if self.bias is None else self.bias.data)
        return y

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class _Stateless:
    fwd = bwd = None

    def __init__(self):
        self._cache = None

    def parameters(self):
        return []

    def forward(self, x):
        y, self._cache = type(self).fwd(x)
        return y

    def backward(self, dout):
        return type(self).bwd(dout, self._cache)


class ReLU(_Stateless):
    fwd, bwd = relu_forward, relu_backward


class Sigmoid(_Stateless):
    fwd, bwd = sigmoid_forward, sigmoid_backward


class MaxPool(_Stateless):
    fwd, bwd = maxpool_forward, maxpool_backward


class Upsample(_Stateless):
    fwd, bwd = upsample_forward, upsample_backward


class ChannelSoftmax(_Stateless):
    fwd, bwd = softmax_forward, softmax_backward


class Mul:
    def forward(self, a, b):
        y, self._cache = mul_forward(a, b)
        return y

    def backward(self, dout):
        return mul_backward(dout, self._cache)


class Add:
    def forward(self, a, b):
        y, self._cache = add_forward(a, b)
        return y

    def backward(self, dout):
        return add_backward(dout, self._cache)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on the ``params`` arrays."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape or g.shape != p.shape:
            raise ShapeError(f"adam: parameter {p.shape}, gradient {g.shape}, moment {m.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# --------------------------------------------------------------------------
# checkpoints: magic, version, count, then per tensor name/rank/dims/float32 data

CHECKPOINT_MAGIC = b"BXCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors):
    """Write ``{name: array}`` (or a list of Tensors) to ``path``."""
    if not isinstance(tensors, dict):
        tensors = {t.name: t.data for t in tensors}
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(4 * size), dtype="<f4")
            if data.size != size:
                raise ValueError(f"{path}: truncated tensor {name!r}")
            out[name] = data.reshape(dims).astype(np.float32)
        return out
