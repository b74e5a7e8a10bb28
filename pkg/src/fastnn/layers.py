"""Differentiable layers.

The math lives in module-level functions (``dense_forward``,
``pool_backward``, ...) so it can be tested in isolation. The Layer classes
wrap these functions, cache what the backward pass needs, and accumulate
parameter gradients into ``grads`` until ``zero_grad``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .conv import ConvBackend, conv_full, conv_valid
from .errors import ShapeError
from .kernels import gemm
from .tensor import DTYPE, as_array


def glorot_uniform(rng, shape, fan_in, fan_out, gain=1.0):
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


INITS = ("glorot", "glorot_sigmoid", "he")


def init_weights(rng, shape, fan_in, fan_out, init="glorot"):
    """``glorot`` uniform; ``glorot_sigmoid`` is the same bound times 4 (the
    usual gain for logistic units); ``he`` uniform suits ReLU layers."""
    if init == "glorot":
        return glorot_uniform(rng, shape, fan_in, fan_out)
    if init == "glorot_sigmoid":
        return glorot_uniform(rng, shape, fan_in, fan_out, gain=4.0)
    if init == "he":
        return he_uniform(rng, shape, fan_in)
    raise ValueError(f"unknown initializer {init!r}; expected one of {INITS}")


class Layer:
    tag = "layer"
    has_params = False

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0

    def output_shape(self, input_shape):
        return input_shape

    def config(self) -> tuple:
        """Integer hyperparameters, enough to rebuild the layer (checkpointing)."""
        return ()


# -------------------------------------------------------------------- dense

def dense_forward(layer: DenseLayer, x):
    x = as_array(x)
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(f"dense layer expects (batch, {layer.n_in}), got {x.shape}")
    return gemm(x, layer.w, transpose_b=True) + layer.b


def dense_backward(layer: DenseLayer, x, dy, need_dx=True):
    x = as_array(x)
    dy = as_array(dy)
    if dy.shape != (x.shape[0], layer.n_out):
        raise ShapeError(f"dense gradient {dy.shape} does not match output ({x.shape[0]}, {layer.n_out})")
    layer.gw += gemm(dy, x, transpose_a=True)
    layer.gb += dy.sum(axis=0)
    if need_dx:
        return gemm(dy, layer.w)
    return None


class DenseLayer(Layer):
    tag = "dense"
    has_params = True

    def __init__(self, n_in, n_out, rng=None, init="glorot"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.w = init_weights(rng, (n_out, n_in), n_in, n_out, init)
        self.b = np.zeros(n_out, dtype=DTYPE)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self.params = [self.w, self.b]
        self.grads = [self.gw, self.gb]
        self.need_dx = True
        self._x = None

    def forward(self, x, training=False):
        x = as_array(x)
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        self._x = x
        return dense_forward(self, x)

    def backward(self, dy):
        return dense_backward(self, self._x, dy, self.need_dx)

    def output_shape(self, input_shape):
        return (self.n_out,)

    def config(self):
        return (self.n_in, self.n_out)


# --------------------------------------------------------------------- conv

def conv_forward(layer: ConvLayer, x):
    x = as_array(x)
    expect = (layer.c_in, layer.h, layer.w)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise ShapeError(f"conv layer expects (batch, {expect}), got {x.shape}")
    y = conv_valid(x, layer.kernels, pad=layer.pad, backend=layer.valid_backend)
    y += layer.b[None, :, None, None]
    return y


def conv_backward(layer: ConvLayer, x, dy, need_dx=True):
    x = as_array(x)
    dy = as_array(dy)
    oh = layer.h + 2 * layer.pad - layer.kh + 1
    ow = layer.w + 2 * layer.pad - layer.kw + 1
    if dy.shape != (x.shape[0], layer.k, oh, ow):
        raise ShapeError(f"conv gradient {dy.shape} does not match output {(x.shape[0], layer.k, oh, ow)}")
    p = layer.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    # dW[k,c] = sum_n xcorr(x[n,c], dy[n,k]): batch becomes the channel axis.
    gk = conv_valid(np.ascontiguousarray(xp.transpose(1, 0, 2, 3)),
                    np.ascontiguousarray(dy.transpose(1, 0, 2, 3)),
                    backend=layer.valid_backend)
    layer.gk += gk.transpose(1, 0, 2, 3)
    layer.gb += dy.sum(axis=(0, 2, 3))
    if not need_dx:
        return None
    dx = conv_full(dy, np.ascontiguousarray(layer.kernels.transpose(1, 0, 2, 3)),
                   backend=layer.full_backend)
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return np.ascontiguousarray(dx)


class ConvLayer(Layer):
    """Valid convolution with ``k`` kernels over a ``(c_in, h, w)`` input.

    ``valid_backend``/``full_backend`` force a backend; None dispatches.
    """
    tag = "conv"
    has_params = True

    def __init__(self, c_in, h, w, k, kh, kw, pad=0, rng=None, init="glorot"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.h, self.w = c_in, h, w
        self.k, self.kh, self.kw, self.pad = k, kh, kw, pad
        if kh > h + 2 * pad or kw > w + 2 * pad:
            raise ShapeError(f"kernel {kh}x{kw} does not fit a {h}x{w} input")
        self.kernels = init_weights(rng, (k, c_in, kh, kw), c_in * kh * kw, k * kh * kw, init)
        self.b = np.zeros(k, dtype=DTYPE)
        self.gk = np.zeros_like(self.kernels)
        self.gb = np.zeros_like(self.b)
        self.params = [self.kernels, self.b]
        self.grads = [self.gk, self.gb]
        self.valid_backend: ConvBackend | None = None
        self.full_backend: ConvBackend | None = None
        self.need_dx = True
        self._x = None

    def forward(self, x, training=False):
        self._x = as_array(x)
        return conv_forward(self, self._x)

    def backward(self, dy):
        return conv_backward(self, self._x, dy, self.need_dx)

    def output_shape(self, input_shape):
        return (self.k, self.h + 2 * self.pad - self.kh + 1, self.w + 2 * self.pad - self.kw + 1)

    def config(self):
        return (self.c_in, self.h, self.w, self.k, self.kh, self.kw, self.pad)


# ------------------------------------------------------------------ pooling

def _windows(x, window):
    wy, wx = window
    n, c, h, w = x.shape
    if h % wy or w % wx:
        raise ShapeError(f"{h}x{w} input is not divisible by the {wy}x{wx} pooling window")
    v = x.reshape(n, c, h // wy, wy, w // wx, wx).transpose(0, 1, 2, 4, 3, 5)
    return v.reshape(n, c, h // wy, w // wx, wy * wx)


def pool_forward(mode, x, window=(2, 2)):
    """Non-overlapping pooling. Returns ``(y, argmax)``; argmax is None for avg.

    argmax holds the row-major index of the winner inside each window
    (first index on ties).
    """
    x = as_array(x)
    v = _windows(x, window)
    if mode == "max":
        argmax = v.argmax(axis=-1).astype(np.int8)
        y = np.take_along_axis(v, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
        return np.ascontiguousarray(y), argmax
    if mode == "avg":
        return v.mean(axis=-1, dtype=DTYPE), None
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_backward(mode, dy, argmax=None, window=(2, 2)):
    dy = as_array(dy)
    wy, wx = window
    n, c, oh, ow = dy.shape
    size = wy * wx
    if mode == "max":
        if argmax is None or argmax.shape != dy.shape:
            raise ShapeError("max-pool backward needs the argmax of the forward pass")
        v = np.zeros((n, c, oh, ow, size), dtype=DTYPE)
        np.put_along_axis(v, argmax[..., None].astype(np.intp), dy[..., None], axis=-1)
    elif mode == "avg":
        v = np.broadcast_to((dy / np.float32(size))[..., None], (n, c, oh, ow, size))
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    dx = v.reshape(n, c, oh, ow, wy, wx).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx).reshape(n, c, oh * wy, ow * wx)


class PoolLayer(Layer):
    def __init__(self, mode, window=(2, 2)):
        super().__init__()
        if mode not in ("max", "avg"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.mode = mode
        self.tag = f"{mode}pool"
        self.window = tuple(window)
        self._argmax = None

    def forward(self, x, training=False):
        y, self._argmax = pool_forward(self.mode, x, self.window)
        return y

    def backward(self, dy):
        return pool_backward(self.mode, dy, self._argmax, self.window)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        wy, wx = self.window
        if h % wy or w % wx:
            raise ShapeError(f"{h}x{w} input is not divisible by the {wy}x{wx} pooling window")
        return (c, h // wy, w // wx)

    def config(self):
        return self.window


# -------------------------------------------------------------- activations

def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    with np.errstate(over="ignore"):
        return (1.0 / (1.0 + np.exp(-x))).astype(DTYPE, copy=False)


def softmax(x):
    x = as_array(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def activation_apply(kind, x):
    x = as_array(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "softmax":
        return softmax(x)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_gradient(kind, y, dy):
    """dL/dx given the activation output ``y`` and dL/dy."""
    y = as_array(y)
    dy = as_array(dy)
    if kind == "sigmoid":
        return dy * y * (1 - y)
    if kind == "relu":
        return dy * (y > 0)
    if kind == "softmax":
        return y * (dy - (dy * y).sum(axis=1, keepdims=True))
    if kind == "identity":
        return dy
    raise ValueError(f"unknown activation {kind!r}")


class Activation(Layer):
    KINDS = ("sigmoid", "relu", "softmax", "identity")

    def __init__(self, kind):
        super().__init__()
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind
        self.tag = kind
        self._y = None

    def forward(self, x, training=False):
        self._y = activation_apply(self.kind, x)
        return self._y

    def backward(self, dy):
        return activation_gradient(self.kind, self._y, dy)


class Flatten(Layer):
    tag = "flatten"

    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, training=False):
        x = as_array(x)
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, input_shape):
        return (math.prod(input_shape),)


# ------------------------------------------------------------------ dropout

def dropout_forward(p, x, training, rng):
    """Inverted dropout. Returns ``(y, mask)``; mask is all ones at inference."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_array(x)
    if not training or p == 0:
        return x.copy(), np.ones_like(x)
    mask = (rng.random(x.shape) >= p).astype(DTYPE)
    return x * mask / np.float32(1 - p), mask


class Dropout(Layer):
    tag = "dropout"

    def __init__(self, p, rng=None):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask = None

    def forward(self, x, training=False):
        y, self._mask = dropout_forward(self.p, x, training, self.rng)
        return y

    def backward(self, dy):
        return dy * self._mask / np.float32(1 - self.p)


# ------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5
    ggamma: np.ndarray = field(default=None)
    gbeta: np.ndarray = field(default=None)

    @classmethod
    def create(cls, features, momentum=0.9, epsilon=1e-5):
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        return cls(np.ones(features, DTYPE), np.zeros(features, DTYPE),
                   np.zeros(features, DTYPE), np.ones(features, DTYPE),
                   momentum, epsilon, np.zeros(features, DTYPE), np.zeros(features, DTYPE))


def batchnorm_forward(state: BatchNormState, x, training):
    """Returns ``(y, cache)``; cache is None at inference."""
    x = as_array(x)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch normalization needs at least 2 samples in training mode")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + np.float32(state.epsilon))
        xhat = (x - mean) * inv_std
        m = np.float32(state.momentum)
        n = x.shape[0]
        state.running_mean[...] = m * state.running_mean + (1 - m) * mean
        state.running_var[...] = m * state.running_var + (1 - m) * var * np.float32(n / (n - 1))
        return state.gamma * xhat + state.beta, (xhat, inv_std)
    xhat = (x - state.running_mean) / np.sqrt(state.running_var + np.float32(state.epsilon))
    return state.gamma * xhat + state.beta, None


def batchnorm_backward(state: BatchNormState, cache, dy):
    xhat, inv_std = cache
    dy = as_array(dy)
    n = dy.shape[0]
    state.ggamma += (dy * xhat).sum(axis=0)
    state.gbeta += dy.sum(axis=0)
    dxhat = dy * state.gamma
    return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class BatchNorm(Layer):
    """Per-feature batch normalization; 4-D inputs are flattened per sample."""
    tag = "batchnorm"
    has_params = True

    def __init__(self, features, momentum=0.9, epsilon=1e-5):
        super().__init__()
        self.features = features
        self.state = BatchNormState.create(features, momentum, epsilon)
        s = self.state
        self.params = [s.gamma, s.beta]
        self.grads = [s.ggamma, s.gbeta]
        self._cache = None
        self._shape = None

    @property
    def buffers(self):
        return [self.state.running_mean, self.state.running_var]

    def forward(self, x, training=False):
        x = as_array(x)
        self._shape = x.shape
        y, self._cache = batchnorm_forward(self.state, x.reshape(x.shape[0], -1), training)
        return y.reshape(self._shape)

    def backward(self, dy):
        dx = batchnorm_backward(self.state, self._cache, dy.reshape(dy.shape[0], -1))
        return dx.reshape(self._shape)

    def config(self):
        return (self.features,)
