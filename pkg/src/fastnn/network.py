"""Sequential networks: declarative construction, losses, training and checkpoints.

A network is built from a list of layer descriptors::

    net = build_network([dense(784, 500), dense(500, 250), dense(250, 10, "softmax")],
                        lr=0.1, momentum=0.9, batch_size=100, seed=0)
    report = net.fit(train, epochs=5)
    acc = net.evaluate(test)
"""

from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import optim
from .conv import ConvBackend
from .data import Dataset, one_hot
from .errors import FormatError, LabelError, ShapeError, SpecError
from .layers import (Activation, BatchNorm, ConvLayer, DenseLayer, Dropout, Flatten, Layer,
                     PoolLayer)
from .tensor import DTYPE, as_array

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FNN1"


# -------------------------------------------------------------- descriptors

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: dict = field(default_factory=dict)


def dense(n_in=None, n_out=None, activation="sigmoid", init=None):
    """``dense(784, 500)`` or ``dense(n_out=10, activation="softmax")`` (n_in inferred).

    ``init`` defaults to an activation-matched initializer (see ``default_init``).
    """
    if n_out is None:
        raise SpecError("dense layer needs n_out")
    return LayerSpec("dense", dict(n_in=n_in, n_out=n_out, activation=activation, init=init))


def conv(k, kh, kw=None, activation="sigmoid", pad=0, input_shape=None, init=None):
    return LayerSpec("conv", dict(k=k, kh=kh, kw=kw or kh, activation=activation, pad=pad,
                                  input_shape=input_shape, init=init))


def maxpool(wy=2, wx=None):
    return LayerSpec("pool", dict(mode="max", window=(wy, wx or wy)))


def avgpool(wy=2, wx=None):
    return LayerSpec("pool", dict(mode="avg", window=(wy, wx or wy)))


def dropout(p):
    return LayerSpec("dropout", dict(p=p))


def batchnorm(momentum=0.9, epsilon=1e-5):
    return LayerSpec("batchnorm", dict(momentum=momentum, epsilon=epsilon))


def activation(kind):
    return LayerSpec("activation", dict(kind=kind))


# ------------------------------------------------------------------- losses

def softmax_cross_entropy(probs, labels):
    """Mean cross entropy of softmax outputs ``probs`` against one-hot ``labels``.

    Returns ``(loss, dlogits)`` where dlogits is the gradient with respect to
    the pre-softmax activations, ``(probs - labels) / batch``.
    """
    probs = as_array(probs)
    labels = np.asarray(labels, dtype=DTYPE)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ShapeError(f"predictions {probs.shape} and labels {labels.shape} must be equal 2-D shapes")
    if not (np.isin(labels, (0, 1)).all() and (labels.sum(axis=1) == 1).all()):
        raise LabelError("labels must be one-hot rows")
    batch = probs.shape[0]
    picked = (probs * labels).sum(axis=1, dtype=np.float64)
    loss = float(-np.log(np.maximum(picked, np.finfo(np.float32).tiny)).mean())
    return loss, ((probs - labels) / np.float32(batch)).astype(DTYPE)


def squared_error(pred, target):
    """``sum((pred - target)^2) / (2 batch)`` and its gradient."""
    pred = as_array(pred)
    target = as_array(target)
    if pred.shape != target.shape:
        raise ShapeError(f"predictions {pred.shape} and targets {target.shape} differ")
    diff = pred - target
    batch = pred.shape[0]
    return float((diff.astype(np.float64) ** 2).sum() / (2 * batch)), diff / np.float32(batch)


# ------------------------------------------------------------------ network

@dataclass
class TrainReport:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    test_accuracy: float | None = None

    @property
    def epochs(self):
        return len(self.loss)


def _as_xy(data):
    if isinstance(data, Dataset):
        return data.images, data.labels, data.n_classes
    x, y = data
    y = np.asarray(y)
    n_classes = int(y.max()) + 1 if y.ndim == 1 and len(y) else (y.shape[1] if y.ndim == 2 else 0)
    return as_array(x), y, n_classes


class Network:
    def __init__(self, layers, optimizer: optim.OptimizerState, batch_size=100, seed=0,
                 input_shape=None, loss=None):
        if not layers:
            raise SpecError("a network needs at least one layer")
        if batch_size < 1:
            raise SpecError(f"batch size must be >= 1, got {batch_size}")
        self.layers: list[Layer] = list(layers)
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.seed = seed
        self.input_shape = tuple(input_shape) if input_shape else None
        if loss is None:
            last = self.layers[-1]
            loss = "cross_entropy" if getattr(last, "kind", None) == "softmax" else "mse"
        if loss not in ("cross_entropy", "mse"):
            raise SpecError(f"unknown loss {loss!r}")
        if loss == "cross_entropy" and getattr(self.layers[-1], "kind", None) != "softmax":
            raise SpecError("cross-entropy training needs a softmax output layer")
        self.loss = loss
        self._shuffle_rng = np.random.default_rng(seed)
        first = next((i for i, l in enumerate(self.layers) if l.has_params), None)
        self._first_param = first
        if first is not None and hasattr(self.layers[first], "need_dx"):
            self.layers[first].need_dx = False

    # parameters ----------------------------------------------------------
    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def force_backend(self, tag):
        """Force every conv layer onto one backend; None restores dispatch."""
        backend = ConvBackend.parse(tag) if tag is not None else None
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                if backend is None:
                    layer.valid_backend = layer.full_backend = None
                elif backend.mode == "valid":
                    layer.valid_backend = backend
                else:
                    layer.full_backend = backend

    # passes ---------------------------------------------------------------
    def _check_input(self, x):
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            if math.prod(x.shape[1:]) != math.prod(self.input_shape):
                raise ShapeError(f"network expects samples of shape {self.input_shape}, got {x.shape[1:]}")
            x = x.reshape((x.shape[0],) + self.input_shape)
        return x

    def forward(self, x, training=False):
        x = self._check_input(as_array(x))
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def forward_batch(self, x):
        return self.forward(x, training=False)

    def _loss(self, out, y):
        if self.loss == "cross_entropy":
            return softmax_cross_entropy(out, y)
        return squared_error(out, y)

    def backward(self, dy):
        layers = self.layers
        stop = self._first_param if self._first_param is not None else len(layers)
        top = len(layers) - 1
        if self.loss == "cross_entropy":
            top -= 1                    # softmax folded into the loss gradient
        for i in range(top, stop - 1, -1):
            dy = layers[i].backward(dy)

    def train_minibatch(self, x, y):
        out = self.forward(x, training=True)
        y = as_array(y)
        loss, dy = self._loss(out, y)
        self.backward(dy)
        optim.step(self.optimizer, self.params, self.grads)
        self.zero_grad()
        return loss

    def predict(self, x, chunk=1000):
        x = as_array(x)
        return np.concatenate([self.forward(x[lo:lo + chunk]) for lo in range(0, len(x), chunk)])

    def evaluate(self, data, chunk=1000):
        """Argmax accuracy in inference mode."""
        x, labels, _ = _as_xy(data)
        if len(x) == 0:
            raise ValueError("cannot evaluate on an empty dataset")
        if labels.ndim == 2:
            labels = labels.argmax(axis=1)
        correct = 0
        for lo in range(0, len(x), chunk):
            pred = self.forward(x[lo:lo + chunk]).argmax(axis=1)
            correct += int((pred == labels[lo:lo + chunk]).sum())
        return correct / len(x)

    def fit(self, data, epochs, test=None, targets=None, on_epoch=None):
        """Train for ``epochs`` passes in a freshly shuffled order each epoch.

        ``data`` is a Dataset or ``(x, labels)``; labels may be integers or
        one-hot rows. With ``targets`` the network regresses onto those arrays
        instead (autoencoders); ``data`` then only supplies inputs.
        """
        if epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {epochs}")
        if targets is None:
            x, labels, n_classes = _as_xy(data)
        else:
            x = as_array(data.images if isinstance(data, Dataset) else data)
            labels, n_classes = as_array(targets), 0
        n = len(x)
        if n == 0:
            raise ValueError("cannot train on an empty dataset")
        if len(labels) != n:
            raise ShapeError(f"{n} inputs but {len(labels)} targets")
        report = TrainReport()
        for epoch in range(epochs):
            order = self._shuffle_rng.permutation(n)
            total = 0.0
            start = time.perf_counter()
            for lo in range(0, n, self.batch_size):
                idx = order[lo:lo + self.batch_size]
                yb = labels[idx]
                if targets is None and yb.ndim == 1:
                    yb = one_hot(yb, n_classes)
                total += self.train_minibatch(x[idx], yb) * len(idx)
            report.seconds.append(time.perf_counter() - start)
            report.loss.append(total / n)
            report.accuracy.append(self.evaluate((x, labels)) if targets is None else float("nan"))
            log.info("epoch %d: loss %.5f accuracy %.4f (%.2fs)", epoch + 1, report.loss[-1],
                     report.accuracy[-1], report.seconds[-1])
            if on_epoch is not None:
                on_epoch(epoch, report)
        if test is not None:
            report.test_accuracy = self.evaluate(test)
        return report

    def fit_denoising(self, x, epochs, noise="masking", level=0.3, rng=None):
        """Autoencoder training on corrupted inputs with clean targets (squared loss)."""
        from .energy import denoising_corrupt
        rng = rng if rng is not None else np.random.default_rng(self.seed)
        x = as_array(x)
        flat = x.reshape(len(x), -1)
        return self.fit(denoising_corrupt(x, noise, level, rng), epochs, targets=flat)


# ----------------------------------------------------------------- builder

def _activation_layer(kind):
    return None if kind in (None, "identity") else Activation(kind)


def default_init(activation):
    return {"sigmoid": "glorot_sigmoid", "relu": "he"}.get(activation, "glorot")


def build_network(specs, lr=0.1, momentum=0.0, batch_size=100, seed=0, input_shape=None,
                  optimizer="sgd_momentum", weight_decay=0.0, loss=None) -> Network:
    """Instantiate layers from descriptors, checking that shapes chain."""
    specs = list(specs)
    if not specs:
        raise SpecError("empty network specification")
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(input_shape) if input_shape else None
    first = specs[0]
    if shape is None:
        if first.kind == "dense" and first.args["n_in"]:
            shape = (first.args["n_in"],)
        elif first.kind == "conv" and first.args["input_shape"]:
            shape = tuple(first.args["input_shape"])
        else:
            raise SpecError("input shape cannot be inferred from the first layer")
    net_input = shape
    for i, spec in enumerate(specs, start=1):
        a = spec.args
        if spec.kind == "dense":
            n_in = math.prod(shape)
            if a["n_in"] is not None and a["n_in"] != n_in:
                raise SpecError(f"layers {i - 1}→{i} do not chain: layer {i - 1} produces "
                                f"{n_in} values, layer {i} expects {a['n_in']}")
            if len(shape) > 1:
                layers.append(Flatten())
            layers.append(DenseLayer(n_in, a["n_out"], rng, a.get("init") or default_init(a["activation"])))
            shape = (a["n_out"],)
        elif spec.kind == "conv":
            want = a["input_shape"]
            if len(shape) != 3 or (want is not None and tuple(want) != shape):
                raise SpecError(f"layers {i - 1}→{i} do not chain: conv layer {i} needs a "
                                f"(c, h, w) input, got {shape}")
            c, h, w = shape
            try:
                layer = ConvLayer(c, h, w, a["k"], a["kh"], a["kw"], a["pad"], rng,
                                  a.get("init") or default_init(a["activation"]))
            except ShapeError as e:
                raise SpecError(f"layer {i}: {e}") from None
            layers.append(layer)
            shape = layer.output_shape(shape)
        elif spec.kind == "pool":
            layer = PoolLayer(a["mode"], a["window"])
            if len(shape) != 3:
                raise SpecError(f"layers {i - 1}→{i} do not chain: pooling needs a (c, h, w) input")
            try:
                shape = layer.output_shape(shape)
            except ShapeError as e:
                raise SpecError(f"layers {i - 1}→{i} do not chain: {e}") from None
            layers.append(layer)
            continue
        elif spec.kind == "dropout":
            layers.append(Dropout(a["p"], np.random.default_rng(rng.integers(2**63))))
            continue
        elif spec.kind == "batchnorm":
            layers.append(BatchNorm(math.prod(shape), a["momentum"], a["epsilon"]))
            continue
        elif spec.kind == "activation":
            layers.append(Activation(a["kind"]))
            continue
        else:
            raise SpecError(f"layer {i}: unknown layer kind {spec.kind!r}")
        act = _activation_layer(a["activation"])
        if act is not None:
            layers.append(act)
    opt = optim.make_optimizer(optimizer, lr=lr, momentum=momentum, weight_decay=weight_decay) \
        if optimizer == "sgd_momentum" else optim.make_optimizer(optimizer, lr=lr)
    return Network(layers, opt, batch_size, seed, net_input, loss)


def network_from_dbn(rbms, n_classes, lr=0.1, momentum=0.9, batch_size=100, seed=0,
                     activation="sigmoid") -> Network:
    """Dense network initialized from pretrained RBMs plus a softmax classifier."""
    specs = [dense(r.n_visible, r.n_hidden, activation) for r in rbms]
    specs.append(dense(rbms[-1].n_hidden, n_classes, "softmax"))
    net = build_network(specs, lr=lr, momentum=momentum, batch_size=batch_size, seed=seed)
    dense_layers = [l for l in net.layers if isinstance(l, DenseLayer)]
    for layer, rbm in zip(dense_layers, rbms):
        layer.w[...] = rbm.w
        layer.b[...] = rbm.bh
    return net


# ------------------------------------------------------------- forwarders

def forward_batch(net: Network, x):
    return net.forward_batch(x)


def train_minibatch(net: Network, x, y):
    return net.train_minibatch(x, y)


def fit(net: Network, data, epochs, test=None):
    return net.fit(data, epochs, test=test)


def evaluate(net: Network, data):
    return net.evaluate(data)


# -------------------------------------------------------------- checkpoint
#
# magic "FNN1", u32 layer count, then per layer:
#   u8 tag length, tag (ascii), u32 config count, config (i32 each),
#   u32 tensor count, per tensor: u8 rank, u32 extents, float32 data.
# All integers and floats are little-endian.

def _layer_tensors(layer):
    if isinstance(layer, BatchNorm):
        return layer.params + layer.buffers
    if isinstance(layer, Dropout):
        return [np.array([layer.p], dtype=DTYPE)]
    return layer.params


def save_checkpoint(net: Network, path) -> None:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        tag = layer.tag.encode("ascii")
        cfg = layer.config()
        out.append(struct.pack("<B", len(tag)) + tag)
        out.append(struct.pack(f"<I{len(cfg)}i", len(cfg), *cfg))
        tensors = _layer_tensors(layer)
        out.append(struct.pack("<I", len(tensors)))
        for t in tensors:
            out.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
            out.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: checkpoint truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _make_layer(tag, cfg, tensors):
    if tag == "dense":
        return DenseLayer(*cfg)
    if tag == "conv":
        return ConvLayer(*cfg)
    if tag in ("maxpool", "avgpool"):
        return PoolLayer(tag[:3], tuple(cfg))
    if tag in Activation.KINDS:
        return Activation(tag)
    if tag == "flatten":
        return Flatten()
    if tag == "dropout":
        return Dropout(float(tensors[0][0]))
    if tag == "batchnorm":
        return BatchNorm(*cfg)
    raise FormatError(f"unknown layer tag {tag!r} in checkpoint")


def load_checkpoint(path, lr=0.1, momentum=0.0, batch_size=100, seed=0) -> Network:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (count,) = r.unpack("<I")
    layers = []
    for _ in range(count):
        (tag_len,) = r.unpack("<B")
        tag = r.take(tag_len).decode("ascii")
        (n_cfg,) = r.unpack("<I")
        cfg = r.unpack(f"<{n_cfg}i")
        (n_tensors,) = r.unpack("<I")
        tensors = []
        for _ in range(n_tensors):
            (rank,) = r.unpack("<B")
            dims = r.unpack(f"<{rank}I")
            size = math.prod(dims)
            tensors.append(np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(DTYPE))
        layer = _make_layer(tag, cfg, tensors)
        target = _layer_tensors(layer) if tag != "dropout" else []
        if len(target) != len(tensors) and tag != "dropout":
            raise FormatError(f"layer {tag!r}: expected {len(target)} tensors, found {len(tensors)}")
        for dst, src in zip(target, tensors):
            if dst.shape != src.shape:
                raise FormatError(f"layer {tag!r}: tensor shape {src.shape}, expected {dst.shape}")
            dst[...] = src
        layers.append(layer)
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes after the last layer")
    input_shape = None
    first = layers[0] if layers else None
    if isinstance(first, ConvLayer):
        input_shape = (first.c_in, first.h, first.w)
    elif isinstance(first, DenseLayer):
        input_shape = (first.n_in,)
    opt = optim.make_optimizer("sgd_momentum", lr=lr, momentum=momentum)
    return Network(layers, opt, batch_size, seed, input_shape)
