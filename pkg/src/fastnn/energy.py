"""Restricted Boltzmann machines trained with contrastive divergence.

Unit kinds (both layers):

* ``binary``   mean sigmoid(a), sample Bernoulli(mean)
* ``gaussian`` mean a, sample a + N(0, 1) (unit variance, standardized inputs)
* ``relu``     mean max(0, a), sample max(0, a + N(0, sigmoid(a)))

Random draws happen in a fixed order so a seeded run can be replayed by hand:
every sampling call draws exactly one array shaped like its mean
(``rng.random`` for binary, ``rng.standard_normal`` otherwise).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .conv import conv_full, conv_valid
from .errors import ShapeError
from .kernels import gemm
from .layers import sigmoid
from .tensor import DTYPE, as_array

log = logging.getLogger(__name__)

UNIT_KINDS = ("binary", "gaussian", "relu")


def _mean(kind, a):
    if kind == "binary":
        return sigmoid(a)
    if kind == "gaussian":
        return a
    if kind == "relu":
        return np.maximum(a, 0)
    raise ValueError(f"unknown unit kind {kind!r}; expected one of {UNIT_KINDS}")


def _sample(kind, a, mean, rng):
    if kind == "binary":
        return (rng.random(mean.shape) < mean).astype(DTYPE)
    noise = rng.standard_normal(mean.shape).astype(DTYPE)
    if kind == "gaussian":
        return a + noise
    if kind == "relu":
        return np.maximum(a + noise * np.sqrt(sigmoid(a)), 0)
    raise ValueError(f"unknown unit kind {kind!r}")


def _units(kind, a, rng, sample):
    mean = _mean(kind, a)
    if not sample:
        return mean
    return _sample(kind, a, mean, rng)


@dataclass
class Rbm:
    w: np.ndarray           # hidden x visible
    bv: np.ndarray
    bh: np.ndarray
    visible_kind: str = "binary"
    hidden_kind: str = "binary"

    def __post_init__(self):
        nh, nv = self.w.shape
        if self.bv.shape != (nv,) or self.bh.shape != (nh,):
            raise ShapeError(f"biases {self.bv.shape}/{self.bh.shape} do not match weights {self.w.shape}")
        for kind in (self.visible_kind, self.hidden_kind):
            if kind not in UNIT_KINDS:
                raise ValueError(f"unknown unit kind {kind!r}")

    @property
    def n_visible(self):
        return self.w.shape[1]

    @property
    def n_hidden(self):
        return self.w.shape[0]


def make_rbm(n_visible, n_hidden, rng, visible_kind="binary", hidden_kind="binary", scale=0.01):
    w = (rng.standard_normal((n_hidden, n_visible)) * scale).astype(DTYPE)
    return Rbm(w, np.zeros(n_visible, DTYPE), np.zeros(n_hidden, DTYPE), visible_kind, hidden_kind)


def _hidden_pre(rbm, v):
    if v.ndim != 2 or v.shape[1] != rbm.n_visible:
        raise ShapeError(f"expected (batch, {rbm.n_visible}) visible units, got {v.shape}")
    return gemm(v, rbm.w, transpose_b=True) + rbm.bh


def _visible_pre(rbm, h):
    if h.ndim != 2 or h.shape[1] != rbm.n_hidden:
        raise ShapeError(f"expected (batch, {rbm.n_hidden}) hidden units, got {h.shape}")
    return gemm(h, rbm.w) + rbm.bv


def rbm_hidden_given_visible(rbm: Rbm, v, rng=None, sample=False):
    return _units(rbm.hidden_kind, _hidden_pre(rbm, as_array(v)), rng, sample)


def rbm_visible_given_hidden(rbm: Rbm, h, rng=None, sample=False):
    return _units(rbm.visible_kind, _visible_pre(rbm, as_array(h)), rng, sample)


def cd_k_update(rbm: Rbm, v0, k=1, lr=0.1, rng=None):
    """One CD-k step on a mini-batch; updates ``rbm`` in place.

    The chain is driven by sampled hidden states; the statistics use hidden
    means, and the visible side of the chain uses means. Draw order: one
    hidden sample per Gibbs step (k draws in total). Returns the
    reconstruction error ``||v0 - v1||^2 / batch`` with v1 the first
    reconstruction.
    """
    if k < 1:
        raise ValueError(f"CD needs at least one Gibbs step, got k={k}")
    v0 = as_array(v0)
    batch = v0.shape[0]
    a0 = _hidden_pre(rbm, v0)
    h0 = _mean(rbm.hidden_kind, a0)
    hs = _sample(rbm.hidden_kind, a0, h0, rng)
    recon_error = None
    for step in range(k):
        vk = _mean(rbm.visible_kind, _visible_pre(rbm, hs))
        ak = _hidden_pre(rbm, vk)
        hk = _mean(rbm.hidden_kind, ak)
        if step == 0:
            recon_error = float(((v0 - vk) ** 2).sum() / batch)
        if step + 1 < k:
            hs = _sample(rbm.hidden_kind, ak, hk, rng)
    scale = np.float32(lr / batch)
    dw = gemm(h0, v0, transpose_a=True) - gemm(hk, vk, transpose_a=True)
    rbm.w += scale * dw
    rbm.bv += scale * (v0.sum(axis=0) - vk.sum(axis=0))
    rbm.bh += scale * (h0.sum(axis=0) - hk.sum(axis=0))
    return recon_error


def rbm_free_energy(rbm: Rbm, v):
    """Free energy of each visible vector (binary-binary RBMs only)."""
    if rbm.visible_kind != "binary" or rbm.hidden_kind != "binary":
        raise ValueError("free energy is implemented for binary-binary RBMs only")
    v = as_array(v)
    a = _hidden_pre(rbm, v).astype(np.float64)
    return -(v.astype(np.float64) @ rbm.bv.astype(np.float64)) - np.logaddexp(0.0, a).sum(axis=1)


def train_rbm(rbm: Rbm, data, epochs, lr=0.1, rng=None, batch_size=100, k=1, shuffle=True):
    """Mini-batch CD-k; returns the mean reconstruction error of each epoch."""
    data = as_array(data)
    n = data.shape[0]
    history = []
    for _ in range(epochs):
        order = rng.permutation(n) if shuffle else np.arange(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            total += cd_k_update(rbm, data[idx], k=k, lr=lr, rng=rng) * len(idx)
        history.append(total / n)
    return history


def dbn_pretrain(rbms, data, epochs, lr=0.1, rng=None, batch_size=100, on_layer=None):
    """Greedy layer-wise CD-1 pretraining.

    Layer i is trained on the hidden means of layer i-1. ``on_layer(i, inputs)``
    is called with each layer's training input before it is trained. Returns a
    list of per-layer reconstruction-error histories.
    """
    for i in range(1, len(rbms)):
        if rbms[i].n_visible != rbms[i - 1].n_hidden:
            raise ShapeError(f"RBM {i} has {rbms[i].n_visible} visible units but "
                             f"RBM {i - 1} has {rbms[i - 1].n_hidden} hidden units")
    x = as_array(data)
    if x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    histories = []
    for i, rbm in enumerate(rbms):
        if on_layer is not None:
            on_layer(i, x)
        histories.append(train_rbm(rbm, x, epochs, lr=lr, rng=rng, batch_size=batch_size))
        log.info("dbn layer %d: reconstruction error %.4f", i, histories[-1][-1])
        x = rbm_hidden_given_visible(rbm, x)
    return histories


# --------------------------------------------------------------------- CRBM

@dataclass
class Crbm:
    kernels: np.ndarray     # k x c_in x kh x kw
    bv: np.ndarray          # one per input channel
    bh: np.ndarray          # one per kernel
    visible_kind: str = "binary"
    hidden_kind: str = "binary"

    def __post_init__(self):
        k, c = self.kernels.shape[:2]
        if self.bv.shape != (c,) or self.bh.shape != (k,):
            raise ShapeError("CRBM biases do not match the kernel tensor")


def make_crbm(c_in, k, kh, kw, rng, visible_kind="binary", hidden_kind="binary", scale=0.01):
    kernels = (rng.standard_normal((k, c_in, kh, kw)) * scale).astype(DTYPE)
    return Crbm(kernels, np.zeros(c_in, DTYPE), np.zeros(k, DTYPE), visible_kind, hidden_kind)


def _crbm_hidden_pre(crbm, v):
    return conv_valid(v, crbm.kernels) + crbm.bh[None, :, None, None]


def _crbm_visible_pre(crbm, h):
    kt = np.ascontiguousarray(crbm.kernels.transpose(1, 0, 2, 3))
    return conv_full(h, kt) + crbm.bv[None, :, None, None]


def crbm_hidden_given_visible(crbm: Crbm, v, rng=None, sample=False):
    v = as_array(v)
    if v.ndim != 4 or v.shape[1] != crbm.kernels.shape[1]:
        raise ShapeError(f"visible tensor {v.shape} does not match kernels {crbm.kernels.shape}")
    return _units(crbm.hidden_kind, _crbm_hidden_pre(crbm, v), rng, sample)


def crbm_visible_given_hidden(crbm: Crbm, h, rng=None, sample=False):
    h = as_array(h)
    if h.ndim != 4 or h.shape[1] != crbm.kernels.shape[0]:
        raise ShapeError(f"hidden tensor {h.shape} does not match kernels {crbm.kernels.shape}")
    return _units(crbm.visible_kind, _crbm_visible_pre(crbm, h), rng, sample)


def _crbm_weight_stats(v, h):
    # sum_n xcorr(v[n,c], h[n,k]) -> (k, c, kh, kw)
    s = conv_valid(np.ascontiguousarray(v.transpose(1, 0, 2, 3)),
                   np.ascontiguousarray(h.transpose(1, 0, 2, 3)))
    return s.transpose(1, 0, 2, 3)


def crbm_cd_update(crbm: Crbm, v0, lr=0.1, rng=None):
    """One CD-1 step (same recipe and draw order as ``cd_k_update``)."""
    v0 = as_array(v0)
    if v0.ndim != 4 or v0.shape[1] != crbm.kernels.shape[1]:
        raise ShapeError(f"visible tensor {v0.shape} does not match kernels {crbm.kernels.shape}")
    batch = v0.shape[0]
    a0 = _crbm_hidden_pre(crbm, v0)
    h0 = _mean(crbm.hidden_kind, a0)
    hs = _sample(crbm.hidden_kind, a0, h0, rng)
    v1 = _mean(crbm.visible_kind, _crbm_visible_pre(crbm, hs))
    h1 = _mean(crbm.hidden_kind, _crbm_hidden_pre(crbm, v1))
    recon_error = float(((v0 - v1) ** 2).sum() / batch)
    scale = np.float32(lr / batch)
    crbm.kernels += scale * (_crbm_weight_stats(v0, h0) - _crbm_weight_stats(v1, h1))
    crbm.bv += scale * (v0.sum(axis=(0, 2, 3)) - v1.sum(axis=(0, 2, 3)))
    crbm.bh += scale * (h0.sum(axis=(0, 2, 3)) - h1.sum(axis=(0, 2, 3)))
    return recon_error


# ------------------------------------------------------------- denoising AE

def denoising_corrupt(x, noise="masking", level=0.0, rng=None):
    """Corrupt inputs for denoising autoencoder training.

    ``masking`` zeroes each element with probability ``level``; ``gaussian``
    adds N(0, level^2).
    """
    x = as_array(x)
    if noise == "masking":
        if not 0 <= level < 1:
            raise ValueError(f"masking probability must be in [0, 1), got {level}")
        if level == 0:
            return x.copy()
        return x * (rng.random(x.shape) >= level).astype(DTYPE)
    if noise == "gaussian":
        if level < 0:
            raise ValueError(f"noise sigma must be >= 0, got {level}")
        if level == 0:
            return x.copy()
        return x + (rng.standard_normal(x.shape) * level).astype(DTYPE)
    raise ValueError(f"unknown noise kind {noise!r}")
