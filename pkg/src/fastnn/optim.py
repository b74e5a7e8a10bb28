"""Parameter update rules: SGD with momentum/weight decay, Adagrad, Adadelta, Adam.

Every rule is elementwise and updates ``param`` in place. Per-parameter state
(velocity, accumulators, moments, step count) lives in ``state.slots`` keyed
by the caller-supplied ``key``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

KINDS = ("sgd_momentum", "adagrad", "adadelta", "adam")


@dataclass
class OptimizerState:
    kind: str = "sgd_momentum"
    lr: float = 0.1
    momentum: float = 0.0
    weight_decay: float = 0.0
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.95
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    def slot(self, key, param, *names):
        s = self.slots.get(key)
        if s is None:
            s = {name: np.zeros_like(param) for name in names}
            s["t"] = 0
            self.slots[key] = s
        elif s[names[0]].shape != param.shape:
            raise ShapeError(f"optimizer slot {key!r} has shape {s[names[0]].shape}, param {param.shape}")
        return s


def _check(param, grad):
    if param.shape != grad.shape:
        raise ShapeError(f"gradient {grad.shape} does not match parameter {param.shape}")


def sgd_momentum_step(state: OptimizerState, param, grad, key=0):
    _check(param, grad)
    s = state.slot(key, param, "v")
    g = grad + np.float32(state.weight_decay) * param
    s["v"][...] = np.float32(state.momentum) * s["v"] - np.float32(state.lr) * g
    param += s["v"]
    return param


def adagrad_step(state: OptimizerState, param, grad, key=0):
    _check(param, grad)
    s = state.slot(key, param, "acc")
    s["acc"] += grad * grad
    param -= np.float32(state.lr) * grad / (np.sqrt(s["acc"]) + np.float32(state.eps))
    return param


def adadelta_step(state: OptimizerState, param, grad, key=0):
    """Zeiler's rule; ``state.lr`` scales the step (1.0 gives the textbook update)."""
    _check(param, grad)
    s = state.slot(key, param, "eg", "ex")
    rho = np.float32(state.rho)
    eps = np.float32(state.eps)
    s["eg"][...] = rho * s["eg"] + (1 - rho) * grad * grad
    delta = -np.sqrt(s["ex"] + eps) / np.sqrt(s["eg"] + eps) * grad
    s["ex"][...] = rho * s["ex"] + (1 - rho) * delta * delta
    param += np.float32(state.lr) * delta
    return param


def adam_step(state: OptimizerState, param, grad, key=0):
    _check(param, grad)
    s = state.slot(key, param, "m", "v")
    s["t"] += 1
    t = s["t"]
    b1 = np.float32(state.beta1)
    b2 = np.float32(state.beta2)
    s["m"][...] = b1 * s["m"] + (1 - b1) * grad
    s["v"][...] = b2 * s["v"] + (1 - b2) * grad * grad
    mhat = s["m"] / np.float32(1 - state.beta1 ** t)
    vhat = s["v"] / np.float32(1 - state.beta2 ** t)
    param -= np.float32(state.lr) * mhat / (np.sqrt(vhat) + np.float32(state.eps))
    return param


_STEPS = {
    "sgd_momentum": sgd_momentum_step,
    "adagrad": adagrad_step,
    "adadelta": adadelta_step,
    "adam": adam_step,
}


def step(state: OptimizerState, params, grads):
    """Apply one update to every (param, grad) pair, keyed by position."""
    rule = _STEPS[state.kind]
    for i, (p, g) in enumerate(zip(params, grads)):
        rule(state, p, g, key=i)


def make_optimizer(kind="sgd_momentum", **kwargs) -> OptimizerState:
    if kind == "adadelta":
        kwargs.setdefault("lr", 1.0)
    elif kind == "adam":
        kwargs.setdefault("lr", 0.001)
    elif kind == "adagrad":
        kwargs.setdefault("lr", 0.01)
    return OptimizerState(kind=kind, **kwargs)
