import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastnn.errors import ShapeError
from fastnn.optim import (KINDS, OptimizerState, adadelta_step, adagrad_step, adam_step, make_optimizer,
                          sgd_momentum_step, step)

from oracles import adadelta_trace, adagrad_trace, adam_trace, sgd_trace

RULES = {"sgd_momentum": sgd_momentum_step, "adagrad": adagrad_step,
         "adadelta": adadelta_step, "adam": adam_step}


def scalar(v=0.0):
    return np.array([v], np.float32)


def run(rule, state, x0, grads):
    p = scalar(x0)
    out = []
    for g in grads:
        rule(state, p, scalar(g))
        out.append(p[0])
    return out


def test_sgd_examples():
    assert run(sgd_momentum_step, OptimizerState(lr=0.1), 0, [1]) == [np.float32(-0.1)]
    two = run(sgd_momentum_step, OptimizerState(lr=0.1, momentum=0.9), 0, [1, 1])
    assert two[-1] == pytest.approx(-0.29, abs=1e-7)
    assert run(sgd_momentum_step, OptimizerState(lr=0.1, momentum=0.9), 3, [0]) == [3]


def test_sgd_weight_decay():
    out = run(sgd_momentum_step, OptimizerState(lr=0.1, weight_decay=0.5), 2, [0])
    assert out[0] == pytest.approx(2 - 0.1 * 0.5 * 2)


def test_adagrad_examples():
    first = run(adagrad_step, OptimizerState("adagrad", lr=0.1, eps=0), 0, [1, 1])
    assert first[0] == pytest.approx(-0.1)
    assert first[1] - first[0] == pytest.approx(-0.1 / np.sqrt(2), rel=1e-6)
    assert run(adagrad_step, OptimizerState("adagrad", lr=0.1), 1, [0]) == [1]


def test_adadelta_examples():
    out = run(adadelta_step, OptimizerState("adadelta", lr=1.0, rho=0.9, eps=1e-6), 0, [1])
    assert out[0] == pytest.approx(-np.sqrt(1e-6) / np.sqrt(0.1 + 1e-6), rel=1e-5)
    assert run(adadelta_step, OptimizerState("adadelta", lr=1.0), 1, [0]) == [1]


@given(st.floats(-10, 10).filter(lambda g: abs(g) > 1e-3))
def test_adadelta_step_opposes_gradient(g):
    d = run(adadelta_step, OptimizerState("adadelta", lr=1.0), 0, [g])[0]
    assert np.sign(d) == -np.sign(g)


@given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3))
def test_adam_first_step_magnitude_is_lr(g):
    d = run(adam_step, OptimizerState("adam", lr=0.01, eps=0), 0, [g])[0]
    assert abs(d) == pytest.approx(0.01, rel=1e-5)
    assert np.sign(d) == -np.sign(g)


def test_adam_zero_gradient_is_constant():
    assert run(adam_step, OptimizerState("adam", lr=0.01), 1.5, [0] * 10) == [1.5] * 10


GRADS = [0.5, -1.25, 2.0]


@pytest.mark.parametrize("kind,oracle,kw", [
    ("sgd_momentum", lambda: sgd_trace(1.0, GRADS, 0.1, 0.9, 0.01), dict(lr=0.1, momentum=0.9, weight_decay=0.01)),
    ("adagrad", lambda: adagrad_trace(1.0, GRADS, 0.1), dict(lr=0.1)),
    ("adadelta", lambda: adadelta_trace(1.0, GRADS), dict(lr=1.0)),
    ("adam", lambda: adam_trace(1.0, GRADS), dict(lr=0.001)),
])
def test_three_step_traces_exact(kind, oracle, kw):
    assert run(RULES[kind], OptimizerState(kind, **kw), 1.0, GRADS) == oracle()


@pytest.mark.parametrize("kind", KINDS)
def test_quadratic_decreases(kind):
    state = make_optimizer(kind, **({"lr": 0.01} if kind == "sgd_momentum" else {}))
    x = scalar(1.0)
    for _ in range(100):
        step(state, [x], [2 * x])
    assert x[0] ** 2 < 1.0


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 2**31))
def test_rules_are_elementwise(kind, seed):
    r = np.random.default_rng(seed)
    p = r.standard_normal(12).astype(np.float32)
    grads = [r.standard_normal(12).astype(np.float32) for _ in range(3)]
    perm = r.permutation(12)
    a, b = p.copy(), p[perm].copy()
    kw = {"momentum": 0.5} if kind == "sgd_momentum" else {}
    sa, sb = make_optimizer(kind, **kw), make_optimizer(kind, **kw)
    for g in grads:
        RULES[kind](sa, a, g)
        RULES[kind](sb, b, g[perm])
    out = np.empty_like(b)
    out[perm] = b
    np.testing.assert_array_equal(a, out)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_gradient_is_noop(kind):
    state = make_optimizer(kind)
    p = np.linspace(-1, 1, 7, dtype=np.float32)
    before = p.copy()
    for _ in range(5):
        step(state, [p], [np.zeros_like(p)])
    np.testing.assert_array_equal(p, before)


def test_slots_are_per_parameter():
    state = make_optimizer("sgd_momentum", lr=0.1, momentum=0.9)
    a, b = scalar(), np.zeros((2, 2), np.float32)
    step(state, [a, b], [scalar(1), np.ones((2, 2), np.float32)])
    assert state.slots[0]["v"].shape == (1,) and state.slots[1]["v"].shape == (2, 2)
    with pytest.raises(ShapeError):
        step(state, [b, a], [b, a])


def test_validation():
    with pytest.raises(ShapeError):
        sgd_momentum_step(OptimizerState(), scalar(), np.zeros(2, np.float32))
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")
    with pytest.raises(ValueError):
        OptimizerState(lr=-1)
    with pytest.raises(ValueError):
        OptimizerState(momentum=1.0)


def test_defaults():
    assert make_optimizer("adam").lr == 0.001
    assert make_optimizer("adadelta").lr == 1.0
    s = make_optimizer("adam")
    assert (s.beta1, s.beta2, s.eps, s.rho) == (0.9, 0.999, 1e-8, 0.95)
