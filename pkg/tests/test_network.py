import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastnn import network as nw
from fastnn.data import Dataset
from fastnn.energy import make_rbm
from fastnn.errors import FormatError, LabelError, ShapeError, SpecError
from fastnn.layers import ConvLayer, DenseLayer, Flatten, softmax
from fastnn.network import (activation, avgpool, batchnorm, build_network, conv, dense, dropout, maxpool,
                            softmax_cross_entropy, squared_error)

from conftest import needs
from oracles import numeric_grad, rel_err


def toy_data(rng, n=40, d=6, classes=3):
    x = rng.standard_normal((n, d)).astype(np.float32)
    return x, rng.integers(0, classes, n)


# ----------------------------------------------------------------- builder

def test_mnist_dense_architecture():
    net = build_network([dense(784, 500), dense(500, 250), dense(250, 10, "softmax")])
    dense_layers = [l for l in net.layers if isinstance(l, DenseLayer)]
    assert [(l.n_in, l.n_out) for l in dense_layers] == [(784, 500), (500, 250), (250, 10)]
    assert [l.tag for l in net.layers] == ["dense", "sigmoid", "dense", "sigmoid", "dense", "softmax"]
    assert net.loss == "cross_entropy"


def test_empty_spec():
    with pytest.raises(SpecError, match="empty"):
        build_network([])


def test_chain_break_names_the_pair():
    with pytest.raises(SpecError, match="layers 1→2"):
        build_network([dense(784, 500), dense(400, 10, "softmax")])


def test_conv_chain_and_pool_errors():
    # 7x7 -> 5x5 after the conv, which a 2x2 pool cannot tile
    with pytest.raises(SpecError, match="layers 1→2"):
        build_network([conv(4, 3, input_shape=(1, 7, 7)), maxpool(), dense(n_out=2)])
    with pytest.raises(SpecError):
        build_network([dense(10, 5), conv(2, 3)])
    with pytest.raises(SpecError):
        build_network([conv(2, 9, input_shape=(1, 5, 5))])
    with pytest.raises(SpecError):
        build_network([maxpool()])


def test_cnn_shapes_and_inserted_flatten():
    net = build_network([conv(8, 5, input_shape=(1, 28, 28)), maxpool(), conv(8, 5), maxpool(),
                         dense(n_out=150), dense(n_out=10, activation="softmax")])
    convs = [l for l in net.layers if isinstance(l, ConvLayer)]
    assert [(c.c_in, c.h, c.w) for c in convs] == [(1, 28, 28), (8, 12, 12)]
    assert any(isinstance(l, Flatten) for l in net.layers)
    assert net.layers[net.layers.index(next(l for l in net.layers if isinstance(l, Flatten))) + 1].n_in == 128
    assert net.forward(np.zeros((2, 784), np.float32)).shape == (2, 10)


def test_activation_matched_init():
    net = build_network([dense(100, 50, "relu"), dense(50, 10, "softmax")])
    assert np.abs(net.layers[0].w).max() > np.sqrt(6 / 150)  # He bound is wider than Glorot
    explicit = build_network([dense(100, 50, "relu", init="glorot"), dense(50, 10, "softmax")])
    assert np.abs(explicit.layers[0].w).max() <= np.sqrt(6 / 150)


def test_seeded_construction_is_deterministic():
    specs = [dense(6, 4), dense(4, 3, "softmax")]
    a, b = build_network(specs, seed=3), build_network(specs, seed=3)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)


# ------------------------------------------------------------------ losses

def test_cross_entropy_examples():
    y = np.eye(3, dtype=np.float32)[[0, 2]]
    assert softmax_cross_entropy(y.copy(), y)[0] == 0
    uniform = np.full((2, 10), 0.1, np.float32)
    loss, _ = softmax_cross_entropy(uniform, np.eye(10, dtype=np.float32)[[3, 7]])
    assert loss == pytest.approx(np.log(10), rel=1e-6)


def test_cross_entropy_gradient_wrt_logits(rng):
    z = rng.standard_normal((2, 3)).astype(np.float32)
    y = np.eye(3, dtype=np.float32)[[1, 2]]
    _, g = softmax_cross_entropy(softmax(z), y)
    num = numeric_grad(lambda: softmax_cross_entropy(softmax(z), y)[0], [z], h=1e-3)[0]
    assert rel_err(g, num) < 1e-3


def test_cross_entropy_validation():
    with pytest.raises(LabelError):
        softmax_cross_entropy(np.full((1, 2), 0.5, np.float32), np.array([[0.5, 0.5]], np.float32))
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.full((1, 2), 0.5, np.float32), np.array([[1, 0, 0]], np.float32))


def test_cross_entropy_zero_probability_is_finite():
    loss, _ = softmax_cross_entropy(np.array([[0, 1]], np.float32), np.array([[1, 0]], np.float32))
    assert np.isfinite(loss)


def test_squared_error():
    loss, g = squared_error(np.array([[1, 2]], np.float32), np.array([[0, 0]], np.float32))
    assert loss == 2.5 and g.tolist() == [[1, 2]]


# ----------------------------------------------------------------- forward

def test_softmax_rows_sum_to_one(rng):
    net = build_network([dense(5, 4, "softmax")])
    out = net.forward_batch(rng.standard_normal((6, 5)).astype(np.float32))
    np.testing.assert_allclose(out.sum(axis=1), 1, rtol=1e-6)


def test_frozen_forward_repeatable(rng):
    net = build_network([dense(5, 8), dropout(0.5), batchnorm(), dense(8, 3, "softmax")])
    x = rng.standard_normal((4, 5)).astype(np.float32)
    np.testing.assert_array_equal(nw.forward_batch(net, x), nw.forward_batch(net, x))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31))
def test_batch_forward_equals_stacked(batch, seed):
    r = np.random.default_rng(seed)
    net = build_network([conv(3, 3, input_shape=(2, 6, 6)), avgpool(), dense(n_out=4, activation="softmax")],
                        seed=seed)
    x = r.standard_normal((batch, 2, 6, 6)).astype(np.float32)
    rows = np.vstack([net.forward_batch(x[i:i + 1]) for i in range(batch)])
    np.testing.assert_allclose(net.forward_batch(x), rows, rtol=1e-5, atol=1e-6)


def test_input_shape_checked(rng):
    net = build_network([conv(2, 3, input_shape=(1, 5, 5)), dense(n_out=2, activation="softmax")])
    assert net.forward(np.zeros((1, 25), np.float32)).shape == (1, 2)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 24), np.float32))


# ---------------------------------------------------------------- training

def test_end_to_end_gradients(rng):
    net = build_network([dense(6, 4), dense(4, 3, "softmax")], seed=1)
    x, labels = toy_data(rng, n=5)
    y = np.eye(3, dtype=np.float32)[labels]
    net.zero_grad()
    loss, dy = softmax_cross_entropy(net.forward(x, training=True), y)
    net.backward(dy)
    analytic = [g.copy() for g in net.grads]
    num = numeric_grad(lambda: softmax_cross_entropy(net.forward(x), y)[0], net.params, h=1e-2)
    assert max(rel_err(a, n) for a, n in zip(analytic, num)) < 1e-2


def test_end_to_end_gradients_cnn(rng):
    net = build_network([conv(2, 3, input_shape=(1, 6, 6)), avgpool(), dense(n_out=3, activation="softmax")],
                        seed=2)
    x = rng.standard_normal((3, 1, 6, 6)).astype(np.float32)
    y = np.eye(3, dtype=np.float32)[[0, 1, 2]]
    net.zero_grad()
    _, dy = softmax_cross_entropy(net.forward(x, training=True), y)
    net.backward(dy)
    analytic = [g.copy() for g in net.grads]
    num = numeric_grad(lambda: softmax_cross_entropy(net.forward(x), y)[0], net.params, h=1e-2)
    assert max(rel_err(a, n) for a, n in zip(analytic, num)) < 1e-2


def test_lr_zero_leaves_params_and_reports_loss(rng):
    net = build_network([dense(6, 4), dense(4, 3, "softmax")], lr=0.0)
    before = [p.copy() for p in net.params]
    x, labels = toy_data(rng, n=8)
    y = np.eye(3, dtype=np.float32)[labels]
    loss = nw.train_minibatch(net, x, y)
    for p, q in zip(net.params, before):
        np.testing.assert_array_equal(p, q)
    assert loss == pytest.approx(softmax_cross_entropy(net.forward(x), y)[0], rel=1e-6)


def test_one_step_decreases_loss():
    net = build_network([dense(2, 2, "softmax")], lr=0.5)
    x = np.array([[1, 0], [0, 1]], np.float32)
    y = np.eye(2, dtype=np.float32)
    first = net.train_minibatch(x, y)
    assert softmax_cross_entropy(net.forward(x), y)[0] < first


def test_gradients_cleared_after_step(rng):
    net = build_network([dense(6, 4), dense(4, 3, "softmax")])
    x, labels = toy_data(rng, n=8)
    net.train_minibatch(x, np.eye(3, dtype=np.float32)[labels])
    assert all(not g.any() for g in net.grads)


def test_fit_batch_count(monkeypatch, rng):
    net = build_network([dense(6, 4), dense(4, 3, "softmax")], batch_size=100)
    calls = []
    real = net.train_minibatch
    monkeypatch.setattr(net, "train_minibatch", lambda x, y: calls.append(len(x)) or real(x, y))
    report = nw.fit(net, toy_data(rng, n=200), 1)
    assert calls == [100, 100] and report.epochs == 1
    calls.clear()
    net.fit(toy_data(rng, n=250), 1)
    assert calls == [100, 100, 50]


def test_fit_validation(rng):
    net = build_network([dense(6, 4), dense(4, 3, "softmax")])
    with pytest.raises(ValueError):
        net.fit(toy_data(rng), 0)
    with pytest.raises(ValueError):
        net.fit((np.zeros((0, 6), np.float32), np.zeros(0, np.int64)), 1)


def test_evaluate_constant_predictor():
    net = build_network([dense(3, 2, "softmax")])
    net.layers[0].w[...] = 0
    net.layers[0].b[...] = [5, 0]
    ds = Dataset(np.zeros((7, 1, 1, 3), np.float32), np.zeros(7, np.int64))
    assert nw.evaluate(net, ds) == 1.0


def test_fit_is_deterministic(rng):
    data = toy_data(rng, n=64)
    reports = [build_network([dense(6, 5), dense(5, 3, "softmax")], seed=4, batch_size=16).fit(data, 3)
               for _ in range(2)]
    assert reports[0].loss == reports[1].loss
    assert all(s > 0 for s in reports[0].seconds)


def test_fit_learns_separable_toy(rng):
    x = rng.standard_normal((200, 2)).astype(np.float32)
    labels = (x[:, 0] + x[:, 1] > 0).astype(np.int64)
    net = build_network([dense(2, 8), dense(8, 2, "softmax")], lr=0.5, momentum=0.9, batch_size=20)
    report = net.fit((x, labels), 20, test=(x, labels))
    assert report.loss[-1] < report.loss[0] and report.test_accuracy > 0.95


@pytest.mark.parametrize("opt", ["adagrad", "adadelta", "adam"])
def test_other_optimizers_train(rng, opt):
    x = rng.standard_normal((200, 2)).astype(np.float32)
    labels = (x[:, 0] > 0).astype(np.int64)
    lr = {"adagrad": 0.1, "adadelta": 1.0, "adam": 0.01}[opt]
    net = build_network([dense(2, 8), dense(8, 2, "softmax")], lr=lr, optimizer=opt, batch_size=20)
    report = net.fit((x, labels), 10)
    assert report.loss[-1] < report.loss[0]


def test_force_backend_changes_nothing_numerically(rng):
    specs = [conv(3, 5, input_shape=(1, 12, 12)), maxpool(), dense(n_out=4, activation="softmax")]
    x = rng.standard_normal((20, 1, 12, 12)).astype(np.float32)
    labels = rng.integers(0, 4, 20)
    losses = []
    for tag in ("DirectValid", "Im2colGemm"):
        net = build_network(specs, seed=0, batch_size=10)
        net.force_backend(tag)
        net.force_backend("FftFull" if tag == "DirectValid" else "PaddedValidFull")
        assert net.layers[0].valid_backend is not None and net.layers[0].full_backend is not None
        losses.append(net.fit((x, labels), 2).loss[-1])
    assert abs(losses[0] - losses[1]) / losses[0] < 1e-4
    net.force_backend(None)
    assert net.layers[0].valid_backend is None


def test_denoising_autoencoder(rng):
    x = (rng.random((100, 8)) > 0.5).astype(np.float32)
    net = build_network([dense(8, 16), dense(16, 8, "sigmoid")], lr=0.5, momentum=0.5, batch_size=10)
    assert net.loss == "mse"
    report = net.fit_denoising(x, 30, level=0.2, rng=np.random.default_rng(0))
    assert report.loss[-1] < report.loss[0]


def test_network_from_dbn(rng):
    rbms = [make_rbm(6, 4, rng, scale=1.0), make_rbm(4, 3, rng, scale=1.0)]
    net = nw.network_from_dbn(rbms, 5)
    np.testing.assert_array_equal(net.layers[0].w, rbms[0].w)
    np.testing.assert_array_equal(net.layers[2].w, rbms[1].w)
    assert net.forward(np.zeros((1, 6), np.float32)).shape == (1, 5)


@needs("mnist")
def test_mnist_dense_config_runs_on_subset():
    from fastnn import data
    ds = data.scale_pre(data.subset(data.mnist("train"), 1000), 255)
    net = build_network([dense(784, 500), dense(500, 250), dense(250, 10, "softmax")],
                        lr=0.1, momentum=0.9, batch_size=100)
    report = net.fit(ds, 1)
    assert report.epochs == 1 and np.isfinite(report.loss[0])


# -------------------------------------------------------------- checkpoint

def _full_net():
    return build_network([conv(3, 3, input_shape=(2, 8, 8)), maxpool(), batchnorm(), dropout(0.3),
                          activation("relu"), dense(n_out=5, activation="softmax")], seed=5)


def test_checkpoint_round_trip(tmp_path, rng):
    net = _full_net()
    x = rng.standard_normal((16, 2, 8, 8)).astype(np.float32)
    net.fit((x, rng.integers(0, 5, 16)), 2)  # moves batch-norm running statistics
    path = tmp_path / "net.fnn"
    nw.save_checkpoint(net, path)
    assert path.read_bytes()[:4] == b"FNN1"
    loaded = nw.load_checkpoint(path)
    np.testing.assert_array_equal(loaded.forward_batch(x), net.forward_batch(x))
    assert [l.tag for l in loaded.layers] == [l.tag for l in net.layers]
    nw.save_checkpoint(loaded, tmp_path / "again.fnn")
    assert (tmp_path / "again.fnn").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "net.fnn"
    nw.save_checkpoint(_full_net(), path)
    raw = path.read_bytes()
    for bad in (b"XNN1" + raw[4:], raw[:-3], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            nw.load_checkpoint(path)
