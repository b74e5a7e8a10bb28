"""Benchmark CLI: built-in experiments, conv dispatch calibration, CSV reports.

    fastnn-bench list
    fastnn-bench run mnist_dense --epochs 5 --subset 5000 --csv out.csv
    fastnn-bench calibrate --out conv_calibration.txt
"""

from __future__ import annotations

import argparse
import csv
import logging
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config, data, kernels
from .conv import (FULL_BACKENDS, IMPLEMENTATIONS, VALID_BACKENDS, ConvBackend, ConvShape, Rule,
                   dispatch_full, dispatch_valid, sort_rules, write_calibration)
from .errors import DataMissingError
from .network import TrainReport, build_network, conv, dense, maxpool

log = logging.getLogger(__name__)

CSV_HEADER = ("experiment", "backend", "epoch", "seconds", "loss", "accuracy")
DESK_EPOCHS = 5
DESK_SUBSET = 5000


@dataclass
class ExperimentConfig:
    name: str
    dataset: str
    layers: list
    input_shape: tuple
    epochs: int = 50
    batch_size: int = 100
    lr: float = 0.1
    momentum: float = 0.9
    subset: int | None = None
    seed: int = 0
    forced_backend: ConvBackend | None = None
    preprocess: str = "scale255"
    notes: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.subset is not None and self.subset < 1:
            raise ValueError(f"subset must be >= 1, got {self.subset}")
        if self.forced_backend is not None:
            self.forced_backend = ConvBackend.parse(self.forced_backend)


@dataclass
class BenchRecord:
    experiment: str
    backend: str
    epoch: int
    seconds: float
    loss: float
    accuracy: float


def _mnist_dense():
    return [dense(784, 500, "sigmoid"), dense(500, 250, "sigmoid"), dense(250, 10, "softmax")]


def _mnist_cnn():
    return [conv(8, 5, activation="sigmoid"), maxpool(2), conv(8, 5, activation="sigmoid"), maxpool(2),
            dense(n_out=150, activation="sigmoid"), dense(n_out=10, activation="softmax")]


def _cifar_cnn():
    return [conv(12, 5, activation="relu"), maxpool(2), conv(24, 3, activation="relu"), maxpool(2),
            dense(n_out=64, activation="relu"), dense(n_out=10, activation="softmax")]


EXPERIMENTS = {
    "mnist_dense": dict(dataset="mnist", layers=_mnist_dense, input_shape=(1, 28, 28)),
    "mnist_cnn": dict(dataset="mnist", layers=_mnist_cnn, input_shape=(1, 28, 28),
                      notes="lr 0.1 and momentum 0.9 inherited from mnist_dense"),
    "cifar_cnn": dict(dataset="cifar10", layers=_cifar_cnn, input_shape=(3, 32, 32), lr=0.001,
                      preprocess="standardize"),
}


def builtin_experiment(name, **overrides) -> ExperimentConfig:
    """Full-scale settings (50 epochs, whole training set) unless overridden."""
    if name not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    base = dict(EXPERIMENTS[name])
    base["layers"] = base["layers"]()
    base.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(name=name, **base)


def load_experiment_data(cfg: ExperimentConfig):
    loader = data.mnist if cfg.dataset == "mnist" else data.cifar10
    train = loader("train")
    test = loader("test")
    if cfg.subset is not None and cfg.subset > len(train):
        raise ValueError(f"subset {cfg.subset} exceeds the {len(train)} training samples")
    train = data.subset(train, cfg.subset)
    if cfg.preprocess == "standardize":
        train, mean, std = data.standardize(train)
        test, _, _ = data.standardize(test, mean, std)
    else:
        train, test = data.scale_pre(train, 255), data.scale_pre(test, 255)
    return train, test


def build_experiment_network(cfg: ExperimentConfig):
    net = build_network(cfg.layers, lr=cfg.lr, momentum=cfg.momentum, batch_size=cfg.batch_size,
                        seed=cfg.seed, input_shape=cfg.input_shape)
    if cfg.forced_backend is not None:
        net.force_backend(cfg.forced_backend)
    return net


def run_experiment(cfg: ExperimentConfig, csv_path=None, datasets=None):
    """Train per ``cfg``; returns ``(report, records)`` and optionally writes CSV."""
    train, test = datasets if datasets is not None else load_experiment_data(cfg)
    net = build_experiment_network(cfg)
    report: TrainReport = net.fit(train, cfg.epochs, test=test)
    tag = cfg.forced_backend.value if cfg.forced_backend is not None else "dispatch"
    records = [BenchRecord(cfg.name, tag, i + 1, s, l, a)
               for i, (s, l, a) in enumerate(zip(report.seconds, report.loss, report.accuracy))]
    if csv_path is not None:
        emit_csv(records, csv_path)
    return report, records


def emit_csv(records, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.experiment, r.backend, r.epoch, f"{r.seconds:.6g}", f"{r.loss:.6g}",
                        f"{r.accuracy:.6g}"])
    return path


# -------------------------------------------------------------- calibration

def _training_shapes(batch, c_in, h, w, k, kh, kw, with_dx=True):
    """The convolutions one conv layer runs per training step."""
    oh, ow = h - kh + 1, w - kw + 1
    shapes = [("valid", ConvShape(batch, c_in, k, kh, kw, h, w)),       # forward
              ("valid", ConvShape(c_in, batch, k, oh, ow, h, w))]       # kernel gradient
    if with_dx:
        shapes.append(("full", ConvShape(batch, k, c_in, kh, kw, oh, ow)))
    return shapes


def default_grid(batch=100):
    """Shapes from the built-in experiments plus a few small synthetic ones."""
    grid = []
    grid += _training_shapes(batch, 1, 28, 28, 8, 5, 5, with_dx=False)      # mnist conv1
    grid += _training_shapes(batch, 8, 12, 12, 8, 5, 5)                     # mnist conv2
    grid += _training_shapes(batch, 3, 32, 32, 12, 5, 5, with_dx=False)     # cifar conv1
    grid += _training_shapes(batch, 12, 14, 14, 24, 3, 3)                   # cifar conv2
    grid += [("valid", ConvShape(4, 2, 4, 3, 3, 16, 16)),
             ("valid", ConvShape(4, 1, 2, 5, 5, 8, 8)),
             ("full", ConvShape(4, 2, 3, 3, 3, 16, 16)),
             ("full", ConvShape(2, 2, 2, 9, 9, 16, 16))]
    return grid


def _expand_grid(grid):
    # a bare ConvShape is timed in every mode it fits
    out = []
    for entry in grid:
        if isinstance(entry, ConvShape):
            if entry.kh <= entry.h + 2 * entry.pad and entry.kw <= entry.w + 2 * entry.pad:
                out.append(("valid", entry))
            out.append(("full", entry))
        else:
            out.append(tuple(entry))
    return out


def _key(shape: ConvShape):
    return (shape.kh * shape.kw, shape.h * shape.w, shape.n * shape.k)


def time_backend(backend, x, kernels, shape, reps=5):
    """Median wall time of ``reps`` runs after one warm-up."""
    impl = IMPLEMENTATIONS[backend]
    impl(x, kernels, shape)
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        impl(x, kernels, shape)
        times.append(time.perf_counter() - t)
    return statistics.median(times)


GEMM_SIZES = (4, 8, 16, 24, 32, 48, 64)


def calibrate_gemm(sizes=GEMM_SIZES, reps=5, seed=0):
    """Largest square extent up to which the loop kernel is no slower than BLAS.

    Returns ``(threshold, {size: (small_s, blocked_s)})``; the threshold is 0
    when BLAS wins even at the smallest size.
    """
    rng = np.random.default_rng(seed)
    timings = {}
    for n in sizes:
        a = rng.standard_normal((n, n)).astype(np.float32)
        b = rng.standard_normal((n, n)).astype(np.float32)
        row = []
        for path in ("small", "blocked"):
            kernels.gemm(a, b, path=path)
            ts = []
            for _ in range(reps):
                t = time.perf_counter()
                for _ in range(20):
                    kernels.gemm(a, b, path=path)
                ts.append((time.perf_counter() - t) / 20)
            row.append(statistics.median(ts))
        timings[n] = tuple(row)
    threshold = 0
    for n in sizes:
        small, blocked = timings[n]
        if small > blocked:
            break
        threshold = n
    return threshold, timings


@dataclass
class Calibration:
    rules: list
    timings: list = field(default_factory=list)     # (mode, shape, {backend: seconds})
    gemm_small_max: int | None = None
    gemm_timings: dict = field(default_factory=dict)

    def winner(self, i):
        return min(self.timings[i][2], key=self.timings[i][2].get)


def calibrate_heuristics(grid=None, out=None, reps=5, seed=0, echo=print, gemm=True) -> Calibration:
    """Time every backend on every grid shape and write first-match dispatch rules.

    ``grid`` holds ``(mode, ConvShape)`` pairs or bare shapes (timed in both
    modes). Each grid shape gets a rule keyed on its own (kernel area, image area,
    n*k), so the sorted table sends every grid shape to its measured winner.
    Shapes that share a key get the backend with the smallest worst-case
    slowdown over them. With ``gemm`` the small-matrix GEMM threshold is
    measured as well (see ``calibrate_gemm``).
    """
    grid = default_grid() if grid is None else _expand_grid(grid)
    rng = np.random.default_rng(seed)
    timings = []
    for mode, shape in grid:
        shape.check(mode)
        x = rng.standard_normal((shape.n, shape.c_in, shape.h, shape.w)).astype(np.float32)
        kernels = rng.standard_normal((shape.k, shape.c_in, shape.kh, shape.kw)).astype(np.float32)
        backends = VALID_BACKENDS if mode == "valid" else FULL_BACKENDS
        timings.append((mode, shape, {b: time_backend(b, x, kernels, shape, reps) for b in backends}))
    by_key = {}
    for mode, shape, t in timings:
        by_key.setdefault((mode, _key(shape)), []).append(t)
    rules = []
    for (mode, (kk, hw, nk)), ts in by_key.items():
        choices = ts[0].keys()
        best = min(choices, key=lambda b: max(t[b] / min(t.values()) for t in ts))
        rules.append(Rule(mode, kk, hw, best, nk))
    cal = Calibration(sort_rules(rules), timings)
    if gemm:
        cal.gemm_small_max, cal.gemm_timings = calibrate_gemm(reps=reps, seed=seed)
    if echo is not None:
        echo(winner_matrix(cal))
    if out is not None:
        path = write_calibration(cal.rules, out, cal.gemm_small_max)
        with open(path, "a", encoding="utf-8", newline="\n") as f:
            f.write(_timing_comments(cal))
    return cal


def _shape_label(shape: ConvShape):
    return (f"n{shape.n} c{shape.c_in} k{shape.k} {shape.kh}x{shape.kw} on "
            f"{shape.h}x{shape.w}")


def winner_matrix(cal: Calibration) -> str:
    names = [b.value for b in VALID_BACKENDS + FULL_BACKENDS]
    lines = [f"{'mode':5} {'shape':32} " + " ".join(f"{n:>15}" for n in names) + "  winner"]
    for i, (mode, shape, t) in enumerate(cal.timings):
        cells = [f"{t[b] * 1e3:13.3f}ms" if b in t else f"{'-':>15}"
                 for b in VALID_BACKENDS + FULL_BACKENDS]
        lines.append(f"{mode:5} {_shape_label(shape):32} " + " ".join(cells) + f"  {cal.winner(i).value}")
    if cal.gemm_timings:
        lines.append("")
        lines.append(f"{'gemm n':>8} {'small us':>10} {'blocked us':>11}")
        for n, (small, blocked) in cal.gemm_timings.items():
            lines.append(f"{n:8d} {small * 1e6:10.2f} {blocked * 1e6:11.2f}")
        lines.append(f"small-matrix path up to n={cal.gemm_small_max}")
    return "\n".join(lines)


def _timing_comments(cal: Calibration) -> str:
    out = []
    for mode, shape, t in cal.timings:
        ms = " ".join(f"{b.value}={v * 1e3:.4f}ms" for b, v in t.items())
        out.append(f"# {mode} {_shape_label(shape)}: {ms}")
    for n, (small, blocked) in cal.gemm_timings.items():
        out.append(f"# gemm {n}x{n}x{n}: small={small * 1e6:.2f}us blocked={blocked * 1e6:.2f}us")
    return "\n".join(out) + "\n"


def dispatched(mode, shape) -> ConvBackend:
    return dispatch_valid(shape) if mode == "valid" else dispatch_full(shape)


# ---------------------------------------------------------------------- CLI

def _cmd_list(args):
    for name in EXPERIMENTS:
        cfg = builtin_experiment(name)
        kinds = " ".join(spec.kind for spec in cfg.layers)
        note = f"  ({cfg.notes})" if cfg.notes else ""
        print(f"{name:12} {cfg.dataset:8} lr={cfg.lr:g} momentum={cfg.momentum:g} "
              f"batch={cfg.batch_size} layers: {kinds}{note}")
    return 0


def _cmd_run(args):
    cfg = builtin_experiment(args.name, epochs=args.epochs, subset=args.subset, seed=args.seed,
                             forced_backend=args.backend)
    report, records = run_experiment(cfg, args.csv)
    for r in records:
        print(f"epoch {r.epoch}: loss {r.loss:.5f} train accuracy {r.accuracy:.4f} ({r.seconds:.2f}s)")
    print(f"test accuracy {report.test_accuracy:.4f}")
    return 0


def _cmd_calibrate(args):
    out = args.out or config.calibration_path()
    calibrate_heuristics(out=out, reps=args.reps)
    print(f"wrote {out}")
    return 0


def _cmd_fetch(args):
    if args.dataset in ("mnist", "all"):
        print(data.fetch_mnist())
    if args.dataset in ("cifar10", "all"):
        print(data.fetch_cifar10())
    return 0


def main(argv=None):
    p = argparse.ArgumentParser(prog="fastnn-bench", description="fastnn benchmarks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list built-in experiments").set_defaults(func=_cmd_list)
    r = sub.add_parser("run", help="train a built-in experiment")
    r.add_argument("name", choices=list(EXPERIMENTS))
    r.add_argument("--epochs", type=int, default=DESK_EPOCHS)
    r.add_argument("--subset", type=int, default=DESK_SUBSET)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--backend", default=None, help="force a conv backend, e.g. Im2colGemm")
    r.add_argument("--csv", type=Path, default=None)
    r.set_defaults(func=_cmd_run)
    c = sub.add_parser("calibrate", help="time conv backends and write dispatch rules")
    c.add_argument("--out", type=Path, default=None)
    c.add_argument("--reps", type=int, default=5)
    c.set_defaults(func=_cmd_calibrate)
    f = sub.add_parser("fetch", help="download datasets into $FASTNN_DATA_DIR")
    f.add_argument("dataset", choices=("mnist", "cifar10", "all"), nargs="?", default="all")
    f.set_defaults(func=_cmd_fetch)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataMissingError, ValueError, OSError) as e:
        print(f"fastnn-bench: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
