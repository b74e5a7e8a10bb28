"""Time the numba kernels against their pure-numpy fallbacks.

The backend is fixed at import time by FASTNN_NUMBA, so each side runs in
its own interpreter. Prints one row per kernel with both medians.

    python3 benchmarks/bench_numba_vs_numpy.py [--reps 7]
"""

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

WORKER = r"""
import json, statistics, sys, time
import numpy as np
from fastnn import conv, kernels, layers

reps = int(sys.argv[1])
rng = np.random.default_rng(0)
f32 = lambda *s: rng.standard_normal(s).astype(np.float32)
x_mnist, k_mnist = f32(100, 1, 28, 28), f32(8, 1, 5, 5)
x_c2, k_c2 = f32(100, 12, 14, 14), f32(24, 12, 3, 3)
x_gen, k_gen = f32(16, 4, 20, 20), f32(6, 4, 7, 7)
a, b = f32(64, 64), f32(64, 64)
img = f32(64, 32, 32)
cases = {
    "gemm small 64x64x64": lambda: kernels.gemm(a, b, path="small"),
    "fft2 64 x 32x32": lambda: kernels.fft2(img),
    "direct valid 5x5 (mnist conv1)": lambda: conv.conv_valid_direct(x_mnist, k_mnist),
    "direct valid 3x3 (cifar conv2)": lambda: conv.conv_valid_direct(x_c2, k_c2),
    "direct valid generic 7x7": lambda: conv.conv_valid_direct(x_gen, k_gen),
    "im2col (cifar conv2 batch)": lambda: conv.im2col(x_c2[0], kh=3, kw=3),
    "fft full 5x5 (mnist dx)": lambda: conv.conv_full_fft(f32(100, 8, 8, 8), k_c2[:8, :8, :3, :3]),
}
out = {}
for name, fn in cases.items():
    fn()
    ts = []
    for _ in range(reps):
        t = time.perf_counter(); fn(); ts.append(time.perf_counter() - t)
    out[name] = statistics.median(ts)
print(json.dumps(out))
"""


def run(flag, reps):
    env = dict(os.environ, FASTNN_NUMBA=flag)
    res = subprocess.run([sys.executable, "-c", WORKER, str(reps)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=7)
    args = p.parse_args(argv)
    jit = run("1", args.reps)
    ref = run("0", args.reps)
    print(f"{'kernel':34} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name in jit:
        print(f"{name:34} {jit[name] * 1e3:10.3f} {ref[name] * 1e3:10.3f} {ref[name] / jit[name]:7.1f}x")


if __name__ == "__main__":
    main()
