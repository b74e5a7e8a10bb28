"""Numeric kernels: GEMM with a small-matrix path, radix-2 FFT, elementwise maps."""

from __future__ import annotations

import math

import numpy as np

from . import config
from ._jit import njit, pick, prange
from .errors import ShapeError
from .tensor import DTYPE, Tensor, as_array

# Extents at or below this go through the hand-written loop kernel instead of
# BLAS. `fastnn-bench calibrate` measures the crossover and records it in the
# calibration file as "gemm_small_max N".
SMALL_GEMM_MAX = 64
_small_override: int | None = None
_small_from_file: tuple = (None, None)


def set_small_gemm_max(n: int | None) -> None:
    """Pin the small-matrix threshold in-process; None defers to the file."""
    global _small_override
    if n is not None and n < 0:
        raise ValueError(f"threshold must be >= 0, got {n}")
    _small_override = n


def small_gemm_max() -> int:
    global _small_from_file
    if _small_override is not None:
        return _small_override
    key, text = config.calibration_file()
    if key is None:
        return SMALL_GEMM_MAX
    if _small_from_file[0] != key:
        value = None
        for line in text.splitlines():
            f = line.split("#", 1)[0].split()
            if len(f) == 2 and f[0] == "gemm_small_max" and f[1].isdigit():
                value = int(f[1])
        _small_from_file = (key, value)
    return SMALL_GEMM_MAX if _small_from_file[1] is None else _small_from_file[1]


# --------------------------------------------------------------------- gemm

@njit
def _gemm_small_nb(a, b):
    m, kk = a.shape
    n = b.shape[1]
    c = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for p in range(kk):
            aip = a[i, p]
            for j in range(n):
                c[i, j] += aip * b[p, j]
    return c


def _gemm_small_np(a, b):
    return np.matmul(a, b)


def _gemm_blocked(a, b):
    # BLAS sgemm: cache-blocked and threaded by the library.
    return np.matmul(a, b)


_gemm_small = pick(_gemm_small_nb, _gemm_small_np)


def gemm(a, b, transpose_a: bool = False, transpose_b: bool = False, path: str | None = None):
    """C = op(A) @ op(B) in single precision.

    ``path`` forces ``"small"`` or ``"blocked"``; by default the small-matrix
    kernel handles every problem whose extents are all <= ``small_gemm_max()``.
    """
    a = as_array(a)
    b = as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm expects matrices, got ranks {a.ndim} and {b.ndim}")
    if transpose_a:
        a = a.T
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    if path is None:
        path = "small" if max(a.shape[0], a.shape[1], b.shape[1]) <= small_gemm_max() else "blocked"
    if path == "small":
        return _gemm_small(np.ascontiguousarray(a), np.ascontiguousarray(b))
    if path == "blocked":
        return _gemm_blocked(a, b)
    raise ValueError(f"unknown gemm path {path!r}")


# ---------------------------------------------------------------------- fft

def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def next_pow2(n: int) -> int:
    return 1 << max(0, math.ceil(math.log2(n)))


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _twiddles(n: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    k = np.arange(max(n // 2, 1))
    return np.exp(sign * 2j * np.pi * k / n).astype(np.complex64)


@njit(parallel=True)
def _fft_rows_nb(a, rev, tw):
    rows, n = a.shape
    for r in prange(rows):
        row = a[r]
        for i in range(n):
            j = rev[i]
            if j > i:
                tmp = row[i]
                row[i] = row[j]
                row[j] = tmp
        size = 2
        while size <= n:
            half = size // 2
            step = n // size
            for start in range(0, n, size):
                for k in range(half):
                    t = tw[k * step] * row[start + k + half]
                    u = row[start + k]
                    row[start + k] = u + t
                    row[start + k + half] = u - t
            size *= 2
    return a


def _fft_rows_np(a, rev, tw):
    rows, n = a.shape
    a = a[:, rev]
    size = 2
    while size <= n:
        half = size // 2
        w = tw[:: n // size][:half]
        v = a.reshape(rows, n // size, size)
        u = v[..., :half]
        t = v[..., half:] * w
        a = np.concatenate((u + t, u - t), axis=-1).reshape(rows, n)
        size *= 2
    return a


_fft_rows_impl = pick(_fft_rows_nb, _fft_rows_np)


def _fft_last_axis(x: np.ndarray, inverse: bool, impl=None) -> np.ndarray:
    n = x.shape[-1]
    rows = np.ascontiguousarray(x.reshape(-1, n), dtype=np.complex64)
    impl = {None: _fft_rows_impl, "numba": _fft_rows_nb, "numpy": _fft_rows_np}.get(impl, impl)
    out = impl(rows, _bit_reverse(n), _twiddles(n, inverse))
    return out.reshape(x.shape)


def _check_pow2(x: np.ndarray) -> None:
    if x.ndim < 2:
        raise ShapeError("fft2 needs at least two axes")
    r, c = x.shape[-2:]
    if not (_is_pow2(r) and _is_pow2(c)):
        raise ShapeError(f"fft2 extents must be powers of two, got {r}x{c}")


def fft2(x, impl=None) -> np.ndarray:
    """Forward 2-D DFT over the last two axes (complex64 result).

    Leading axes are treated as a batch of independent transforms. ``impl``
    forces ``"numba"`` or ``"numpy"`` row transforms.
    """
    x = np.asarray(x)
    _check_pow2(x)
    y = _fft_last_axis(x, False, impl)
    y = _fft_last_axis(np.swapaxes(y, -1, -2), False, impl)
    return np.ascontiguousarray(np.swapaxes(y, -1, -2))


def ifft2(x, impl=None) -> np.ndarray:
    """Inverse of fft2, including the 1/(rows*cols) normalization."""
    x = np.asarray(x)
    _check_pow2(x)
    r, c = x.shape[-2:]
    y = _fft_last_axis(x, True, impl)
    y = _fft_last_axis(np.swapaxes(y, -1, -2), True, impl)
    y = np.swapaxes(y, -1, -2) * np.float32(1.0 / (r * c))
    return np.ascontiguousarray(y, dtype=np.complex64)


def hadamard(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard operands differ: {a.shape} vs {b.shape}")
    return a * b


# -------------------------------------------------------------- elementwise

def elementwise_apply(x, f):
    """y[i] = f(x[i]) on the logical elements; padding stays zero.

    ``f`` must accept and return numpy arrays (a ufunc or vectorized lambda).
    """
    if isinstance(x, Tensor):
        out = Tensor(x.dims, x.stride_last, np.zeros_like(x.data))
        out.array[...] = f(x.array)
        return out
    return np.asarray(f(np.asarray(x, dtype=DTYPE)), dtype=DTYPE)
