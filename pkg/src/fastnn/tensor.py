"""Single-precision tensors with optional SIMD-lane padding.

A Tensor owns a flat float32 buffer laid out row-major over
(batch, channel, row, column). When padded, the physical extent of the last
dimension (``stride_last``) is rounded up to a multiple of the lane count and
the extra columns are kept at exactly 0.0. ``Tensor.array`` is a numpy view of
the logical elements, which is what the kernels consume.
"""

from __future__ import annotations

import math

import numpy as np

from . import config
from .errors import ShapeError

DTYPE = np.float32
VALID_LANES = (1, 4, 8, 16)

_lanes = config.default_lanes()


def get_lanes() -> int:
    return _lanes


def set_lanes(lanes: int) -> None:
    global _lanes
    if lanes not in VALID_LANES:
        raise ValueError(f"lanes must be one of {VALID_LANES}, got {lanes}")
    _lanes = lanes


if _lanes not in VALID_LANES:
    raise ValueError(f"FASTNN_LANES must be one of {VALID_LANES}, got {_lanes}")


def padded_extent(n: int, lanes: int | None = None) -> int:
    lanes = _lanes if lanes is None else lanes
    return -(-n // lanes) * lanes


class Tensor:
    __slots__ = ("dims", "stride_last", "data")

    def __init__(self, dims, stride_last, data):
        self.dims = tuple(int(d) for d in dims)
        self.stride_last = int(stride_last)
        self.data = data

    @property
    def padded(self) -> bool:
        return self.stride_last != self.dims[-1]

    @property
    def array(self) -> np.ndarray:
        """Writable view of the logical elements."""
        full = self.data.reshape(*self.dims[:-1], self.stride_last)
        return full[..., : self.dims[-1]]

    @property
    def shape(self):
        return self.dims

    def padding(self) -> np.ndarray:
        full = self.data.reshape(*self.dims[:-1], self.stride_last)
        return full[..., self.dims[-1]:]

    def __len__(self):
        return self.dims[0]

    def __repr__(self):
        return f"Tensor(dims={self.dims}, stride_last={self.stride_last})"


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= 4:
        raise ShapeError(f"tensor rank must be 1..4, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all extents must be >= 1, got {dims}")
    return dims


def make_tensor(dims, padded: bool = False, lanes: int | None = None) -> Tensor:
    dims = _check_dims(dims)
    stride = padded_extent(dims[-1], lanes) if padded else dims[-1]
    data = np.zeros(math.prod(dims[:-1]) * stride, dtype=DTYPE)
    return Tensor(dims, stride, data)


def from_array(values, padded: bool = False, lanes: int | None = None) -> Tensor:
    values = np.asarray(values, dtype=DTYPE)
    t = make_tensor(values.shape, padded=padded, lanes=lanes)
    t.array[...] = values
    return t


def copy_into_padded(src: Tensor, lanes: int | None = None) -> Tensor:
    if src.padded:
        raise ShapeError("source tensor is already padded")
    return from_array(src.array, padded=True, lanes=lanes)


def strip_padding(src: Tensor) -> Tensor:
    return from_array(src.array, padded=False)


def slice_batch(t: Tensor, lo: int, hi: int) -> Tensor:
    """View over samples [lo, hi); shares the parent buffer."""
    if not 0 <= lo < hi <= t.dims[0]:
        raise IndexError(f"batch slice [{lo}, {hi}) out of range for {t.dims[0]} samples")
    if len(t.dims) == 1:
        # the batch axis is the padded axis; the view covers logical elements only
        return Tensor((hi - lo,), hi - lo, t.data[lo:hi])
    row = math.prod(t.dims[1:-1]) * t.stride_last
    return Tensor((hi - lo, *t.dims[1:]), t.stride_last, t.data[lo * row: hi * row])


def as_array(x) -> np.ndarray:
    """Logical float32 view of a Tensor or array-like."""
    if isinstance(x, Tensor):
        return x.array
    return np.asarray(x, dtype=DTYPE)
