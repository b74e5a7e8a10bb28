"""Runtime configuration read from the environment.

FASTNN_NUMBA      "0" selects the pure-numpy kernels (default: numba when importable)
FASTNN_THREADS    worker-pool size for the numba parallel kernels
FASTNN_LANES      SIMD lane count used for last-dimension padding (1, 4, 8, 16)
FASTNN_DATA_DIR   dataset cache directory
FASTNN_CALIBRATION  path of the convolution dispatch calibration table
"""

import os
from pathlib import Path

_FALSY = {"0", "false", "no", "off"}


def numba_requested() -> bool:
    return os.environ.get("FASTNN_NUMBA", "1").strip().lower() not in _FALSY


def threads() -> int | None:
    value = os.environ.get("FASTNN_THREADS")
    if not value:
        return None
    n = int(value)
    if n < 1:
        raise ValueError(f"FASTNN_THREADS must be >= 1, got {n}")
    return n


def data_dir() -> Path:
    value = os.environ.get("FASTNN_DATA_DIR")
    if value:
        return Path(value).expanduser()
    return Path.home() / ".cache" / "fastnn"


def calibration_path() -> Path:
    value = os.environ.get("FASTNN_CALIBRATION")
    if value:
        return Path(value).expanduser()
    return data_dir() / "conv_calibration.txt"


def default_lanes() -> int:
    return int(os.environ.get("FASTNN_LANES", "8"))


_calibration_cache: tuple = (None, "")


def calibration_file() -> tuple:
    """``(key, text)`` of the calibration file, re-read only when it changes.

    ``key`` is None when the file is absent (text is then empty).
    """
    global _calibration_cache
    path = calibration_path()
    try:
        st = os.stat(path)
    except OSError:
        return None, ""
    key = (str(path), st.st_mtime_ns, st.st_size)
    if _calibration_cache[0] != key:
        _calibration_cache = (key, Path(path).read_text(encoding="utf-8"))
    return _calibration_cache
