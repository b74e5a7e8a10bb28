import numpy as np
import pytest

from fastnn import conv, data, kernels


@pytest.fixture(autouse=True)
def hermetic_calibration(tmp_path, monkeypatch):
    """Every test starts from compiled-default dispatch, whatever is cached locally."""
    monkeypatch.setenv("FASTNN_CALIBRATION", str(tmp_path / "no-calibration.txt"))
    conv.use_calibration(None)
    kernels.set_small_gemm_max(None)
    yield
    conv.use_calibration(None)
    kernels.set_small_gemm_max(None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def needs(name):
    return pytest.mark.skipif(not data.available(name),
                              reason=f"{name} not in the dataset cache ($FASTNN_DATA_DIR)")


# criterion number -> (status, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
