import numpy as np
import pytest

from skipcross import _kernels


@pytest.fixture(params=["numba", "numpy"])
def kernel_path(request, monkeypatch):
    """Run a test once per kernel implementation by flipping the environment switch."""
    monkeypatch.setenv("SKIPCROSS_NUMBA", "1" if request.param == "numba" else "0")
    assert _kernels.active().name == request.param
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
