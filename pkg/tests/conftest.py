import numpy as np
import pytest


@pytest.fixture(params=["numba", "numpy"])
def kernel_backend(request, monkeypatch):
    monkeypatch.setenv("TCODE_KERNELS", request.param)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
