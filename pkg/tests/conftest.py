import numpy as np
import pytest

from u2u import kernels


@pytest.fixture(params=["python", "compiled"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend (compiled skipped when not built)."""
    if request.param == "compiled" and kernels.compiled_backend is None:
        pytest.skip("compiled extension not built")
    impl = kernels.python_backend if request.param == "python" else kernels.compiled_backend
    monkeypatch.setattr(kernels, "_impl", impl)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
