import numpy as np
import pytest

from snapunfold import _kernels_py, kernels

BACKENDS = [pytest.param(_kernels_py, id="python")]
if kernels.compiled() is not None:
    BACKENDS.append(pytest.param(kernels.compiled(), id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Route the conv/TV kernels through each available implementation."""
    impl = request.param
    for name in ("dw_forward", "dw_backward_input", "dw_backward_weight", "tv_dual"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return impl


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
