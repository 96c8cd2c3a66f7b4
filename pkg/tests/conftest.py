import numpy as np
import pytest

from deepnrsfm import kernels
from deepnrsfm.diffmath import Tape, numerical_gradient, relative_error, tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=kernels.available_backends())
def backend(request, monkeypatch):
    """Run a test once per kernel backend by swapping the active implementation."""
    monkeypatch.setattr(kernels, "_impl", kernels.get_backend(request.param))
    return request.param


def grad_check(fn, arrays, eps=1e-5):
    """Relative error between tape and central-difference gradients of scalar ``fn``."""
    ts = [tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
    analytic = tape.gradient(out, ts)
    numeric = numerical_gradient(lambda *xs: float(fn(*[tensor(x) for x in xs]).data), arrays, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance outcome; all of them are printed in the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(str(k).rstrip("ab")), str(k))):
        terminalreporter.write_line(ACCEPTANCE[key])
