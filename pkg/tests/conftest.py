import numpy as np
import pytest

from scopegnn import autodiff as ad


def finite_difference_grad(make_loss, param, h=1e-5):
    """Central finite differences of a scalar loss w.r.t. one parameter tensor.

    ``make_loss`` rebuilds the scalar loss from scratch (fresh tape) using the
    current parameter values, so perturbations see the same noise.
    """
    grad = np.zeros_like(param.value)
    flat = param.value.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(make_loss().value)
        flat[i] = orig - h
        lo = float(make_loss().value)
        flat[i] = orig
        grad.ravel()[i] = (hi - lo) / (2 * h)
    return grad


def assert_grad_close(make_loss, params, rtol=1e-4, h=1e-5):
    """Backward gradients vs central finite differences, relative error."""
    loss = make_loss()
    loss.backward()
    for p in params:
        num = finite_difference_grad(make_loss, p, h=h)
        got = p.grad if p.grad is not None else np.zeros_like(p.value)
        scale = np.maximum(np.abs(num), np.abs(got))
        scale[scale < 1e-6] = 1.0
        rel = np.abs(got - num) / scale
        assert rel.max() < rtol, f"gradient mismatch for {p}: max rel err {rel.max()}"
        p.zero_grad()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance-gate verdicts (one line per criterion)."""
    import sys

    module = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    lines = getattr(module, "GATE_LINES", None) if module else None
    if lines:
        terminalreporter.section("acceptance gate")
        for line in lines:
            terminalreporter.write_line(line)
