import numpy as np
import pytest

from cbamnet.tensor import Tensor, backward, finite_diff_grad


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per executed acceptance criterion, after capture ends."""
    try:
        from test_acceptance import CRITERION_RESULTS
    except ImportError:
        return
    if CRITERION_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number, description, status in sorted(CRITERION_RESULTS):
            terminalreporter.write_line(f"[{status}] criterion {number}: {description}")


def assert_grads_match(build, params, rtol=1e-3, atol=1e-4, eps=1e-5):
    """Check analytic gradients of a scalar-valued graph against central differences.

    ``build(params)`` must construct the graph afresh from the tensors' current
    data each call; the finite-difference oracle perturbs coordinates in place.
    """
    for p in params:
        p.clear_grad()
    loss = build(params)
    backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = finite_diff_grad(lambda ps: build(ps).item(), params, eps=eps)
    for a, n in zip(analytic, numeric):
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)


def leaf(data, rng=None, scale=1.0):
    """Random or explicit gradient-tracked leaf tensor."""
    if rng is not None:
        data = rng.normal(0.0, scale, data)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
