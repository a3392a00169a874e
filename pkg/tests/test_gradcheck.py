"""Tests of the gradient checker itself: the numeric differencer against
closed-form derivatives, the comparison rule, and its ability to catch a
genuinely wrong gradient."""

import numpy as np
import numpy.testing as npt
import pytest

from xabr.gradcheck import (
    analytic_gradients,
    check_gradients,
    compare_gradients,
    numeric_gradient,
    run_suite,
)
from xabr.tensor import Tensor, layer_norm, matmul, reset_tape, set_default_dtype


@pytest.fixture(autouse=True)
def f64_mode():
    """Closed-form comparisons want f64 storage so FD noise is ~1e-10."""
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float32)
    reset_tape()


def test_numeric_gradient_of_quadratic():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    num = numeric_gradient(lambda: (x * x).sum(), x, h=1e-5)
    npt.assert_allclose(num, 2.0 * x.data, rtol=1e-8, atol=1e-10)


def test_analytic_gradients_match_closed_form():
    x = Tensor(np.arange(1.0, 7.0).reshape(2, 3), requires_grad=True)
    grads = analytic_gradients(lambda: (x * x * x).sum(), {"x": x})
    npt.assert_allclose(grads["x"], 3.0 * x.data**2, rtol=1e-12)


def test_analytic_gradients_require_grad_flow():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(AssertionError, match="no gradient reached"):
        analytic_gradients(lambda: (x * x).sum(), {"x": x, "unused": unused})


def test_compare_gradients_rules():
    a = np.array([1.0, 2.0])
    assert compare_gradients(a, a, rtol=1e-3, atol=1e-6) == 0.0
    # plain relative error when both sides are well above atol
    err = compare_gradients(np.array([1.0]), np.array([1.001]),
                            rtol=1e-3, atol=1e-6)
    npt.assert_allclose(err, 0.001 / 1.001, rtol=1e-6)
    # sub-atol noise against a true zero is forgiven
    assert compare_gradients(np.array([0.0]), np.array([5e-5]),
                             rtol=1e-3, atol=1e-4) == 0.0
    # above atol it counts fully (relative error 1 against a zero)
    assert compare_gradients(np.array([0.0]), np.array([2e-4]),
                             rtol=1e-3, atol=1e-4) == 1.0


def test_check_gradients_small_chain():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    g = Tensor(np.ones(4), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    c = Tensor(rng.normal(size=(3, 4)))

    def loss_fn():
        return (layer_norm(matmul(x, w), g, b) * c).sum()

    report = check_gradients(loss_fn, {"x": x, "w": w, "g": g, "b": b},
                             h=1e-5, rtol=1e-6, atol=1e-9)
    assert set(report) == {"x", "w", "g", "b"}
    assert max(report.values()) <= 1e-6


def test_check_gradients_catches_wrong_gradient():
    """A loss term rebuilt from raw data each call is invisible to the
    tape, so the analytic gradient is off by a factor the checker must
    flag."""
    x = Tensor(np.ones(4), requires_grad=True)

    def loss_fn():
        half_snapshot = Tensor(0.5 * x.data)  # constant to the tape
        return (x * half_snapshot).sum()

    with pytest.raises(AssertionError, match="gradient mismatch for x"):
        check_gradients(loss_fn, {"x": x}, h=1e-5, rtol=1e-3, atol=1e-6)


def test_run_suite_rejects_unknown_module_and_dtype():
    with pytest.raises(ValueError, match="unknown gradcheck module"):
        run_suite("quantum")
    with pytest.raises(ValueError, match="dtype"):
        run_suite("ops", dtype="f16")


def test_run_suite_bridge_module():
    results = run_suite("bridge")
    assert results
    for name, err in results:
        assert err <= 1e-2, name
