"""The finite-difference oracle itself, checked against analytic gradients."""

import numpy as np
import pytest

from segmoe.gradcheck import check_gradients
from segmoe.losses import huber
from segmoe.tensor import Tensor


def test_quadratic_analytic_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    report = check_gradients(lambda p: (x * x).sum(), [("x", x)], step=1e-5, tol=1e-6)
    # autodiff says [2, 4]; central differences agree essentially exactly
    assert x.grad.tolist() == [2.0, 4.0]
    assert report.max_rel_err < 1e-8


def test_huber_linear_model_agreement():
    rng = np.random.default_rng(5)
    w = Tensor(rng.uniform(-1, 1, (4, 1)), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    features = Tensor(rng.uniform(-3, 3, (12, 4)))
    target = rng.uniform(-3, 3, (12, 1))

    def f(params):
        return huber(features.matmul(w) + b, target, delta=1.0)

    report = check_gradients(f, [("w", w), ("b", b)], step=1e-5, tol=1e-5)
    assert report.ok, report.summary()


def test_non_finite_loss_raises():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="non-finite"):
        check_gradients(lambda p: (x / 0.0).sum(), [("x", x)])


def test_report_flags_wrong_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)

    def broken(params):
        # the quadratic term is rebuilt from raw data, so autodiff misses it
        # while finite differences see the true slope
        return Tensor(x.data**2).sum() + x.sum()

    report = check_gradients(broken, [("x", x)], tol=1e-4)
    assert not report.ok
    assert report.failures()[0].n_flagged == 2
