"""Derivative exactness of the closed-form field algebra.

Finite differences are the oracle.  Because exact gradients and Hessians are
available, each order is checked against the FD of the order below, which
keeps the FD truncation error at O(eps^2) throughout.
"""

import numpy as np
import pytest

from enrichfem import fields as F

from helpers import fd_jacobian, rel_err


def gnarly_2d(X, mu):
    x, y = X
    return (
        F.exp(-((x - 0.3) ** 2 + (y + 0.1) ** 2) / 2.0) * F.sin(2.0 * x) * F.sin(2.0 * y)
        + F.log(x * x + y * y + 2.0) / (1.0 + x * x)
        + F.sqrt(x * x + 0.5) * F.cos(3.0 * y)
    )


def gnarly_1d(X, mu):
    (x,) = X
    return mu[0] * F.sin(2 * np.pi * x) + F.exp(-x * x) / (2.0 + F.cos(3.0 * x)) - x**3


@pytest.mark.parametrize(
    "fn,d,mu",
    [(gnarly_1d, 1, (0.7,)), (gnarly_2d, 2, None)],
)
def test_derivatives_match_finite_differences(fn, d, mu):
    field = F.Field(fn)
    rng = np.random.default_rng(42)
    pts = rng.uniform(-0.8, 0.8, size=(20, d))

    tv = field.taylor(pts, mu, 3)
    assert tv.val.shape == (20,)
    assert tv.grad.shape == (20, d)
    assert tv.hess.shape == (20, d, d)
    assert tv.third.shape == (20, d, d, d)

    for i, p in enumerate(pts):
        g_fd = fd_jacobian(lambda q: field.taylor(q[None, :], mu, 0).val[0], p)
        assert rel_err(tv.grad[i], g_fd) < 1e-8
        h_fd = fd_jacobian(lambda q: field.taylor(q[None, :], mu, 1).grad[0], p)
        assert rel_err(tv.hess[i], h_fd) < 1e-7
        t_fd = fd_jacobian(lambda q: field.taylor(q[None, :], mu, 2).hess[0], p)
        assert rel_err(tv.third[i], t_fd) < 1e-6


def test_hessian_symmetry():
    field = F.Field(gnarly_2d)
    pts = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
    tv = field.taylor(pts, None, 3)
    assert np.allclose(tv.hess, tv.hess.transpose(0, 2, 1), atol=1e-14)
    for perm in [(0, 1, 3, 2), (0, 2, 1, 3), (0, 3, 2, 1)]:
        assert np.allclose(tv.third, tv.third.transpose(*perm), atol=1e-13)


def test_partial_extracts_derivative_field():
    field = F.Field(gnarly_2d)
    pts = np.random.default_rng(2).uniform(-1, 1, size=(10, 2))
    tv = field.taylor(pts, None, 3)
    px = tv.partial(0)
    assert px.order == 2
    assert np.array_equal(px.val, tv.grad[:, 0])
    assert np.array_equal(px.grad, tv.hess[:, :, 0])
    assert np.array_equal(px.hess, tv.third[:, :, :, 0])


def test_mixed_order_arithmetic_truncates():
    x = np.linspace(0.1, 1.0, 5).reshape(-1, 1)
    a = F.coordinate(x, 0, 3)
    b = F.coordinate(x, 0, 2)
    assert (a * b).order == 2
    assert (a + b).order == 2
    assert (a * a).order == 3


def test_scalar_operations():
    x = np.linspace(0.2, 1.0, 7).reshape(-1, 1)
    t = F.coordinate(x, 0, 3)
    u = 2.0 * t - 1.0
    assert np.allclose(u.val, 2 * x[:, 0] - 1)
    assert np.allclose(u.grad[:, 0], 2.0)
    v = 1.0 / (t + 1.0)
    assert np.allclose(v.val, 1 / (x[:, 0] + 1))
    assert np.allclose(v.grad[:, 0], -((x[:, 0] + 1.0) ** -2))
    w = t**2 - t * t
    assert np.allclose(w.val, 0.0, atol=1e-15)
    assert np.allclose(w.hess, 0.0, atol=1e-15)


def test_constant_field():
    c = F.const_field(3.5)
    x = np.zeros((4, 2))
    tv = c.taylor(x, None, 3)
    assert np.all(tv.val == 3.5)
    assert np.all(tv.third == 0)


def test_known_closed_form():
    # u = sin(2 pi x): u'' = -(2 pi)^2 u, u''' = -(2 pi)^2 u'
    field = F.Field(lambda X, mu: F.sin(2 * np.pi * X[0]))
    x = np.linspace(0, 1, 11).reshape(-1, 1)
    tv = field.taylor(x, None, 3)
    w = 2 * np.pi
    assert np.allclose(tv.hess[:, 0, 0], -(w**2) * tv.val, atol=1e-12)
    assert np.allclose(tv.third[:, 0, 0, 0], -(w**2) * tv.grad[:, 0], atol=1e-11)
