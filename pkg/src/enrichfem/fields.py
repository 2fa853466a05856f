"""Scalar fields with exact spatial derivatives up to order 3.

A :class:`TaylorValue` bundles the value of a scalar quantity at a batch of
points together with its spatial derivative tensors: ``val (n,)``,
``grad (n,d)``, ``hess (n,d,d)``, ``third (n,d,d,d)``.  Arithmetic and the
elementary functions propagate every carried order through the product and
chain rules, so a field written as a plain numpy expression over coordinates
exposes machine-precision derivatives.

Fields may be parametric: a :class:`Field` wraps a function of coordinate
bundles and a parameter vector ``mu``.  Derivatives are spatial only; ``mu``
enters as ordinary numbers.

Tensors are stored full (not unique-component), so symmetry never needs
multiplicity bookkeeping.  Mixed-order arithmetic truncates to the lowest
order of the operands, which is how compositions that consume one derivative
order (directional derivatives of another field) degrade gracefully.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "TaylorValue",
    "Field",
    "coordinate",
    "constant",
    "const_field",
    "sin",
    "cos",
    "exp",
    "log",
    "sqrt",
]


class TaylorValue:
    """Value and spatial derivatives of a scalar at a batch of points."""

    __slots__ = ("val", "grad", "hess", "third")

    # keep ndarray * TaylorValue out of numpy's elementwise dispatch
    __array_ufunc__ = None

    def __init__(self, val, grad=None, hess=None, third=None):
        self.val = np.asarray(val, dtype=float)
        self.grad = grad
        self.hess = hess
        self.third = third

    @property
    def order(self) -> int:
        if self.grad is None:
            return 0
        if self.hess is None:
            return 1
        if self.third is None:
            return 2
        return 3

    @property
    def n(self) -> int:
        return self.val.shape[0]

    @property
    def dim(self) -> int:
        if self.grad is None:
            raise ValueError("order-0 value carries no spatial dimension")
        return self.grad.shape[1]

    def truncated(self, order: int) -> "TaylorValue":
        """Copy referencing only slots up to `order`."""
        if order > self.order:
            raise ValueError(f"order {order} not carried (have {self.order})")
        return TaylorValue(
            self.val,
            self.grad if order >= 1 else None,
            self.hess if order >= 2 else None,
            self.third if order >= 3 else None,
        )

    def partial(self, j: int) -> "TaylorValue":
        """The field d/dx_j applied to this value; one order lower."""
        if self.order < 1:
            raise ValueError("no gradient carried")
        return TaylorValue(
            self.grad[:, j],
            self.hess[:, :, j] if self.hess is not None else None,
            self.third[:, :, :, j] if self.third is not None else None,
            None,
        )

    # ---- arithmetic -----------------------------------------------------
    # Scalars and plain (n,) arrays act as spatial constants (a per-point
    # array is how mu-dependent factors enter batched evaluations).

    def __add__(self, other):
        if _is_const(other):
            return TaylorValue(self.val + other, self.grad, self.hess, self.third)
        k = min(self.order, other.order)
        return TaylorValue(
            self.val + other.val,
            self.grad + other.grad if k >= 1 else None,
            self.hess + other.hess if k >= 2 else None,
            self.third + other.third if k >= 3 else None,
        )

    __radd__ = __add__

    def __neg__(self):
        return TaylorValue(
            -self.val,
            -self.grad if self.grad is not None else None,
            -self.hess if self.hess is not None else None,
            -self.third if self.third is not None else None,
        )

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if _is_const(other):
            return TaylorValue(
                self.val * other,
                _scale(self.grad, other, 1),
                _scale(self.hess, other, 2),
                _scale(self.third, other, 3),
            )
        k = min(self.order, other.order)
        f, g = self, other
        val = f.val * g.val
        grad = hess = third = None
        if k >= 1:
            grad = f.grad * g.val[:, None] + g.grad * f.val[:, None]
        if k >= 2:
            cross = np.einsum("na,nb->nab", f.grad, g.grad)
            hess = (
                f.hess * g.val[:, None, None]
                + cross
                + cross.transpose(0, 2, 1)
                + g.hess * f.val[:, None, None]
            )
        if k >= 3:
            third = (
                f.third * g.val[:, None, None, None]
                + _sym3(f.hess, g.grad)
                + _sym3(g.hess, f.grad)
                + g.third * f.val[:, None, None, None]
            )
        return TaylorValue(val, grad, hess, third)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_const(other):
            return self * (1.0 / other)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        # other is a scalar or per-point constant
        return self.reciprocal() * other

    def __pow__(self, p):
        v = self.val

        def deriv(m):
            c = 1.0
            for i in range(m):
                c *= p - i
            # a zero falling factorial kills the term; skip the power, which
            # would otherwise raise 0 to a negative exponent at v = 0
            return c * v ** (p - m) if c != 0.0 else np.zeros_like(v)

        return _chain(self, v**p, deriv(1), deriv(2), deriv(3))

    def reciprocal(self):
        v = self.val
        return _chain(self, 1.0 / v, -(v**-2), 2.0 * v**-3, -6.0 * v**-4)


def _is_const(v) -> bool:
    return np.isscalar(v) or (isinstance(v, np.ndarray) and v.ndim <= 1)


def _scale(slot, factor, rank: int):
    """Multiply a derivative tensor by a scalar or per-point (n,) factor."""
    if slot is None:
        return None
    if isinstance(factor, np.ndarray) and factor.ndim == 1:
        return slot * factor.reshape((-1,) + (1,) * rank)
    return slot * factor


def _sym3(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Symmetrized h_ab g_c + h_ac g_b + h_bc g_a over full tensors."""
    t = np.einsum("nab,nc->nabc", h, g)
    return t + t.transpose(0, 1, 3, 2) + t.transpose(0, 3, 1, 2)


def _chain(v: TaylorValue, s0, s1, s2, s3) -> TaylorValue:
    """sigma(v) by the chain rule; s_i = i-th derivative of sigma at v.val."""
    k = v.order
    val = s0
    grad = hess = third = None
    if k >= 1:
        grad = s1[:, None] * v.grad
    if k >= 2:
        gg = np.einsum("na,nb->nab", v.grad, v.grad)
        hess = s2[:, None, None] * gg + s1[:, None, None] * v.hess
    if k >= 3:
        ggg = np.einsum("na,nb,nc->nabc", v.grad, v.grad, v.grad)
        third = (
            s3[:, None, None, None] * ggg
            + s2[:, None, None, None] * _sym3(v.hess, v.grad)
            + s1[:, None, None, None] * v.third
        )
    return TaylorValue(val, grad, hess, third)


def sin(v: TaylorValue) -> TaylorValue:
    s, c = np.sin(v.val), np.cos(v.val)
    return _chain(v, s, c, -s, -c)


def cos(v: TaylorValue) -> TaylorValue:
    s, c = np.sin(v.val), np.cos(v.val)
    return _chain(v, c, -s, -c, s)


def exp(v: TaylorValue) -> TaylorValue:
    e = np.exp(v.val)
    return _chain(v, e, e, e, e)


def log(v: TaylorValue) -> TaylorValue:
    x = v.val
    return _chain(v, np.log(x), 1.0 / x, -(x**-2), 2.0 * x**-3)


def sqrt(v: TaylorValue) -> TaylorValue:
    r = np.sqrt(v.val)
    return _chain(v, r, 0.5 / r, -0.25 * r**-3, 0.375 * r**-5)


def coordinate(x: np.ndarray, j: int, order: int) -> TaylorValue:
    """The coordinate function x_j over a batch of points x (n, d)."""
    n, d = x.shape
    grad = hess = third = None
    if order >= 1:
        grad = np.zeros((n, d))
        grad[:, j] = 1.0
    if order >= 2:
        hess = np.zeros((n, d, d))
    if order >= 3:
        third = np.zeros((n, d, d, d))
    return TaylorValue(x[:, j].copy(), grad, hess, third)


def constant(c, n: int, d: int, order: int) -> TaylorValue:
    grad = np.zeros((n, d)) if order >= 1 else None
    hess = np.zeros((n, d, d)) if order >= 2 else None
    third = np.zeros((n, d, d, d)) if order >= 3 else None
    return TaylorValue(np.full(n, float(c)), grad, hess, third)


class Field:
    """Scalar field (x, mu) -> R defined by an expression over coordinates.

    Parameters
    ----------
    fn : callable (X, mu) -> TaylorValue
        X is the list of coordinate TaylorValues for the batch; mu is the
        parameter vector (may be ignored).
    """

    def __init__(self, fn: Callable):
        self._fn = fn

    def taylor(self, x: np.ndarray, mu, order: int) -> TaylorValue:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise ValueError("points must have shape (n, d)")
        X = [coordinate(x, j, order) for j in range(x.shape[1])]
        out = self._fn(X, mu)
        if np.isscalar(out):
            out = constant(out, x.shape[0], x.shape[1], order)
        elif isinstance(out, np.ndarray):
            # expression without spatial dependence, possibly varying with mu
            out = constant(0.0, x.shape[0], x.shape[1], order) + np.broadcast_to(
                out, (x.shape[0],)
            )
        if out.order < order:
            raise ValueError(
                f"field expression lost derivative order (need {order}, got {out.order})"
            )
        return out.truncated(order)

    def __call__(self, x: np.ndarray, mu=None) -> np.ndarray:
        return self.taylor(x, mu, 0).val

    def gradient(self, x: np.ndarray, mu=None) -> np.ndarray:
        return self.taylor(x, mu, 1).grad


def const_field(c: float) -> Field:
    return Field(lambda X, mu: constant(c, X[0].n, len(X), X[0].order))
