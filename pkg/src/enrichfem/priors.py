"""Priors: network or closed-form fields composed with boundary structure.

A prior u_theta wraps a source w (an MLP or an analytic field) in a
composition that imposes boundary conditions exactly:

    Raw                 u_theta = w
    LevelSetDirichlet   u_theta = phi * w + g          (u_theta = g where phi = 0)
    MixedRobin          u_theta = c1*w - c2*(grad phi_I . grad w) + k0

The mixed composition realizes, on an annulus-like domain with inner Robin
boundary {phi_I = 0} and outer Dirichlet boundary {phi_E = 0},

    u_theta = A [w + phi_I (w - grad phi_I . grad w - g_R)] + B g
              + phi_E phi_I^2 w,
    A = phi_E / (phi_E + phi_I^2),  B = phi_I^2 / (phi_E + phi_I^2),

which satisfies grad u_theta . n + u_theta = g_R on the inner circle (unit
Robin coefficient, n = -grad phi_I there) and u_theta = g on the outer one,
for every w.  Because it contains grad w, each derivative of u_theta costs
one extra derivative of w: derivatives are capped at order 2 and only the
Laplacian (not the full Hessian) of u_theta is available.

Every composition is affine in the source's derivative bundle, so cotangents
of a loss pass back to the network through the exact transpose of the
forward map; `Prior.loss_gradient` chains that with the network backward.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import neural
from .errors import FormatError, UnsupportedError
from .fields import Field
from .neural import DerivativeBundle, MlpNetwork


def _lap(hessian):
    return np.trace(hessian, axis1=1, axis2=2)


def field_bundle(field: Field, x, mu, order: int) -> DerivativeBundle:
    """Evaluate a closed-form field as a derivative bundle."""
    tv = field.taylor(np.asarray(x, dtype=float), mu, order)
    lap_grad = None
    if order >= 3:
        d = tv.grad.shape[1]
        lap_grad = tv.third[:, 0, 0, :].copy()
        for a in range(1, d):
            lap_grad += tv.third[:, a, a, :]
    return DerivativeBundle(
        value=tv.val,
        gradient=tv.grad if order >= 1 else None,
        hessian=tv.hess if order >= 2 else None,
        lap_gradient=lap_grad,
    )


def _mul_full(a: DerivativeBundle, b: DerivativeBundle, order: int) -> DerivativeBundle:
    """Product rule on full bundles (value, gradient, Hessian, grad-Laplacian)."""
    v = a.value * b.value
    g = h = t = None
    if order >= 1:
        g = a.gradient * b.value[:, None] + a.value[:, None] * b.gradient
    if order >= 2:
        h = (
            a.hessian * b.value[:, None, None]
            + a.gradient[:, :, None] * b.gradient[:, None, :]
            + a.gradient[:, None, :] * b.gradient[:, :, None]
            + a.value[:, None, None] * b.hessian
        )
    if order >= 3:
        lap_a = _lap(a.hessian)
        lap_b = _lap(b.hessian)
        Ha_gb = np.einsum("nij,nj->ni", a.hessian, b.gradient)
        Hb_ga = np.einsum("nij,nj->ni", b.hessian, a.gradient)
        t = (
            a.lap_gradient * b.value[:, None]
            + lap_a[:, None] * b.gradient
            + 2.0 * Ha_gb
            + 2.0 * Hb_ga
            + a.gradient * lap_b[:, None]
            + a.value[:, None] * b.lap_gradient
        )
    return DerivativeBundle(value=v, gradient=g, hessian=h, lap_gradient=t)


def _mul_full_adjoint(
    a: DerivativeBundle, cot: DerivativeBundle, order: int
) -> DerivativeBundle:
    """Transpose of _mul_full with respect to the second factor."""
    n = a.value.shape[0]
    d = a.gradient.shape[1] if a.gradient is not None else 0
    ub0 = cot.value if cot.value is not None else np.zeros(n)
    b0 = a.value * ub0
    bg = bh = bt = None
    if order >= 1:
        bg = np.zeros((n, d))
        if cot.gradient is not None:
            b0 = b0 + np.einsum("nd,nd->n", a.gradient, cot.gradient)
            bg += a.value[:, None] * cot.gradient
    if order >= 2:
        bh = np.zeros((n, d, d))
        if cot.hessian is not None:
            b0 = b0 + np.einsum("ncd,ncd->n", a.hessian, cot.hessian)
            bg = bg + np.einsum("ncd,nc->nd", cot.hessian, a.gradient)
            bg = bg + np.einsum("ncd,nd->nc", cot.hessian, a.gradient)
            bh += a.value[:, None, None] * cot.hessian
        if cot.laplacian is not None:
            # loss phrased via the Laplacian: diagonal Hessian cotangent
            b0 = b0 + _lap(a.hessian) * cot.laplacian
            bg = bg + 2.0 * a.gradient * cot.laplacian[:, None]
            for c in range(d):
                bh[:, c, c] += a.value * cot.laplacian
    if order >= 3:
        bt = np.zeros((n, d))
        if cot.lap_gradient is not None:
            tb = cot.lap_gradient
            b0 = b0 + np.einsum("nd,nd->n", a.lap_gradient, tb)
            bg = bg + _lap(a.hessian)[:, None] * tb
            bg = bg + 2.0 * np.einsum("ncd,nd->nc", a.hessian, tb)
            bh += 2.0 * a.gradient[:, :, None] * tb[:, None, :]
            diag = np.einsum("nd,nd->n", a.gradient, tb)
            for c in range(d):
                bh[:, c, c] += diag
            bt += a.value[:, None] * tb
    return DerivativeBundle(value=b0, gradient=bg, hessian=bh, lap_gradient=bt)


def _add_analytic(u: DerivativeBundle, a: DerivativeBundle, order: int):
    u.value = u.value + a.value
    if order >= 1:
        u.gradient = u.gradient + a.gradient
    if order >= 2:
        if u.hessian is not None:
            u.hessian = u.hessian + a.hessian
        if u.laplacian is not None:
            u.laplacian = u.laplacian + _lap(a.hessian)
    if order >= 3 and u.lap_gradient is not None:
        u.lap_gradient = u.lap_gradient + a.lap_gradient
    return u


class RawComposition:
    """u_theta = w; imposes nothing."""

    max_order = 3
    kind = "raw"

    def w_order(self, order: int) -> int:
        return order

    def compose(self, wb, x, mu, order):
        return DerivativeBundle(
            value=wb.value,
            gradient=wb.gradient,
            hessian=wb.hessian,
            lap_gradient=wb.lap_gradient,
        )

    def adjoint(self, cot, x, mu, order):
        out = DerivativeBundle(
            value=cot.value,
            gradient=cot.gradient,
            hessian=None,
            lap_gradient=cot.lap_gradient,
        )
        if order >= 2:
            n = cot.value.shape[0]
            d = cot.gradient.shape[1] if cot.gradient is not None else 1
            h = np.zeros((n, d, d))
            if cot.hessian is not None:
                h += cot.hessian
            if cot.laplacian is not None:
                for c in range(d):
                    h[:, c, c] += cot.laplacian
            out.hessian = h
        return out


@dataclass(frozen=True)
class LevelSetDirichlet:
    """u_theta = phi * w + g with phi = 0 on the Dirichlet boundary."""

    phi: Field
    g: Field

    max_order = 3
    kind = "dirichlet"

    def w_order(self, order: int) -> int:
        return order

    def compose(self, wb, x, mu, order):
        pb = field_bundle(self.phi, x, mu, order)
        gb = field_bundle(self.g, x, mu, order)
        u = _mul_full(pb, wb, order)
        u.value = u.value + gb.value
        if order >= 1:
            u.gradient = u.gradient + gb.gradient
        if order >= 2:
            u.hessian = u.hessian + gb.hessian
        if order >= 3:
            u.lap_gradient = u.lap_gradient + gb.lap_gradient
        return u

    def adjoint(self, cot, x, mu, order):
        pb = field_bundle(self.phi, x, mu, order)
        return _mul_full_adjoint(pb, cot, order)


@dataclass(frozen=True)
class MixedRobin:
    """Exact Robin data on {phi_i = 0}, Dirichlet g on {phi_e = 0}.

    Requires |grad phi_i| = 1 on the inner boundary (signed distance) and
    unit Robin coefficient.  Output bundles carry value, gradient, Laplacian;
    the full Hessian of u_theta is not representable here.
    """

    phi_i: Field
    phi_e: Field
    g: Field
    g_r: Field

    max_order = 2
    kind = "mixed"

    def w_order(self, order: int) -> int:
        return order + 1

    def _analytic(self, x, mu, order):
        pi3 = self.phi_i.taylor(x, mu, min(order + 1, 3))
        pi = pi3.truncated(order)
        pe = self.phi_e.taylor(x, mu, order)
        den = pe + pi * pi
        A = pe / den
        c1 = A * (1.0 + pi) + pe * pi * pi
        c2 = A * pi
        k0 = (pi * pi / den) * self.g.taylor(x, mu, order) - c2 * self.g_r.taylor(
            x, mu, order
        )
        return pi3, c1, c2, k0

    def compose(self, wb, x, mu, order):
        if order > self.max_order:
            raise UnsupportedError(
                "mixed Robin composition supports derivatives up to order 2"
            )
        pi3, c1, c2, k0 = self._analytic(x, mu, order)
        # s = grad phi_i . grad w and its derivatives (one order deeper in w)
        s0 = np.einsum("nc,nc->n", pi3.grad, wb.gradient)
        s_grad = s_lap = None
        if order >= 1:
            s_grad = np.einsum("nca,nc->na", pi3.hess, wb.gradient) + np.einsum(
                "nc,nca->na", pi3.grad, wb.hessian
            )
        if order >= 2:
            t_pi = pi3.third[:, 0, 0, :].copy()
            for a in range(1, pi3.grad.shape[1]):
                t_pi += pi3.third[:, a, a, :]
            s_lap = (
                np.einsum("nc,nc->n", t_pi, wb.gradient)
                + 2.0 * np.einsum("nca,nca->n", pi3.hess, wb.hessian)
                + np.einsum("nc,nc->n", pi3.grad, wb.lap_gradient)
            )
        u0 = c1.val * wb.value - c2.val * s0 + k0.val
        ug = ul = None
        if order >= 1:
            ug = (
                c1.grad * wb.value[:, None]
                + c1.val[:, None] * wb.gradient
                - c2.grad * s0[:, None]
                - c2.val[:, None] * s_grad
                + k0.grad
            )
        if order >= 2:
            ul = (
                _lap(c1.hess) * wb.value
                + 2.0 * np.einsum("nc,nc->n", c1.grad, wb.gradient)
                + c1.val * _lap(wb.hessian)
                - _lap(c2.hess) * s0
                - 2.0 * np.einsum("nc,nc->n", c2.grad, s_grad)
                - c2.val * s_lap
                + _lap(k0.hess)
            )
        return DerivativeBundle(value=u0, gradient=ug, laplacian=ul)

    def adjoint(self, cot, x, mu, order):
        pi3, c1, c2, _ = self._analytic(x, mu, order)
        n, d = pi3.grad.shape
        ub0 = cot.value if cot.value is not None else np.zeros(n)
        ubg = cot.gradient
        ubl = cot.laplacian
        if cot.hessian is not None or cot.lap_gradient is not None:
            raise UnsupportedError(
                "mixed Robin composition carries no Hessian or third order"
            )
        w0 = c1.val * ub0
        wg = np.zeros((n, d))
        wh = np.zeros((n, d, d)) if order >= 1 else None
        wt = np.zeros((n, d)) if order >= 2 else None
        # cotangent flowing into s's trace bundle
        sb0 = -c2.val * ub0
        sbg = None
        sbl = None
        if ubg is not None:
            w0 = w0 + np.einsum("nc,nc->n", c1.grad, ubg)
            wg += c1.val[:, None] * ubg
            sb0 = sb0 - np.einsum("nc,nc->n", c2.grad, ubg)
            sbg = -c2.val[:, None] * ubg
        if ubl is not None:
            w0 = w0 + _lap(c1.hess) * ubl
            wg += 2.0 * c1.grad * ubl[:, None]
            for c in range(d):
                wh[:, c, c] += c1.val * ubl
            sb0 = sb0 - _lap(c2.hess) * ubl
            if sbg is None:
                sbg = np.zeros((n, d))
            sbg = sbg - 2.0 * c2.grad * ubl[:, None]
            sbl = -c2.val * ubl
        # transpose of the s machinery back onto w slots
        wg += pi3.grad * sb0[:, None]
        if sbg is not None:
            wg += np.einsum("nca,na->nc", pi3.hess, sbg)
            wh += pi3.grad[:, :, None] * sbg[:, None, :]
        if sbl is not None:
            t_pi = pi3.third[:, 0, 0, :].copy()
            for a in range(1, d):
                t_pi += pi3.third[:, a, a, :]
            wg += t_pi * sbl[:, None]
            wh += 2.0 * pi3.hess * sbl[:, None, None]
            wt += pi3.grad * sbl[:, None]
        return DerivativeBundle(value=w0, gradient=wg, hessian=wh, lap_gradient=wt)


Composition = Union[RawComposition, LevelSetDirichlet, MixedRobin]


class Prior:
    """A source (network or analytic field) behind a boundary composition.

    lift is the constant M of the positivity shift u_{theta,M} = u_theta + M
    used by the multiplicative solver; evaluate(..., lifted=True) adds it.
    """

    def __init__(
        self,
        source: Union[MlpNetwork, Field],
        composition: Optional[Composition] = None,
        lift: float = 0.0,
        problem_id: str = "",
    ):
        self.source = source
        self.composition = composition if composition is not None else RawComposition()
        if lift < 0:
            raise ValueError("lifting constant must be nonnegative")
        self.lift = float(lift)
        self.problem_id = problem_id

    @property
    def network(self) -> Optional[MlpNetwork]:
        return self.source if isinstance(self.source, MlpNetwork) else None

    @property
    def max_order(self) -> int:
        return self.composition.max_order

    def with_lift(self, lift: float) -> "Prior":
        return Prior(self.source, self.composition, lift, self.problem_id)

    def _source_bundle(self, x, mu, order):
        if isinstance(self.source, MlpNetwork):
            return neural.input_derivatives(
                self.source, x, () if mu is None else mu, order=order
            )
        return field_bundle(self.source, x, mu, order)

    def evaluate(self, x, mu=None, order: int = 2, lifted: bool = False):
        """Bundle of u_theta (or u_{theta,M}) at the points x."""
        if order > self.composition.max_order:
            raise UnsupportedError(
                f"composition {self.composition.kind!r} supports derivatives "
                f"up to order {self.composition.max_order}, requested {order}"
            )
        x = np.atleast_2d(np.asarray(x, dtype=float))
        w_order = self.composition.w_order(order)
        wb = self._source_bundle(x, mu, w_order)
        out = self.composition.compose(wb, x, mu, order)
        if lifted and self.lift:
            out.value = out.value + self.lift
        return out

    def __call__(self, x, mu=None, lifted: bool = False) -> np.ndarray:
        return self.evaluate(x, mu, order=0, lifted=lifted).value

    def loss_gradient(self, x, mu, evaluator, order: int = 2):
        """(loss, dloss/dtheta) for a loss defined on u_theta bundles.

        evaluator(bundle_of_u_theta) -> (loss, cotangent_bundle); the
        cotangent is transposed through the composition onto the network.
        """
        net = self.network
        if net is None:
            raise UnsupportedError("analytic priors carry no trainable parameters")
        if order > self.composition.max_order:
            raise UnsupportedError(
                f"composition {self.composition.kind!r} supports derivatives "
                f"up to order {self.composition.max_order}, requested {order}"
            )
        x = np.atleast_2d(np.asarray(x, dtype=float))

        def chained(wb):
            ub = self.composition.compose(wb, x, mu, order)
            loss, cot_u = evaluator(ub)
            return loss, self.composition.adjoint(cot_u, x, mu, order)

        return neural.parameter_gradient(
            net,
            x,
            () if mu is None else mu,
            chained,
            order=self.composition.w_order(order),
        )


def composition_for(problem) -> Composition:
    """The boundary composition matching a catalog problem."""
    if problem is None:
        return RawComposition()
    if problem.mixed_bc:
        return MixedRobin(
            phi_i=problem.level_set,
            phi_e=problem.level_set_outer,
            g=problem.dirichlet,
            g_r=problem.robin_field,
        )
    return LevelSetDirichlet(phi=problem.level_set, g=problem.dirichlet)


_PRIOR_MAGIC = b"ENRFEMP1"
_KIND_IDS = {"raw": 0, "dirichlet": 1, "mixed": 2}


def save_prior(prior: Prior, path) -> None:
    """Weights plus a composition descriptor (problem id, kind, lift)."""
    import struct

    net = prior.network
    if net is None:
        raise UnsupportedError("only network priors can be saved")
    pid = prior.problem_id.encode()
    head = _PRIOR_MAGIC + struct.pack(
        "<BHd", _KIND_IDS[prior.composition.kind], len(pid), prior.lift
    )
    with open(path, "wb") as f:
        f.write(head + pid + neural.weights_to_bytes(net))


def load_prior(path) -> Prior:
    """Rebuild a prior; the composition is reconstructed from the problem id."""
    import struct

    with open(path, "rb") as f:
        raw = f.read()
    head = len(_PRIOR_MAGIC) + struct.calcsize("<BHd")
    if len(raw) < head or raw[: len(_PRIOR_MAGIC)] != _PRIOR_MAGIC:
        raise FormatError("not a prior file")
    kind_id, pid_len, lift = struct.unpack("<BHd", raw[len(_PRIOR_MAGIC) : head])
    kinds = {v: k for k, v in _KIND_IDS.items()}
    if kind_id not in kinds:
        raise FormatError(f"unknown composition id {kind_id}")
    if len(raw) < head + pid_len:
        raise FormatError("prior file truncated")
    pid = raw[head : head + pid_len].decode()
    net = neural.weights_from_bytes(raw[head + pid_len :])
    kind = kinds[kind_id]
    if kind == "raw":
        comp: Composition = RawComposition()
    else:
        from .catalog import get_problem

        problem = get_problem(pid)
        comp = composition_for(problem)
        if comp.kind != kind:
            raise FormatError(
                f"prior file says {kind!r} but problem {pid!r} needs {comp.kind!r}"
            )
    return Prior(net, comp, lift=lift, problem_id=pid)
