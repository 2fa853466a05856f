"""Finite element solvers with a prior folded into the trial space.

Three entry points over one Lagrange space.  solve_standard is the plain
Galerkin method.  solve_additive seeks a correction p so that u_theta + p
solves the problem: a(p, v) = l(v) - a(u_theta, v), with the right-hand
side formed in strong form (the residual f - L(u_theta) is interpolated
element-wise onto broken degree-m polynomials, then integrated by a rule
of degree m + k).  solve_multiplicative seeks a factor p for the lifted
prior w = u_theta + M: a(w p, w v) = l_M(w v), assembled by expanding the
composite basis w*phi_i at the quadrature points.

The standard and additive paths discretize the source through the same
interpolation pipeline, so a vanishing prior reproduces the standard
coefficients to rounding.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, LiftingError, UnsupportedError
from .fem import (
    DiscreteField,
    LagrangeSpace,
    ProblemCoefficients,
    QuadData,
    _diffusion_values,
    _scatter_matrix,
    apply_dirichlet,
    assemble_bilinear,
    facet_quadrature,
    facet_rhs,
    field_on_quad,
    reference_element,
    rhs_from_quad_values,
    solve_linear,
)
from .priors import Prior


class EnrichmentMode(Enum):
    STANDARD = "standard"
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


@dataclass
class EnrichedSolution:
    """A solved correction plus the recipe to reconstruct the solution.

    correction holds the finite element unknown: u_h itself (standard),
    the additive correction p, or the multiplicative factor p.  The
    reconstruction is u_h, u_theta + p, or (u_theta + M) * p - M.
    """

    mode: EnrichmentMode
    correction: DiscreteField
    prior: Optional[Prior] = None
    mu: Optional[np.ndarray] = None
    lift: float = 0.0
    bc_mode: str = "strong"

    @property
    def space(self) -> LagrangeSpace:
        return self.correction.space

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        """Reconstructed solution values at arbitrary points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        p = self.correction(pts)
        if self.mode is EnrichmentMode.STANDARD:
            return p
        u = self.prior(pts, self.mu)
        if self.mode is EnrichmentMode.ADDITIVE:
            return u + p
        return (u + self.lift) * p - self.lift

    def on_quad(self, qd: QuadData):
        """Reconstructed values (c, nq) and gradients (c, nq, d) on a rule."""
        vals, grads = field_on_quad(self.space, self.correction.coeffs, qd)
        if self.mode is EnrichmentMode.STANDARD:
            return vals, grads
        b = self.prior.evaluate(qd.flat_points, self.mu, order=1)
        uv = b.value.reshape(vals.shape)
        ug = b.gradient.reshape(grads.shape)
        if self.mode is EnrichmentMode.ADDITIVE:
            return vals + uv, grads + ug
        w = uv + self.lift
        return w * vals - self.lift, w[..., None] * grads + vals[..., None] * ug


# ---------------------------------------------------------------------------
# right-hand sides


def _operator_values(
    coeffs: ProblemCoefficients, pts: np.ndarray, prior: Prior
) -> np.ndarray:
    """L(u_theta) = R u + C . grad u - (1/Pe) div(D grad u) at points."""
    b = prior.evaluate(pts, coeffs.mu, order=2)
    out = np.zeros(pts.shape[0])
    if coeffs.reaction is not None:
        out += coeffs.reaction(pts, coeffs.mu) * b.value
    if coeffs.convection is not None:
        out += b.gradient @ np.asarray(coeffs.convection, dtype=float)
    if coeffs.diffusion is None:
        out -= b.laplacian_values() / coeffs.peclet
    else:
        if b.hessian is None:
            raise UnsupportedError(
                "variable diffusion needs the prior's Hessian, which this "
                "prior does not provide"
            )
        tv = coeffs.diffusion_at(pts, 1)
        d = pts.shape[1]
        div = np.zeros(pts.shape[0])
        for a in range(d):
            for c in range(d):
                div += tv[a][c].grad[:, a] * b.gradient[:, c]
                div += tv[a][c].val * b.hessian[:, a, c]
        out -= div / coeffs.peclet
    return out


def _volume_rhs(
    space: LagrangeSpace,
    coeffs: ProblemCoefficients,
    prior: Optional[Prior],
    m: int,
    quad_degree: Optional[int],
) -> np.ndarray:
    """int F_m v with F = f - L(u_theta) interpolated at degree m per cell."""
    elem = reference_element(space.mesh.dim, m)
    nodes = space.cell_origin[:, None, :] + np.einsum(
        "cde,ne->cnd", space.J, elem.nodes
    )
    flat = nodes.reshape(-1, space.mesh.dim)
    F = coeffs.source(flat, coeffs.mu)
    if prior is not None:
        F = F - _operator_values(coeffs, flat, prior)
    degree = m + space.k
    if quad_degree is not None:
        degree = max(degree, quad_degree)
    qd = space.quad_data(degree)
    psi, _ = elem.tabulate(qd.rule.points)
    Fq = np.einsum("qn,cn->cq", psi, F.reshape(-1, elem.n_basis))
    return rhs_from_quad_values(space, qd, Fq)


def _robin_rhs(
    space: LagrangeSpace,
    coeffs: ProblemCoefficients,
    prior: Optional[Prior],
) -> np.ndarray:
    """Robin load int (g_R - alpha u_theta - (1/Pe) D grad u_theta . n) v."""
    if coeffs.robin is None or space.mesh.dim != 2:
        return np.zeros(space.n_dofs)
    fq = facet_quadrature(space, coeffs.robin_marker, 2 * space.k + 2)
    if fq is None:
        return np.zeros(space.n_dofs)
    nq = fq.weights.shape[1]
    flat = fq.points.reshape(-1, 2)
    normals = np.repeat(fq.normals, nq, axis=0)
    vals = coeffs.robin.at(flat, normals, coeffs.mu)
    if prior is not None:
        pb = prior.evaluate(flat, coeffs.mu, order=1)
        flux = pb.gradient
        D = _diffusion_values(coeffs, flat)
        if D is not None:
            flux = np.einsum("nab,nb->na", D, flux)
        vals = vals - coeffs.robin_coeff * pb.value
        vals = vals - np.einsum("na,na->n", flux, normals) / coeffs.peclet
    return facet_rhs(space, fq, vals.reshape(fq.weights.shape))


# ---------------------------------------------------------------------------
# solvers


def solve_standard(
    space: LagrangeSpace,
    coeffs: ProblemCoefficients,
    quad_degree: Optional[int] = None,
) -> EnrichedSolution:
    """Classical Galerkin solution of the bound problem."""
    A = assemble_bilinear(space, coeffs, quad_degree)
    b = _volume_rhs(space, coeffs, None, space.k + 2, quad_degree)
    b += _robin_rhs(space, coeffs, None)
    A, b = apply_dirichlet(
        A,
        b,
        space,
        lambda x: coeffs.dirichlet(x, coeffs.mu),
        coeffs.dirichlet_markers,
    )
    u = solve_linear(A, b)
    return EnrichedSolution(
        EnrichmentMode.STANDARD, DiscreteField(space, u), None, coeffs.mu
    )


def solve_additive(
    space: LagrangeSpace,
    coeffs: ProblemCoefficients,
    prior: Prior,
    quad_degree: Optional[int] = None,
    prior_interp_degree: Optional[int] = None,
) -> EnrichedSolution:
    """Additive correction: a(p, v) = l(v) - a(u_theta, v), strong-form rhs."""
    m = space.k + 2 if prior_interp_degree is None else prior_interp_degree
    if m < space.k:
        raise ConfigError(
            f"prior interpolation degree {m} below element degree {space.k}"
        )
    A = assemble_bilinear(space, coeffs, quad_degree)
    b = _volume_rhs(space, coeffs, prior, m, quad_degree)
    b += _robin_rhs(space, coeffs, prior)

    def boundary_values(x):
        return coeffs.dirichlet(x, coeffs.mu) - prior(x, coeffs.mu)

    A, b = apply_dirichlet(A, b, space, boundary_values, coeffs.dirichlet_markers)
    p = solve_linear(A, b)
    return EnrichedSolution(
        EnrichmentMode.ADDITIVE, DiscreteField(space, p), prior, coeffs.mu
    )


def _lifted_values(prior, pts, mu, lift, order):
    """Prior bundle shifted by the lifting constant, positivity enforced."""
    b = prior.evaluate(pts, mu, order=order)
    w = b.value + lift
    bad = w <= 0.0
    if np.any(bad):
        i = int(np.argmax(bad))
        raise LiftingError(
            f"lifted prior u_theta + M = {w[i]:.6g} is not positive at "
            f"point {pts[i]} (M = {lift:g})"
        )
    return w, b


def solve_multiplicative(
    space: LagrangeSpace,
    coeffs: ProblemCoefficients,
    prior: Prior,
    lift: float = 0.0,
    bc_mode: str = "strong",
    quad_degree: Optional[int] = None,
) -> EnrichedSolution:
    """Multiplicative factor p of the lifted prior: a(w p, w v) = l_M(w v).

    w = u_theta + M must be positive at every quadrature point.  bc_mode
    "strong" pins boundary dofs to (g + M)/w; "free" leaves them unknowns
    (adequate when g = 0, M = 0 and the prior is positive inside).
    """
    if bc_mode not in ("strong", "free"):
        raise ConfigError(f"unknown boundary mode {bc_mode!r}")
    if lift < 0:
        raise ConfigError(f"lifting constant must be nonnegative, got {lift}")
    degree = quad_degree if quad_degree is not None else 2 * space.k + 2
    qd = space.quad_data(degree)
    pts = qd.flat_points
    c, nq = qd.wdet.shape
    d = space.mesh.dim

    w, pb = _lifted_values(prior, pts, coeffs.mu, lift, 1)
    wv = w.reshape(c, nq)
    wg = pb.gradient.reshape(c, nq, d)

    # composite basis w*phi at the quadrature points, both trial and test
    phi_t = wv[:, :, None] * qd.phi[None, :, :]
    grad_t = (
        qd.phi[None, :, :, None] * wg[:, :, None, :]
        + wv[:, :, None, None] * qd.grad_phys
    )

    D = _diffusion_values(coeffs, pts)
    if D is None:
        local = np.einsum(
            "cq,cqid,cqjd->cij", qd.wdet / coeffs.peclet, grad_t, grad_t,
            optimize=True,
        )
    else:
        D = D.reshape(c, nq, d, d)
        local = np.einsum(
            "cq,cqid,cqde,cqje->cij",
            qd.wdet / coeffs.peclet, grad_t, D, grad_t,
            optimize=True,
        )
    fv = coeffs.source(pts, coeffs.mu)
    if coeffs.reaction is not None:
        R = coeffs.reaction(pts, coeffs.mu)
        local += np.einsum(
            "cq,cqi,cqj->cij", qd.wdet * R.reshape(c, nq), phi_t, phi_t,
            optimize=True,
        )
        if lift:
            fv = fv + lift * R
    if coeffs.convection is not None:
        Cg = np.einsum("cqjd,d->cqj", grad_t, np.asarray(coeffs.convection, float))
        local += np.einsum("cq,cqi,cqj->cij", qd.wdet, phi_t, Cg, optimize=True)
    A = _scatter_matrix(space, local)
    b = rhs_from_quad_values(space, qd, (fv * w).reshape(c, nq))

    if coeffs.robin is not None and space.mesh.dim == 2:
        fq = facet_quadrature(space, coeffs.robin_marker, degree)
        if fq is not None:
            nqf = fq.weights.shape[1]
            flat = fq.points.reshape(-1, 2)
            wf, _ = _lifted_values(prior, flat, coeffs.mu, lift, 0)
            phi_f = wf.reshape(fq.weights.shape)[:, :, None] * fq.phi
            localf = np.einsum(
                "fq,fqi,fqj->fij", fq.weights * coeffs.robin_coeff, phi_f, phi_f
            )
            nb = fq.facet_dofs.shape[1]
            rows = np.repeat(fq.facet_dofs, nb, axis=1).ravel()
            cols = np.tile(fq.facet_dofs, (1, nb)).ravel()
            A = A + sp.coo_matrix(
                (localf.ravel(), (rows, cols)),
                shape=(space.n_dofs, space.n_dofs),
            ).tocsr()
            gv = coeffs.robin.at(flat, np.repeat(fq.normals, nqf, axis=0), coeffs.mu)
            gv = gv + coeffs.robin_coeff * lift
            b += facet_rhs(space, fq, (gv * wf).reshape(fq.weights.shape))

    if bc_mode == "strong":

        def boundary_values(x):
            wb, _ = _lifted_values(prior, x, coeffs.mu, lift, 0)
            return (coeffs.dirichlet(x, coeffs.mu) + lift) / wb

        A, b = apply_dirichlet(
            A, b, space, boundary_values, coeffs.dirichlet_markers
        )
    p = solve_linear(A, b)
    return EnrichedSolution(
        EnrichmentMode.MULTIPLICATIVE,
        DiscreteField(space, p),
        prior,
        coeffs.mu,
        lift=lift,
        bc_mode=bc_mode,
    )
