"""Error records, gains, gain-constant estimation, and study tables.

Everything here reduces solver output to numbers: relative errors against a
declared reference, per-sample gain ratios with summary statistics, the
closed-form gain constants evaluated on dedicated fine grids, sweeps over
the lifting constant and the source-interpolation degree, and the CSV
writers for all of it.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .enrichment import (
    EnrichedSolution,
    solve_additive,
    solve_multiplicative,
)
from .errors import LiftingError, UnsupportedError
from .fem import (
    DiscreteField,
    LagrangeSpace,
    QuadData,
    field_on_quad,
    quadrature,
)
from .fields import Field
from .mesh import build_square_mesh, edge_lengths
from .priors import Prior

Reference = Union[Field, DiscreteField, EnrichedSolution]


# ---------------------------------------------------------------------------
# errors


@dataclass
class ErrorRecord:
    """Relative errors of one parameter instance on one mesh.

    e_mult maps the lifting constant M to the multiplicative error; the H1
    slots stay None when the reference provides no gradients (fine-mesh
    discrete references).
    """

    mu: np.ndarray
    k: int
    h: float
    N: Optional[int] = None
    e_h: Optional[float] = None
    e_theta: Optional[float] = None
    e_add: Optional[float] = None
    e_mult: Dict[float, float] = field(default_factory=dict)
    e_h_h1: Optional[float] = None
    e_theta_h1: Optional[float] = None
    e_add_h1: Optional[float] = None
    e_mult_h1: Dict[float, float] = field(default_factory=dict)


def _reference_at(reference: Reference, pts: np.ndarray, mu):
    """Reference values and, when differentiable, gradients at points."""
    if isinstance(reference, Field):
        tv = reference.taylor(pts, mu, 1)
        return tv.val, tv.grad
    if isinstance(reference, (DiscreteField, EnrichedSolution)):
        return reference(pts), None
    raise TypeError(f"unsupported reference type {type(reference).__name__}")


def _relative_pair(qd: QuadData, dv, dg, rv, rg):
    """(relative L2, relative H1-semi or None) from quadrature samples."""
    l2e = float(np.sum(qd.wdet * (dv - rv) ** 2))
    l2r = float(np.sum(qd.wdet * rv**2))
    out_l2 = math.sqrt(l2e) / math.sqrt(l2r)
    if rg is None or dg is None:
        return out_l2, None
    h1e = float(np.sum(qd.wdet * np.sum((dg - rg) ** 2, axis=-1)))
    h1r = float(np.sum(qd.wdet * np.sum(rg**2, axis=-1)))
    return out_l2, math.sqrt(h1e) / math.sqrt(h1r)


def _solution_samples(solution, space, qd, mu):
    if isinstance(solution, EnrichedSolution):
        return solution.on_quad(qd)
    if isinstance(solution, DiscreteField):
        return field_on_quad(space, solution.coeffs, qd)
    raise TypeError(f"unsupported solution type {type(solution).__name__}")


def compute_errors(
    space: LagrangeSpace,
    mu,
    reference: Reference,
    standard=None,
    prior: Optional[Prior] = None,
    additive=None,
    multiplicative: Optional[Dict[float, EnrichedSolution]] = None,
    quad_degree: Optional[int] = None,
    N: Optional[int] = None,
) -> ErrorRecord:
    """Relative L2/H1 errors of the supplied solutions on one mesh."""
    qd = space.quad_data(
        quad_degree if quad_degree is not None else 2 * space.k + 2
    )
    rv, rg = _reference_at(reference, qd.flat_points, mu)
    rv = rv.reshape(qd.wdet.shape)
    if rg is not None:
        rg = rg.reshape(qd.wdet.shape + (space.mesh.dim,))
    rec = ErrorRecord(
        mu=np.asarray(mu, dtype=float),
        k=space.k,
        h=float(edge_lengths(space.mesh).max()),
        N=N,
    )
    if standard is not None:
        dv, dg = _solution_samples(standard, space, qd, mu)
        rec.e_h, rec.e_h_h1 = _relative_pair(qd, dv, dg, rv, rg)
    if prior is not None:
        b = prior.evaluate(qd.flat_points, mu, order=1)
        dv = b.value.reshape(qd.wdet.shape)
        dg = b.gradient.reshape(qd.wdet.shape + (space.mesh.dim,))
        rec.e_theta, rec.e_theta_h1 = _relative_pair(qd, dv, dg, rv, rg)
    if additive is not None:
        dv, dg = _solution_samples(additive, space, qd, mu)
        rec.e_add, rec.e_add_h1 = _relative_pair(qd, dv, dg, rv, rg)
    for lift, sol in (multiplicative or {}).items():
        dv, dg = _solution_samples(sol, space, qd, mu)
        l2, h1 = _relative_pair(qd, dv, dg, rv, rg)
        rec.e_mult[float(lift)] = l2
        if h1 is not None:
            rec.e_mult_h1[float(lift)] = h1
    return rec


# ---------------------------------------------------------------------------
# gains


@dataclass
class GainStats:
    """Per-sample gains with summary statistics over the finite entries."""

    name: str
    values: np.ndarray
    n_infinite: int
    vmin: float
    vmax: float
    mean: float
    std: float


def _gain_stats(name: str, num: np.ndarray, den: np.ndarray) -> GainStats:
    with np.errstate(divide="ignore"):
        values = np.where(den == 0.0, np.inf, num / np.where(den == 0, 1.0, den))
    finite = values[np.isfinite(values)]
    n_inf = int(values.size - finite.size)
    if finite.size == 0:
        return GainStats(name, values, n_inf, math.nan, math.nan, math.nan, math.nan)
    return GainStats(
        name,
        values,
        n_inf,
        float(finite.min()),
        float(finite.max()),
        float(finite.mean()),
        float(finite.std()),
    )


def _lift_label(lift: float) -> str:
    return "%g" % lift


def compute_gains(records: Sequence[ErrorRecord]) -> Dict[str, GainStats]:
    """Gain ratios over a parameter sample, one GainStats per method pair.

    G_plus_theta = e_theta/e_add, G_plus = e_h/e_add, and per lifting
    constant G_M_theta_<M> = e_theta/e_M, G_M_<M> = e_h/e_M.  Vanishing
    denominators produce +inf entries that are excluded from the summary
    statistics and counted in n_infinite.
    """
    out: Dict[str, GainStats] = {}
    e_h = np.array([r.e_h for r in records], dtype=float)
    e_theta = np.array(
        [math.nan if r.e_theta is None else r.e_theta for r in records]
    )
    if all(r.e_add is not None for r in records):
        e_add = np.array([r.e_add for r in records], dtype=float)
        if not np.any(np.isnan(e_theta)):
            out["G_plus_theta"] = _gain_stats("G_plus_theta", e_theta, e_add)
        out["G_plus"] = _gain_stats("G_plus", e_h, e_add)
    lifts = sorted({m for r in records for m in r.e_mult})
    for lift in lifts:
        if not all(lift in r.e_mult for r in records):
            continue
        e_m = np.array([r.e_mult[lift] for r in records])
        label = _lift_label(lift)
        if not np.any(np.isnan(e_theta)):
            out[f"G_M_theta_{label}"] = _gain_stats(
                f"G_M_theta_{label}", e_theta, e_m
            )
        out[f"G_M_{label}"] = _gain_stats(f"G_M_{label}", e_h, e_m)
    return out


# ---------------------------------------------------------------------------
# gain constants


@dataclass
class GainConstants:
    """Closed-form gain constants evaluated on dedicated estimation grids."""

    q: int
    c_add: float
    c_mult_h1: Dict[float, float]
    c_mult_l2: Dict[float, float]
    c_theta: Dict[float, float]
    grid: str


def _quotient_derivatives(av, ag, ah, bv, bg, bh):
    """Value, gradient, Hessian of a/b from the factors' derivatives."""
    r = av / bv
    rg = (ag - r[:, None] * bg) / bv[:, None]
    rh = (
        ah
        - r[:, None, None] * bh
        - rg[:, :, None] * bg[:, None, :]
        - bg[:, :, None] * rg[:, None, :]
    ) / bv[:, None, None]
    return r, rg, rh


def _hess_sq(h: np.ndarray) -> np.ndarray:
    # squared Frobenius norm; in 1D this is just (u'')^2
    return np.sum(h**2, axis=(1, 2))


def _integration_grid(domain, n_cells: int, n_2d: int, degree_2d: int):
    """Quadrature points and weights covering the domain."""
    if len(domain) == 1:
        (a, b) = domain[0]
        rule = quadrature(1, 19)  # 10-point Gauss per subinterval
        edges = np.linspace(a, b, n_cells + 1)
        h = np.diff(edges)
        pts = edges[:-1, None] + h[:, None] * rule.points[None, :, 0]
        w = h[:, None] * rule.weights[None, :]
        return pts.reshape(-1, 1), w.ravel()
    (ax, bx), (ay, by) = domain
    mesh = build_square_mesh(n_2d, ax, bx, ay, by)
    space = LagrangeSpace(mesh, 1)
    qd = space.quad_data(degree_2d)
    return qd.flat_points, qd.wdet.ravel()


def _sup_grid(domain, sup_points: int, sup_side: int):
    if len(domain) == 1:
        (a, b) = domain[0]
        return np.linspace(a, b, sup_points)[:, None]
    (ax, bx), (ay, by) = domain
    gx = np.linspace(ax, bx, sup_side)
    gy = np.linspace(ay, by, sup_side)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def _check_positive(w: np.ndarray, pts: np.ndarray, lift: float):
    bad = w <= 0.0
    if np.any(bad):
        i = int(np.argmax(bad))
        raise LiftingError(
            f"lifted prior u_theta + M = {w[i]:.6g} is not positive at "
            f"point {pts[i]} (M = {lift:g})"
        )


def estimate_gain_constants(
    u: Field,
    prior: Prior,
    mu,
    domain,
    q: int = 1,
    lifts: Sequence[float] = (),
    n_cells: int = 2048,
    sup_points: int = 4096,
    n_2d: int = 129,
    degree_2d: int = 10,
    sup_side: int = 128,
) -> GainConstants:
    """Additive and multiplicative gain constants on fine estimation grids.

    The H^{q+1} semi-norms are integrated on a composite Gauss grid (1D) or
    a fine triangulation (2D); the W^{k,inf} norms are maxima over a dense
    uniform sample.  Only q = 1 is supported: the constants then involve
    H^2 semi-norms and second derivatives of 1/u_{theta,M}.
    """
    if q != 1:
        raise UnsupportedError(f"gain constants implemented for q=1 only, got {q}")
    pts, w = _integration_grid(domain, n_cells, n_2d, degree_2d)
    sup = _sup_grid(domain, sup_points, sup_side)

    ub = u.taylor(pts, mu, 2)
    pb = prior.evaluate(pts, mu, order=2)
    if pb.hessian is None:
        raise UnsupportedError(
            "gain-constant estimation needs the prior's Hessian, which this "
            "prior does not provide"
        )
    us = u.taylor(sup, mu, 2)
    ps = prior.evaluate(sup, mu, order=2)

    h2_u = math.sqrt(float(np.sum(w * _hess_sq(ub.hess))))
    h2_diff = math.sqrt(float(np.sum(w * _hess_sq(ub.hess - pb.hessian))))
    c_add = h2_diff / h2_u

    c_mult_h1: Dict[float, float] = {}
    c_mult_l2: Dict[float, float] = {}
    c_theta: Dict[float, float] = {}
    for lift in lifts:
        lift = float(lift)
        wv = pb.value + lift
        _check_positive(wv, pts, lift)
        ws = ps.value + lift
        _check_positive(ws, sup, lift)

        r, rg, rh = _quotient_derivatives(
            ub.val + lift, ub.grad, ub.hess, wv, pb.gradient, pb.hessian
        )
        h2_ratio = math.sqrt(float(np.sum(w * _hess_sq(rh))))

        # W^{1,inf} norm of the lifted prior on the sup grid
        w1 = max(
            float(np.max(np.abs(ws))),
            float(np.max(np.linalg.norm(ps.gradient, axis=1))),
        )
        # derivatives of 1/u_{theta,M}
        inv = 1.0 / ws
        inv_g = -ps.gradient / ws[:, None] ** 2
        inv_h = (
            -ps.hessian / ws[:, None, None] ** 2
            + 2.0
            * ps.gradient[:, :, None]
            * ps.gradient[:, None, :]
            / ws[:, None, None] ** 3
        )
        ct = (
            float(np.max(np.abs(inv)))
            + 2.0 * float(np.max(np.linalg.norm(inv_g, axis=1)))
            + float(np.max(np.sqrt(_hess_sq(inv_h))))
        )
        c_mult_h1[lift] = h2_ratio * w1 / h2_u
        c_mult_l2[lift] = ct * h2_ratio * w1**2 / h2_u
        c_theta[lift] = ct

    if len(domain) == 1:
        grid = f"1d: gauss10 x {n_cells} cells, sup {sup_points}"
    else:
        grid = f"2d: N={n_2d} degree {degree_2d}, sup {sup_side}x{sup_side}"
    return GainConstants(q, c_add, c_mult_h1, c_mult_l2, c_theta, grid)


# ---------------------------------------------------------------------------
# sweeps and studies


def convergence_slope(hs: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if hs.size != errors.size or hs.size < 2:
        raise ValueError("need at least two (h, error) pairs")
    if np.any(errors <= 0) or np.any(hs <= 0):
        raise ValueError("slope fit needs positive h and error values")
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


def m_sweep(
    problem,
    prior: Prior,
    lifts: Sequence[float],
    space: LagrangeSpace,
    mu=None,
    quad_degree: Optional[int] = None,
) -> List[dict]:
    """Multiplicative error and gain constants per M, plus the additive row.

    Rows are sorted by M; the additive row carries M = inf since the
    multiplicative constants converge to the additive one in that limit.
    """
    mu = problem.mu_1 if mu is None else np.asarray(mu, dtype=float)
    coeffs = problem.coefficients(mu)
    reference = problem.solution
    constants = estimate_gain_constants(
        reference, prior, mu, problem.domain, lifts=sorted(lifts)
    )
    rows = []
    mult = {}
    for lift in sorted(lifts):
        mult[lift] = solve_multiplicative(
            space, coeffs, prior, lift=lift, quad_degree=quad_degree
        )
    additive = solve_additive(space, coeffs, prior, quad_degree=quad_degree)
    rec = compute_errors(
        space, mu, reference, additive=additive, multiplicative=mult,
        quad_degree=quad_degree,
    )
    for lift in sorted(lifts):
        rows.append(
            {
                "method": "multiplicative",
                "M": float(lift),
                "error": rec.e_mult[lift],
                "c_h1": constants.c_mult_h1[lift],
                "c_l2": constants.c_mult_l2[lift],
            }
        )
    rows.append(
        {
            "method": "additive",
            "M": math.inf,
            "error": rec.e_add,
            "c_h1": constants.c_add,
            "c_l2": constants.c_add,
        }
    )
    return rows


def quadrature_degree_study(
    problem,
    prior: Prior,
    space: LagrangeSpace,
    ms: Sequence[int],
    mu=None,
    quad_degree: Optional[int] = None,
) -> List[dict]:
    """Additive error as a function of the source-interpolation degree m."""
    mu = problem.mu_1 if mu is None else np.asarray(mu, dtype=float)
    coeffs = problem.coefficients(mu)
    rows = []
    for m in ms:
        sol = solve_additive(
            space, coeffs, prior, quad_degree=quad_degree, prior_interp_degree=m
        )
        rec = compute_errors(
            space, mu, problem.solution, additive=sol, quad_degree=quad_degree
        )
        rows.append({"m": int(m), "error": rec.e_add})
    return rows


def cost_model(space_std, space_add, n_p: int, n_weights: int):
    """Parametric-study cost: (n_p * dofs_std, n_p * dofs_add + n_weights)."""
    dofs_std = space_std.n_dofs if hasattr(space_std, "n_dofs") else int(space_std)
    dofs_add = space_add.n_dofs if hasattr(space_add, "n_dofs") else int(space_add)
    return n_p * dofs_std, n_p * dofs_add + n_weights


# ---------------------------------------------------------------------------
# CSV writers


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    if isinstance(x, float):
        return "%.17g" % x
    return str(x)


def _mult_columns(records: Sequence[ErrorRecord]) -> List[float]:
    return sorted({m for r in records for m in r.e_mult})


def write_convergence_table(
    records: Sequence[ErrorRecord], path, floor: Optional[float] = None
) -> None:
    """Per-mesh errors with a least-squares slope footer per error column.

    Columns whose errors never exceed `floor` get the footer "floor" instead
    of a slope; a fit through solver noise would be meaningless.
    """
    lifts = _mult_columns(records)
    cols = ["e_h", "e_h_plus"] + [f"e_h_M_{_lift_label(m)}" for m in lifts]
    with open(path, "w") as f:
        f.write("mu_id,k,N,h," + ",".join(cols) + "\n")
        for i, r in enumerate(records):
            vals = [r.e_h, r.e_add] + [r.e_mult.get(m) for m in lifts]
            f.write(
                ",".join(
                    [str(i), str(r.k), "" if r.N is None else str(r.N), _fmt(r.h)]
                    + [_fmt(v) for v in vals]
                )
                + "\n"
            )
        footer = ["slope", "", "", ""]
        hs = np.array([r.h for r in records])
        for getter in (
            [lambda r: r.e_h, lambda r: r.e_add]
            + [lambda r, m=m: r.e_mult.get(m) for m in lifts]
        ):
            es = [getter(r) for r in records]
            if any(e is None for e in es) or len(es) < 2:
                footer.append("")
            elif floor is not None and max(es) <= floor:
                footer.append("floor")
            elif min(es) <= 0:
                footer.append("")
            else:
                footer.append(_fmt(convergence_slope(hs, es)))
        f.write(",".join(footer) + "\n")


def write_gain_table(records: Sequence[ErrorRecord], path) -> None:
    """Per-sample errors and gain ratios."""
    lifts = _mult_columns(records)
    cols = ["e_theta", "e_h", "e_h_plus"]
    cols += [f"e_h_M_{_lift_label(m)}" for m in lifts]
    cols += ["G_plus_theta", "G_plus"]
    for m in lifts:
        cols += [f"G_M_theta_{_lift_label(m)}", f"G_M_{_lift_label(m)}"]

    def ratio(num, den):
        if num is None or den is None:
            return None
        return math.inf if den == 0.0 else num / den

    with open(path, "w") as f:
        f.write("mu_id," + ",".join(cols) + "\n")
        for i, r in enumerate(records):
            row = [r.e_theta, r.e_h, r.e_add]
            row += [r.e_mult.get(m) for m in lifts]
            row += [ratio(r.e_theta, r.e_add), ratio(r.e_h, r.e_add)]
            for m in lifts:
                row += [
                    ratio(r.e_theta, r.e_mult.get(m)),
                    ratio(r.e_h, r.e_mult.get(m)),
                ]
            f.write(str(i) + "," + ",".join(_fmt(v) for v in row) + "\n")


def write_stats_table(stats: Dict[str, GainStats], path) -> None:
    # infinite-gain counts live on GainStats and go to the run log, not the CSV
    with open(path, "w") as f:
        f.write("method,min,max,mean,std\n")
        for name in sorted(stats):
            s = stats[name]
            f.write(
                ",".join(
                    [name] + [_fmt(v) for v in (s.vmin, s.vmax, s.mean, s.std)]
                )
                + "\n"
            )


def write_m_sweep_table(rows: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        f.write("method,M,error,c_gain_h1,c_gain_l2\n")
        for r in rows:
            f.write(
                ",".join(
                    [r["method"], _fmt(r["M"]), _fmt(r["error"]),
                     _fmt(r["c_h1"]), _fmt(r["c_l2"])]
                )
                + "\n"
            )


def write_degree_study_table(rows: Sequence[dict], path) -> None:
    with open(path, "w") as f:
        f.write("m,e_h_plus\n")
        for r in rows:
            f.write(f"{r['m']},{_fmt(r['error'])}\n")
