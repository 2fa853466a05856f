"""Built-in parametric benchmark problems.

Each entry bundles the operator coefficients, boundary data, parameter box,
the analytic solution when one exists, the boundary level sets used for
exact boundary imposition, and a mesh builder.  Problems:

    lap1d      -(d2u/dx2) = f on (0,1), three-mode sine solution
    ell1d      du/dx - (1/Pe) d2u/dx2 = r, boundary layer at x=1
    lap2d_low  -Lap u = f on (-pi/2,pi/2)^2, Gaussian-modulated sin(2x)sin(2y)
    lap2d_high same with frequency 8
    ell2d      -div(D grad u) = Gaussian source, anisotropic D, no closed form
    annulus    -Lap u = 0 between circles r=0.25 and r=1, Dirichlet outside,
               Robin (alpha=1) inside

Parameter conventions: fields receive mu with the parameter axis last, so a
single vector (p,) and a per-point batch (n, p) both evaluate; expressions
index mu[..., j].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import fields
from .errors import ConfigError
from .fem import ProblemCoefficients, RobinData, SolutionRobinData
from .fields import Field, const_field
from .mesh import (
    BoundaryMarker,
    Mesh,
    build_annulus_mesh,
    build_interval_mesh,
    build_square_mesh,
)

__all__ = ["CatalogProblem", "PROBLEM_IDS", "get_problem"]

LN4 = float(np.log(4.0))


@dataclass(frozen=True)
class CatalogProblem:
    name: str
    dim: int
    param_box: np.ndarray  # (p, 2) lower/upper bounds
    mu_1: np.ndarray  # the two study parameters
    mu_2: np.ndarray
    domain: tuple  # ((x0, x1), ...) bounding box of the domain
    source: Field
    dirichlet: Field
    level_set: Field  # vanishes on the Dirichlet boundary
    solution: Optional[Field] = None
    reaction: Optional[Field] = None
    convection: Optional[np.ndarray] = None
    diffusion: Optional[list] = None
    peclet_of: Optional[Callable] = None  # mu -> Pe, None means 1
    robin_data: Optional[RobinData] = None
    robin_coeff: float = 1.0
    level_set_outer: Optional[Field] = None  # annulus only: phi_E
    robin_field: Optional[Field] = None  # smooth extension of the Robin datum
    n_t_of: Optional[Callable] = None  # annulus only: N -> angular count

    @property
    def n_params(self) -> int:
        return self.param_box.shape[0]

    @property
    def mixed_bc(self) -> bool:
        return self.robin_data is not None

    def peclet(self, mu) -> float:
        if self.peclet_of is None:
            return 1.0
        return float(self.peclet_of(np.asarray(mu, dtype=float)))

    def coefficients(self, mu) -> ProblemCoefficients:
        """Bind a parameter vector for assembly."""
        mu = np.asarray(mu, dtype=float)
        if mu.shape != (self.n_params,):
            raise ConfigError(
                f"{self.name} expects {self.n_params} parameters, got shape {mu.shape}"
            )
        dirichlet_markers = (
            (BoundaryMarker.OUTER,) if self.mixed_bc else (BoundaryMarker.ALL,)
        )
        return ProblemCoefficients(
            source=self.source,
            dirichlet=self.dirichlet,
            mu=mu,
            reaction=self.reaction,
            convection=self.convection,
            diffusion=self.diffusion,
            peclet=self.peclet(mu),
            robin=self.robin_data,
            robin_coeff=self.robin_coeff,
            robin_marker=BoundaryMarker.INNER,
            dirichlet_markers=dirichlet_markers,
        )

    def build_mesh(self, N: int) -> Mesh:
        if self.name == "annulus":
            return build_annulus_mesh(N, self.n_t_of(N), 0.25, 1.0)
        if self.dim == 1:
            (a, b), = self.domain
            return build_interval_mesh(N, a, b)
        (x0, x1), (y0, y1) = self.domain
        return build_square_mesh(N, x0, x1, y0, y1)

    def inside(self, x: np.ndarray) -> np.ndarray:
        """Strict-interior mask used by rejection sampling."""
        x = np.atleast_2d(x)
        if self.name == "annulus":
            r = np.linalg.norm(x, axis=1)
            return (r > 0.25) & (r < 1.0)
        ok = np.ones(len(x), dtype=bool)
        for j, (lo, hi) in enumerate(self.domain):
            ok &= (x[:, j] > lo) & (x[:, j] < hi)
        return ok


def _lap1d() -> CatalogProblem:
    modes = (2.0 * np.pi, 4.0 * np.pi, 6.0 * np.pi)

    def u_expr(X, mu):
        out = mu[..., 0] * fields.sin(modes[0] * X[0])
        for j in (1, 2):
            out = out + mu[..., j] * fields.sin(modes[j] * X[0])
        return out

    def f_expr(X, mu):
        out = mu[..., 0] * modes[0] ** 2 * fields.sin(modes[0] * X[0])
        for j in (1, 2):
            out = out + mu[..., j] * modes[j] ** 2 * fields.sin(modes[j] * X[0])
        return out

    return CatalogProblem(
        name="lap1d",
        dim=1,
        param_box=np.array([[0.0, 1.0]] * 3),
        mu_1=np.array([0.3, 0.2, 0.1]),
        mu_2=np.array([0.8, 0.5, 0.8]),
        domain=((0.0, 1.0),),
        source=Field(f_expr),
        dirichlet=const_field(0.0),
        solution=Field(u_expr),
        level_set=Field(lambda X, mu: X[0] * (X[0] - 1.0)),
    )


def _ell1d() -> CatalogProblem:
    def u_expr(X, mu):
        r, pe = mu[..., 0], mu[..., 1]
        scale = 1.0 / (np.exp(pe) - 1.0)
        return (X[0] - (fields.exp(X[0] * pe) - 1.0) * scale) * r

    return CatalogProblem(
        name="ell1d",
        dim=1,
        param_box=np.array([[1.0, 2.0], [10.0, 100.0]]),
        mu_1=np.array([1.2, 40.0]),
        mu_2=np.array([1.5, 90.0]),
        domain=((0.0, 1.0),),
        source=Field(lambda X, mu: mu[..., 0]),
        dirichlet=const_field(0.0),
        solution=Field(u_expr),
        level_set=Field(lambda X, mu: X[0] * (X[0] - 1.0)),
        convection=np.array([1.0]),
        peclet_of=lambda mu: mu[..., 1],
    )


def _lap2d(name: str, kappa: float) -> CatalogProblem:
    def u_expr(X, mu):
        a, b = X[0] - mu[..., 0], X[1] - mu[..., 1]
        gauss = fields.exp((a**2 + b**2) * -0.5)
        return gauss * fields.sin(kappa * X[0]) * fields.sin(kappa * X[1])

    def f_expr(X, mu):
        # -Lap of the solution: Gaussian-times-sine product rule, with
        # d2/dx2 exp(-a^2/2) = (a^2 - 1) exp(-a^2/2)
        a, b = X[0] - mu[..., 0], X[1] - mu[..., 1]
        gauss = fields.exp((a**2 + b**2) * -0.5)
        sx, sy = fields.sin(kappa * X[0]), fields.sin(kappa * X[1])
        cx, cy = fields.cos(kappa * X[0]), fields.cos(kappa * X[1])
        mixed = (a * cx * sy + b * cy * sx) * (2.0 * kappa)
        return gauss * (sx * sy * (2.0 + 2.0 * kappa**2 - a**2 - b**2) + mixed)

    half = 0.5 * np.pi
    return CatalogProblem(
        name=name,
        dim=2,
        param_box=np.array([[-0.5, 0.5], [-0.5, 0.5]]),
        mu_1=np.array([0.05, 0.22]),
        mu_2=np.array([0.1, 0.04]),
        domain=((-half, half), (-half, half)),
        source=Field(f_expr),
        dirichlet=const_field(0.0),
        solution=Field(u_expr),
        level_set=Field(
            lambda X, mu: (X[0] + half) * (X[0] - half) * (X[1] + half) * (X[1] - half)
        ),
    )


def _ell2d() -> CatalogProblem:
    d11 = Field(lambda X, mu: X[0] ** 2 * mu[..., 2] + X[1] ** 2)
    d12 = Field(lambda X, mu: X[0] * X[1] * (mu[..., 2] - 1.0))
    d22 = Field(lambda X, mu: X[0] ** 2 + X[1] ** 2 * mu[..., 2])

    def f_expr(X, mu):
        a, b = X[0] - mu[..., 0], X[1] - mu[..., 1]
        return fields.exp((a**2 + b**2) / (-0.025 * mu[..., 3] ** 2))

    return CatalogProblem(
        name="ell2d",
        dim=2,
        param_box=np.array([[0.4, 0.6], [0.4, 0.6], [0.01, 1.0], [0.1, 0.8]]),
        mu_1=np.array([0.51, 0.54, 0.52, 0.55]),
        mu_2=np.array([0.48, 0.53, 0.41, 0.89]),
        domain=((0.0, 1.0), (0.0, 1.0)),
        source=Field(f_expr),
        dirichlet=const_field(0.0),
        solution=None,
        level_set=Field(
            lambda X, mu: X[0] * (X[0] - 1.0) * X[1] * (X[1] - 1.0)
        ),
        diffusion=[[d11, d12], [d12, d22]],
    )


def _annulus() -> CatalogProblem:
    def u_expr(X, mu):
        r = fields.sqrt(X[0] ** 2 + X[1] ** 2)
        return 1.0 - fields.log(r * mu[..., 0]) * (1.0 / LN4)

    def robin_expr(X, mu):
        # du/dn + u with outward normal -r_hat; smooth in r, exact on r=1/4
        r = fields.sqrt(X[0] ** 2 + X[1] ** 2)
        return u_expr(X, mu) + (1.0 / LN4) / r

    u = Field(u_expr)
    return CatalogProblem(
        name="annulus",
        dim=2,
        param_box=np.array([[2.4, 2.6]]),
        mu_1=np.array([2.51]),
        mu_2=np.array([2.54]),
        domain=((-1.0, 1.0), (-1.0, 1.0)),
        source=const_field(0.0),
        # boundary data re-derived from the solution on the polygonal
        # boundary, so the exact solution solves the discrete-geometry problem
        dirichlet=u,
        solution=u,
        level_set=Field(lambda X, mu: fields.sqrt(X[0] ** 2 + X[1] ** 2) - 0.25),
        level_set_outer=Field(
            lambda X, mu: 1.0 - fields.sqrt(X[0] ** 2 + X[1] ** 2)
        ),
        robin_data=SolutionRobinData(u, alpha=1.0, peclet=1.0),
        robin_coeff=1.0,
        robin_field=Field(robin_expr),
        # keep radial and angular spacing comparable under refinement
        n_t_of=lambda N: 8 * (N - 1),
    )


_FACTORIES = {
    "lap1d": _lap1d,
    "ell1d": _ell1d,
    "lap2d_low": lambda: _lap2d("lap2d_low", 2.0),
    "lap2d_high": lambda: _lap2d("lap2d_high", 8.0),
    "ell2d": _ell2d,
    "annulus": _annulus,
}

PROBLEM_IDS = tuple(_FACTORIES)


def get_problem(name: str) -> CatalogProblem:
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ConfigError(
            f"unknown problem {name!r}; available: {', '.join(PROBLEM_IDS)}"
        ) from None
    return factory()
