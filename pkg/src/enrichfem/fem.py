"""Continuous Lagrange P1-P3 finite elements on the structured meshes.

Covers quadrature (Gauss on segments, Duffy-collapsed tensor Gauss on
triangles), space construction with the Kronecker dof layout, assembly of

    a(u, v) = (1/Pe) int D grad u . grad v + int R u v + int v C . grad u
              [+ alpha int_G u v on the Robin-marked boundary]
    l(v)    = int f v [+ int_G g_R v]

symmetrized essential-dof elimination, direct sparse solve with a residual
check, Lagrange interpolation, error norms, and point evaluation of discrete
fields on the generator-structured meshes.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CoefficientError, SolverError
from .fields import Field
from .mesh import BoundaryMarker, Mesh

__all__ = [
    "QuadratureRule",
    "quadrature",
    "ReferenceElement",
    "reference_element",
    "LagrangeSpace",
    "ProblemCoefficients",
    "RobinData",
    "SolutionRobinData",
    "ShiftedRobinData",
    "DiscreteField",
    "assemble_bilinear",
    "assemble_linear",
    "apply_dirichlet",
    "solve_linear",
    "interpolate",
    "error_norms",
    "norms_from_samples",
]


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Reference-element rule: points (nq, dim), weights (nq,), exactness degree."""

    points: np.ndarray
    weights: np.ndarray
    degree: int


def _gauss01(n: int):
    """n-point Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@functools.lru_cache(maxsize=None)
def quadrature(dim: int, degree: int) -> QuadratureRule:
    """Rule integrating polynomials of total degree <= `degree` exactly.

    dim 1: Gauss-Legendre on the unit segment.
    dim 2: tensor Gauss collapsed onto the unit triangle by the Duffy map
           (x, y) = (s (1 - t), t) with weight (1 - t); the map raises the
           t-degree by one, hence the extra point per axis.
    """
    degree = max(int(degree), 1)
    if dim == 1:
        n = (degree + 2) // 2
        x, w = _gauss01(n)
        return QuadratureRule(x.reshape(-1, 1), w, degree)
    if dim == 2:
        n = (degree + 3) // 2
        s, ws = _gauss01(n)
        t, wt = _gauss01(n)
        S, T = np.meshgrid(s, t, indexing="ij")
        WS, WT = np.meshgrid(ws, wt, indexing="ij")
        pts = np.stack([(S * (1.0 - T)).ravel(), T.ravel()], axis=1)
        w = (WS * WT * (1.0 - T)).ravel()
        return QuadratureRule(pts, w, degree)
    raise ValueError(f"unsupported dimension {dim}")


# ---------------------------------------------------------------------------
# reference Lagrange elements


def _monomial_exponents(dim: int, k: int):
    if dim == 1:
        return [(i,) for i in range(k + 1)]
    return [(i, j) for tot in range(k + 1) for i in range(tot, -1, -1) for j in [tot - i]]


def _reference_nodes(dim: int, k: int) -> np.ndarray:
    """Dof layout: vertices, then per-edge nodes (in edge direction), then interior."""
    if dim == 1:
        return np.array([[0.0], [1.0]] + [[i / k] for i in range(1, k)])
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    nodes = [verts]
    for a, b in ((0, 1), (1, 2), (0, 2)):
        for i in range(1, k):
            t = i / k
            nodes.append(((1 - t) * verts[a] + t * verts[b])[None, :])
    interior = [
        np.array([[i / k, j / k]])
        for i in range(1, k)
        for j in range(1, k - i)
    ]
    return np.concatenate(nodes + interior, axis=0)


class ReferenceElement:
    """Lagrange basis on the reference simplex, via monomial coefficients."""

    def __init__(self, dim: int, k: int):
        # degrees beyond the FE space cap serve broken source interpolation
        if not 1 <= k <= 10:
            raise ValueError(f"degree {k} not supported (1..10)")
        self.dim = dim
        self.k = k
        self.nodes = _reference_nodes(dim, k)
        self.exponents = _monomial_exponents(dim, k)
        V = self._monomial_values(self.nodes)
        self.n_basis = len(self.nodes)
        if V.shape[0] != V.shape[1]:
            raise AssertionError("node/monomial count mismatch")
        self.coeffs = np.linalg.inv(V)

    def _monomial_values(self, pts: np.ndarray) -> np.ndarray:
        cols = []
        for e in self.exponents:
            v = np.ones(len(pts))
            for j, p in enumerate(e):
                v = v * pts[:, j] ** p
            cols.append(v)
        return np.stack(cols, axis=1)

    def _monomial_grads(self, pts: np.ndarray) -> np.ndarray:
        n = len(pts)
        out = np.zeros((n, len(self.exponents), self.dim))
        for m, e in enumerate(self.exponents):
            for j in range(self.dim):
                if e[j] == 0:
                    continue
                v = np.full(n, float(e[j]))
                for jj, p in enumerate(e):
                    pw = p - 1 if jj == j else p
                    v = v * pts[:, jj] ** pw
                out[:, m, j] = v
        return out

    def tabulate(self, pts: np.ndarray):
        """Basis values (n, nb) and reference gradients (n, nb, dim) at pts."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals = self._monomial_values(pts) @ self.coeffs
        grads = np.einsum("nmd,mb->nbd", self._monomial_grads(pts), self.coeffs)
        return vals, grads


@functools.lru_cache(maxsize=None)
def reference_element(dim: int, k: int) -> ReferenceElement:
    return ReferenceElement(dim, k)


# ---------------------------------------------------------------------------
# function space


class LagrangeSpace:
    """Continuous Lagrange space of degree k on a simplicial mesh.

    Attributes
    ----------
    dof_coords : (n_dofs, dim) coordinates of the Lagrange nodes
    cell_dofs : (n_cells, n_loc) global dof indices per cell
    boundary_dofs : dict BoundaryMarker -> sorted dof index array
    """

    def __init__(self, mesh: Mesh, k: int):
        if k not in (1, 2, 3):
            raise ValueError(f"element degree {k} not supported (P1-P3)")
        self.mesh = mesh
        self.k = int(k)
        self.element = reference_element(mesh.dim, self.k)
        self._build_dofs()
        self._geometry()
        self._quad_cache = {}

    # -- dof layout --------------------------------------------------------

    def _build_dofs(self):
        mesh, k = self.mesh, self.k
        n_nodes = mesh.n_nodes
        coords = [mesh.nodes]
        if mesh.dim == 1:
            n_loc = k + 1
            cd = np.empty((mesh.n_cells, n_loc), dtype=np.int64)
            cd[:, 0] = mesh.cells[:, 0]
            cd[:, 1] = mesh.cells[:, 1]
            for i in range(1, k):
                cd[:, 1 + i] = n_nodes + np.arange(mesh.n_cells) * (k - 1) + (i - 1)
            if k > 1:
                t = np.arange(1, k) / k
                a = mesh.nodes[mesh.cells[:, 0]]
                b = mesh.nodes[mesh.cells[:, 1]]
                pts = a[:, None, :] * (1 - t)[None, :, None] + b[:, None, :] * t[None, :, None]
                coords.append(pts.reshape(-1, 1))
            self.cell_dofs = cd
            self.dof_coords = np.concatenate(coords, axis=0)
            self.boundary_dofs = {}
            for f, m in zip(mesh.facets, mesh.facet_markers):
                self.boundary_dofs.setdefault(m, []).append(int(f[0]))
            self.boundary_dofs = {
                m: np.array(sorted(v)) for m, v in self.boundary_dofs.items()
            }
            self.n_dofs = self.dof_coords.shape[0]
            return

        # dim == 2: vertex dofs, then (k-1) dofs per unique edge, then interior
        edges_all = np.sort(
            np.concatenate(
                [mesh.cells[:, [0, 1]], mesh.cells[:, [1, 2]], mesh.cells[:, [0, 2]]]
            ),
            axis=1,
        )
        edges, inverse = np.unique(edges_all, axis=0, return_inverse=True)
        inverse = inverse.ravel()  # numpy 2.0 returns shape (n, 1) here
        n_edges = len(edges)
        self._edges = edges
        # local edge e of cell c is global edge inverse[e * n_cells + c]
        edge_of = inverse.reshape(3, mesh.n_cells)

        n_loc = (k + 1) * (k + 2) // 2
        cd = np.empty((mesh.n_cells, n_loc), dtype=np.int64)
        cd[:, :3] = mesh.cells
        if k > 1:
            t = np.arange(1, k) / k
            epts = (
                mesh.nodes[edges[:, 0], None, :] * (1 - t)[None, :, None]
                + mesh.nodes[edges[:, 1], None, :] * t[None, :, None]
            )
            coords.append(epts.reshape(-1, 2))
            for le, (la, lb) in enumerate(((0, 1), (1, 2), (0, 2))):
                ge = edge_of[le]
                base = n_nodes + ge * (k - 1)
                ascending = mesh.cells[:, la] < mesh.cells[:, lb]
                for i in range(1, k):
                    fwd = base + (i - 1)
                    rev = base + (k - i - 1)
                    cd[:, 3 + le * (k - 1) + (i - 1)] = np.where(ascending, fwd, rev)
        n_interior = n_loc - 3 - 3 * (k - 1)
        if n_interior:
            base = n_nodes + n_edges * (k - 1)
            for i in range(n_interior):
                cd[:, 3 + 3 * (k - 1) + i] = base + np.arange(mesh.n_cells) * n_interior + i
            ref_int = self.element.nodes[3 + 3 * (k - 1) :]
            p = mesh.nodes[mesh.cells]  # (c, 3, 2)
            lam = np.concatenate(
                [1 - ref_int.sum(axis=1, keepdims=True), ref_int], axis=1
            )  # barycentric (n_int, 3)
            ipts = np.einsum("ib,cbd->cid", lam, p)
            coords.append(ipts.reshape(-1, 2))
        self.cell_dofs = cd
        self.dof_coords = np.concatenate(coords, axis=0)
        self.n_dofs = self.dof_coords.shape[0]

        edge_lookup = {tuple(e): i for i, e in enumerate(edges)}
        bdofs = {}
        for f, m in zip(mesh.facets, mesh.facet_markers):
            s = bdofs.setdefault(m, set())
            s.update(int(v) for v in f)
            if k > 1:
                ge = edge_lookup[tuple(sorted(map(int, f)))]
                s.update(range(n_nodes + ge * (k - 1), n_nodes + (ge + 1) * (k - 1)))
        self.boundary_dofs = {m: np.array(sorted(v)) for m, v in bdofs.items()}

    # -- geometry ------------------------------------------------------------

    def _geometry(self):
        mesh = self.mesh
        p = mesh.nodes[mesh.cells]
        self.cell_origin = p[:, 0]
        if mesh.dim == 1:
            J = (p[:, 1] - p[:, 0]).reshape(-1, 1, 1)
        else:
            J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self.J = J
        self.detJ = np.linalg.det(J)
        if np.any(self.detJ <= 0):
            raise ValueError("non-positive cell Jacobian")
        self.Jinv = np.linalg.inv(J)

    def all_boundary_dofs(self, markers) -> np.ndarray:
        out = [self.boundary_dofs.get(m, np.empty(0, dtype=np.int64)) for m in markers]
        if not out:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(out)).astype(np.int64)

    def quad_data(self, degree: int) -> "QuadData":
        degree = int(degree)
        if degree not in self._quad_cache:
            self._quad_cache[degree] = QuadData(self, quadrature(self.mesh.dim, degree))
        return self._quad_cache[degree]


class QuadData:
    """Tabulated quadrature over every cell of a space.

    points (c, nq, d), wdet (c, nq), phi (nq, nb), grad_phys (c, nq, nb, d).
    """

    def __init__(self, space: LagrangeSpace, rule: QuadratureRule):
        self.space = space
        self.rule = rule
        phi, dphi = space.element.tabulate(rule.points)
        self.phi = phi
        self.points = space.cell_origin[:, None, :] + np.einsum(
            "cde,qe->cqd", space.J, rule.points
        )
        self.wdet = rule.weights[None, :] * space.detJ[:, None]
        self.grad_phys = np.einsum("ced,qbe->cqbd", space.Jinv, dphi)

    @property
    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1, self.space.mesh.dim)


# ---------------------------------------------------------------------------
# coefficients


class RobinData:
    """Robin boundary datum evaluated at facet quadrature points.

    The base class wraps a plain Field and ignores the facet normals;
    subclasses may use them (the datum on a polygonal boundary generally
    depends on the discrete normal).
    """

    def __init__(self, field: Field):
        self._field = field

    def at(self, x: np.ndarray, normals: np.ndarray, mu) -> np.ndarray:
        return self._field(x, mu)


class SolutionRobinData(RobinData):
    """Datum grad u . n / Pe + alpha u recomputed from a known solution.

    Evaluating on the discrete boundary (with its normals) makes the exact
    solution satisfy the Robin condition of the polygonal problem, removing
    the geometric consistency error.  Identity diffusion only.
    """

    def __init__(self, solution: Field, alpha: float = 1.0, peclet: float = 1.0):
        self._solution = solution
        self._alpha = alpha
        self._peclet = peclet

    def at(self, x, normals, mu):
        tv = self._solution.taylor(x, mu, 1)
        return (
            np.einsum("nd,nd->n", tv.grad, normals) / self._peclet
            + self._alpha * tv.val
        )


class ShiftedRobinData(RobinData):
    """Existing datum plus a constant (the lifted problem shifts g_R)."""

    def __init__(self, base: RobinData, shift: float):
        self._base = base
        self._shift = float(shift)

    def at(self, x, normals, mu):
        return self._base.at(x, normals, mu) + self._shift


@dataclass
class ProblemCoefficients:
    """Bound coefficient bundle for

        R u + C . grad u - (1/Pe) div(D grad u) = f

    with Dirichlet data g on `dirichlet_markers` and optionally
    (1/Pe) D grad u . n + robin_coeff u = g_R on `robin_marker`.

    Fields evaluate as field(x points, mu); `mu` is the bound parameter
    vector used whenever the assembly evaluates them.  diffusion None means
    the identity matrix; reaction/convection None mean zero.
    """

    source: Field
    dirichlet: Field
    mu: Optional[np.ndarray] = None
    reaction: Optional[Field] = None
    convection: Optional[np.ndarray] = None
    diffusion: Optional[Sequence[Sequence[Field]]] = None
    peclet: float = 1.0
    robin: Optional[RobinData] = None
    robin_coeff: float = 1.0
    robin_marker: BoundaryMarker = BoundaryMarker.INNER
    dirichlet_markers: tuple = (BoundaryMarker.ALL,)

    def __post_init__(self):
        if self.peclet <= 0:
            raise CoefficientError(f"Peclet must be positive, got {self.peclet}")
        if isinstance(self.robin, Field):
            self.robin = RobinData(self.robin)

    def diffusion_at(self, x: np.ndarray, order: int = 0):
        """D at points as TaylorValues (list of lists), or None for identity."""
        if self.diffusion is None:
            return None
        return [
            [f.taylor(x, self.mu, order) for f in row] for row in self.diffusion
        ]


def _diffusion_values(coeffs: ProblemCoefficients, pts: np.ndarray) -> Optional[np.ndarray]:
    """D as (n, d, d) array with an SPD check at every point."""
    tv = coeffs.diffusion_at(pts, 0)
    if tv is None:
        return None
    d = len(tv)
    D = np.empty((pts.shape[0], d, d))
    for a in range(d):
        for b in range(d):
            D[:, a, b] = tv[a][b].val
    if np.max(np.abs(D - D.transpose(0, 2, 1))) > 1e-12:
        raise CoefficientError("diffusion matrix not symmetric")
    if d == 1:
        bad = D[:, 0, 0] <= 0
    else:
        bad = (D[:, 0, 0] <= 0) | (np.linalg.det(D) <= 0)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise CoefficientError(f"diffusion not SPD at point {pts[i]}")
    return D


# ---------------------------------------------------------------------------
# assembly


def _scatter_matrix(space: LagrangeSpace, local: np.ndarray) -> sp.csr_matrix:
    nb = space.cell_dofs.shape[1]
    rows = np.repeat(space.cell_dofs, nb, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, nb)).ravel()
    A = sp.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs)
    )
    return A.tocsr()


def assemble_bilinear(
    space: LagrangeSpace, coeffs: ProblemCoefficients, quad_degree: Optional[int] = None
) -> sp.csr_matrix:
    """Stiffness + reaction + convection (+ Robin surface) matrix."""
    qd = space.quad_data(quad_degree if quad_degree is not None else 2 * space.k)
    pts = qd.flat_points
    c, nq = qd.wdet.shape
    g = qd.grad_phys

    D = _diffusion_values(coeffs, pts)
    if D is None:
        local = np.einsum("cq,cqid,cqjd->cij", qd.wdet / coeffs.peclet, g, g)
    else:
        D = D.reshape(c, nq, space.mesh.dim, space.mesh.dim)
        local = np.einsum(
            "cq,cqid,cqde,cqje->cij", qd.wdet / coeffs.peclet, g, D, g, optimize=True
        )
    if coeffs.reaction is not None:
        R = coeffs.reaction(pts, coeffs.mu).reshape(c, nq)
        local += np.einsum("cq,qi,qj->cij", qd.wdet * R, qd.phi, qd.phi)
    if coeffs.convection is not None:
        Cg = np.einsum("cqjd,d->cqj", g, np.asarray(coeffs.convection, dtype=float))
        local += np.einsum("cq,qi,cqj->cij", qd.wdet, qd.phi, Cg)
    A = _scatter_matrix(space, local)

    if coeffs.robin is not None and space.mesh.dim == 2:
        fq = facet_quadrature(space, coeffs.robin_marker, 2 * space.k)
        if fq is not None:
            local = np.einsum(
                "fq,fqi,fqj->fij", fq.weights * coeffs.robin_coeff, fq.phi, fq.phi
            )
            nb = fq.facet_dofs.shape[1]
            rows = np.repeat(fq.facet_dofs, nb, axis=1).ravel()
            cols = np.tile(fq.facet_dofs, (1, nb)).ravel()
            A = A + sp.coo_matrix(
                (local.ravel(), (rows, cols)), shape=(space.n_dofs, space.n_dofs)
            ).tocsr()
    return A


def assemble_linear(
    space: LagrangeSpace, coeffs: ProblemCoefficients, quad_degree: Optional[int] = None
) -> np.ndarray:
    """Load vector int f v (+ Robin surface data)."""
    qd = space.quad_data(quad_degree if quad_degree is not None else 2 * space.k)
    fv = coeffs.source(qd.flat_points, coeffs.mu).reshape(qd.wdet.shape)
    b = rhs_from_quad_values(space, qd, fv)
    if coeffs.robin is not None and space.mesh.dim == 2:
        fq = facet_quadrature(space, coeffs.robin_marker, 2 * space.k + 2)
        if fq is not None:
            nq = fq.weights.shape[1]
            gv = coeffs.robin.at(
                fq.points.reshape(-1, 2),
                np.repeat(fq.normals, nq, axis=0),
                coeffs.mu,
            ).reshape(fq.weights.shape)
            b += facet_rhs(space, fq, gv)
    return b


def rhs_from_quad_values(
    space: LagrangeSpace, qd: QuadData, values: np.ndarray
) -> np.ndarray:
    """int v phi_i with v given by its values at the quadrature points."""
    local = np.einsum("cq,qi->ci", qd.wdet * values, qd.phi)
    b = np.zeros(space.n_dofs)
    np.add.at(b, space.cell_dofs.ravel(), local.ravel())
    return b


def facet_rhs(space: LagrangeSpace, fq: "FacetQuad", values: np.ndarray) -> np.ndarray:
    local = np.einsum("fq,fqi->fi", fq.weights * values, fq.phi)
    b = np.zeros(space.n_dofs)
    np.add.at(b, fq.facet_dofs.ravel(), local.ravel())
    return b


class FacetQuad:
    """Quadrature over the facets carrying one marker (2D).

    points (f, nq, 2), weights (f, nq) including facet length, phi
    (f, nq, nb) basis of the owning cell, facet_dofs (f, nb), normals (f, 2)
    outward unit normals.
    """

    def __init__(self, space, facet_cells, local_edges, degree):
        mesh = space.mesh
        rule = quadrature(1, degree)
        t = rule.points[:, 0]
        ref_edges = {
            0: np.stack([t, np.zeros_like(t)], axis=1),
            1: np.stack([1.0 - t, t], axis=1),
            2: np.stack([np.zeros_like(t), t], axis=1),
        }
        n_f = len(facet_cells)
        nq = len(t)
        nb = space.element.n_basis
        self.points = np.empty((n_f, nq, 2))
        self.weights = np.empty((n_f, nq))
        self.phi = np.empty((n_f, nq, nb))
        self.facet_dofs = space.cell_dofs[facet_cells]
        self.normals = np.empty((n_f, 2))
        edge_locals = ((0, 1), (1, 2), (0, 2))
        for i, (cell, le) in enumerate(zip(facet_cells, local_edges)):
            xi = ref_edges[le]
            phi, _ = space.element.tabulate(xi)
            self.phi[i] = phi
            p0 = space.cell_origin[cell]
            self.points[i] = p0 + xi @ space.J[cell].T
            la, lb = edge_locals[le]
            va = mesh.nodes[mesh.cells[cell, la]]
            vb = mesh.nodes[mesh.cells[cell, lb]]
            edge = vb - va
            length = np.linalg.norm(edge)
            self.weights[i] = rule.weights * length
            n = np.array([edge[1], -edge[0]]) / length
            centroid = mesh.nodes[mesh.cells[cell]].mean(axis=0)
            if np.dot(n, 0.5 * (va + vb) - centroid) < 0:
                n = -n
            self.normals[i] = n


def facet_quadrature(
    space: LagrangeSpace, marker: BoundaryMarker, degree: int
) -> Optional[FacetQuad]:
    """FacetQuad for all facets with `marker`, or None if there are none."""
    mesh = space.mesh
    if mesh.dim != 2:
        raise ValueError("facet quadrature only available on 2D meshes")
    key = ("facet", marker, degree)
    if key in space._quad_cache:
        return space._quad_cache[key]
    pair_to_cell = {}
    local_pairs = ((0, 1), (1, 2), (0, 2))
    for c, cell in enumerate(mesh.cells):
        for le, (a, b) in enumerate(local_pairs):
            key2 = (min(cell[a], cell[b]), max(cell[a], cell[b]))
            pair_to_cell.setdefault(key2, (c, le))
    cells, locals_ = [], []
    for f, m in zip(mesh.facets, mesh.facet_markers):
        if m != marker:
            continue
        c, le = pair_to_cell[(min(f), max(f))]
        cells.append(c)
        locals_.append(le)
    out = FacetQuad(space, np.array(cells, dtype=int), locals_, degree) if cells else None
    space._quad_cache[key] = out
    return out


# ---------------------------------------------------------------------------
# boundary conditions and solve


def apply_dirichlet(
    A: sp.csr_matrix,
    b: np.ndarray,
    space: LagrangeSpace,
    values: Callable[[np.ndarray], np.ndarray],
    markers=(BoundaryMarker.ALL,),
):
    """Eliminate essential dofs, preserving equivalence.

    Constrained rows/columns are zeroed, the couplings are moved to the rhs,
    and identity rows with the boundary values are installed.  Returns the
    modified (A, b); inputs are not mutated.
    """
    bc = space.all_boundary_dofs(markers)
    if bc.size == 0:
        return A.copy(), b.copy()
    g = np.asarray(values(space.dof_coords[bc]), dtype=float)
    xg = np.zeros(space.n_dofs)
    xg[bc] = g
    b2 = b - A @ xg
    keep = np.ones(space.n_dofs)
    keep[bc] = 0.0
    P = sp.diags(keep)
    A2 = (P @ A @ P + sp.diags(1.0 - keep)).tocsr()
    b2[bc] = g
    return A2, b2


def solve_linear(A: sp.csr_matrix, b: np.ndarray) -> np.ndarray:
    """Direct sparse solve with a relative-residual check at 1e-10."""
    x = spla.spsolve(A.tocsc(), b)
    if not np.all(np.isfinite(x)):
        raise SolverError("solver produced non-finite values (singular system?)")
    scale = max(float(np.linalg.norm(b)), 1e-30)
    res = float(np.linalg.norm(A @ x - b)) / scale
    if res > 1e-10:
        raise SolverError(f"relative residual {res:.3e} exceeds 1e-10")
    return x


# ---------------------------------------------------------------------------
# discrete fields, interpolation, norms


@dataclass
class DiscreteField:
    """Coefficient vector over a Lagrange space."""

    space: LagrangeSpace
    coeffs: np.ndarray

    def locate(self, pts: np.ndarray) -> np.ndarray:
        return locate_cells(self.space.mesh, pts)

    def eval_at(self, pts: np.ndarray, cells: Optional[np.ndarray] = None):
        """Values at arbitrary points of a generator-structured mesh."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if cells is None:
            cells = self.locate(pts)
        space = self.space
        xi = np.einsum(
            "ned,nd->ne", space.Jinv[cells], pts - space.cell_origin[cells]
        )
        vals, _ = space.element.tabulate(xi)
        return np.einsum("nb,nb->n", vals, self.coeffs[space.cell_dofs[cells]])

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return self.eval_at(pts)


def locate_cells(mesh: Mesh, pts: np.ndarray) -> np.ndarray:
    """Cell index containing each point, using the generator structure."""
    if mesh.structure is None:
        raise ValueError("point location requires a generator-structured mesh")
    kind = mesh.structure[0]
    pts = np.atleast_2d(pts)
    if kind == "interval":
        _, a, b, N = mesh.structure
        ix = ((pts[:, 0] - a) / (b - a) * (N - 1)).astype(int)
        return np.clip(ix, 0, N - 2)
    if kind == "square":
        _, x0, x1, y0, y1, N = mesh.structure
        fx = (pts[:, 0] - x0) / (x1 - x0) * (N - 1)
        fy = (pts[:, 1] - y0) / (y1 - y0) * (N - 1)
        ix = np.clip(fx.astype(int), 0, N - 2)
        iy = np.clip(fy.astype(int), 0, N - 2)
        lx, ly = fx - ix, fy - iy
        upper = ly > lx  # quads split along the lower-left/upper-right diagonal
        return 2 * (iy * (N - 1) + ix) + upper.astype(int)
    if kind == "annulus":
        _, n_r, n_t, r_in, r_out = mesh.structure
        return _locate_annulus(mesh, pts, n_r, n_t, r_in, r_out)
    raise ValueError(f"unknown mesh structure {kind!r}")


def _locate_annulus(mesh, pts, n_r, n_t, r_in, r_out):
    r = np.linalg.norm(pts, axis=1)
    th = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * np.pi)
    ir0 = np.clip(((r - r_in) / (r_out - r_in) * (n_r - 1)).astype(int), 0, n_r - 2)
    it = np.clip((th / (2 * np.pi) * n_t).astype(int), 0, n_t - 1)
    p = mesh.nodes[mesh.cells]
    v1 = p[:, 1] - p[:, 0]
    v2 = p[:, 2] - p[:, 0]
    det = v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0]
    best = np.full(len(pts), -1, dtype=int)
    best_q = np.full(len(pts), -np.inf)
    # chords make radial bins fuzzy; try the nominal ring and its neighbours
    for dr in (0, -1, 1):
        ir = np.clip(ir0 + dr, 0, n_r - 2)
        for tri in (0, 1):
            c = (ir * n_t + it) * 2 + tri
            d = pts - p[c, 0]
            l1 = (d[:, 0] * v2[c, 1] - d[:, 1] * v2[c, 0]) / det[c]
            l2 = (v1[c, 0] * d[:, 1] - v1[c, 1] * d[:, 0]) / det[c]
            q = np.minimum(np.minimum(l1, l2), 1.0 - l1 - l2)
            take = q > best_q
            best[take] = c[take]
            best_q[take] = q[take]
    return best


def interpolate(space: LagrangeSpace, fn) -> DiscreteField:
    """Lagrange interpolation: coefficients are values at the dof coordinates.

    `fn` is a callable over points; a Field must be bound first
    (lambda x: field(x, mu)).
    """
    return DiscreteField(space, np.asarray(fn(space.dof_coords), dtype=float))


def field_on_quad(space: LagrangeSpace, coeffs: np.ndarray, qd: QuadData):
    """Discrete values and gradients at every quadrature point."""
    cv = coeffs[space.cell_dofs]
    vals = np.einsum("qb,cb->cq", qd.phi, cv)
    grads = np.einsum("cqbd,cb->cqd", qd.grad_phys, cv)
    return vals, grads


def norms_from_samples(wdet, dv, dg, rv, rg):
    """(L2 err, H1-semi err, L2 ref, H1-semi ref) from quadrature samples."""
    l2e = np.sum(wdet * (dv - rv) ** 2)
    h1e = np.sum(wdet * np.sum((dg - rg) ** 2, axis=-1))
    l2r = np.sum(wdet * rv**2)
    h1r = np.sum(wdet * np.sum(rg**2, axis=-1))
    return tuple(float(np.sqrt(v)) for v in (l2e, h1e, l2r, h1r))


def error_norms(
    discrete: DiscreteField,
    reference: Field,
    mu=None,
    quad_degree: Optional[int] = None,
):
    """L2 and H1-semi errors against a reference field, plus reference norms."""
    space = discrete.space
    qd = space.quad_data(
        quad_degree if quad_degree is not None else 2 * space.k + 2
    )
    dv, dg = field_on_quad(space, discrete.coeffs, qd)
    tv = reference.taylor(qd.flat_points, mu, 1)
    rv = tv.val.reshape(dv.shape)
    rg = tv.grad.reshape(dg.shape)
    return norms_from_samples(qd.wdet, dv, dg, rv, rg)
