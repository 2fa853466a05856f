"""Finite element core: quadrature exactness, assembly oracles, solves.

Hand-computed reference values follow from the standard P1 element matrices
on uniform meshes; each oracle states its derivation next to the assertion.
"""

import math

import numpy as np
import pytest

from enrichfem.errors import CoefficientError, SolverError
from enrichfem.fem import (
    DiscreteField,
    LagrangeSpace,
    ProblemCoefficients,
    apply_dirichlet,
    assemble_bilinear,
    assemble_linear,
    error_norms,
    facet_quadrature,
    field_on_quad,
    interpolate,
    quadrature,
    reference_element,
    solve_linear,
)
from enrichfem import fields
from enrichfem.fields import Field, const_field
from enrichfem.mesh import (
    BoundaryMarker,
    build_annulus_mesh,
    build_interval_mesh,
    build_square_mesh,
)


def tri_monomial_integral(i, j):
    # int_T x^i y^j over the unit triangle = i! j! / (i + j + 2)!
    return math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)


class TestQuadrature:
    def test_segment_weights_sum_to_length(self):
        for deg in range(1, 9):
            rule = quadrature(1, deg)
            assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)

    def test_segment_monomial_exactness(self):
        for deg in range(1, 9):
            rule = quadrature(1, deg)
            for p in range(deg + 1):
                got = np.sum(rule.weights * rule.points[:, 0] ** p)
                assert got == pytest.approx(1.0 / (p + 1), rel=1e-13), (deg, p)

    def test_triangle_weights_sum_to_area(self):
        for deg in range(1, 9):
            rule = quadrature(2, deg)
            assert rule.weights.sum() == pytest.approx(0.5, abs=1e-14)

    def test_triangle_monomial_exactness(self):
        for deg in range(1, 9):
            rule = quadrature(2, deg)
            x, y, w = rule.points[:, 0], rule.points[:, 1], rule.weights
            for i in range(deg + 1):
                for j in range(deg + 1 - i):
                    got = np.sum(w * x**i * y**j)
                    assert got == pytest.approx(
                        tri_monomial_integral(i, j), rel=1e-12
                    ), (deg, i, j)

    def test_triangle_points_strictly_interior(self):
        rule = quadrature(2, 6)
        x, y = rule.points[:, 0], rule.points[:, 1]
        assert np.all(x > 0) and np.all(y > 0) and np.all(x + y < 1)
        assert np.all(rule.weights > 0)


class TestReferenceElement:
    @pytest.mark.parametrize("dim", [1, 2])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_kronecker_property(self, dim, k):
        el = reference_element(dim, k)
        vals, _ = el.tabulate(el.nodes)
        assert np.allclose(vals, np.eye(el.n_basis), atol=1e-12)

    @pytest.mark.parametrize("dim", [1, 2])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_partition_of_unity(self, dim, k):
        el = reference_element(dim, k)
        rng = np.random.default_rng(0)
        pts = rng.random((20, dim))
        if dim == 2:
            pts[:, 1] *= 1 - pts[:, 0]
        vals, grads = el.tabulate(pts)
        assert np.allclose(vals.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(grads.sum(axis=1), 0.0, atol=1e-11)

    def test_high_degree_partition_of_unity(self):
        # degrees above the FE-space cap serve broken source interpolation
        for dim in (1, 2):
            elem = reference_element(dim, 7)
            pts = np.full((4, dim), 0.21)
            vals, _ = elem.tabulate(pts)
            assert np.allclose(vals.sum(axis=1), 1.0, atol=1e-9)

    def test_rejects_degree_beyond_interpolation_cap(self):
        with pytest.raises(ValueError):
            reference_element(1, 11)

    def test_space_rejects_degree_4(self):
        with pytest.raises(ValueError):
            LagrangeSpace(build_interval_mesh(5), 4)


class TestSpace:
    def test_p1_dof_count_matches_nodes(self):
        mesh = build_square_mesh(5)
        V = LagrangeSpace(mesh, 1)
        assert V.n_dofs == mesh.n_nodes
        assert np.array_equal(V.dof_coords, mesh.nodes)

    def test_p2_dof_count_square(self):
        # N=3: 9 vertices + 16 unique edges = 25 dofs
        V = LagrangeSpace(build_square_mesh(3), 2)
        assert V.n_dofs == 25

    def test_p3_dof_count_square(self):
        # N=3: 9 vertices + 2*16 edge dofs + 8 cell interiors = 49
        V = LagrangeSpace(build_square_mesh(3), 3)
        assert V.n_dofs == 49

    @pytest.mark.parametrize("k", [2, 3])
    def test_shared_edge_dofs_consistent(self, k):
        # interpolation of a smooth function is single-valued across cells:
        # evaluating at shared-edge dof coordinates from either cell agrees
        mesh = build_square_mesh(4)
        V = LagrangeSpace(mesh, k)
        f = lambda x: np.sin(x[:, 0]) + x[:, 1] ** 2
        u = interpolate(V, f)
        vals, _ = V.element.tabulate(V.element.nodes)
        for c in range(mesh.n_cells):
            pts = V.dof_coords[V.cell_dofs[c]]
            assert np.allclose(u.coeffs[V.cell_dofs[c]], f(pts), atol=1e-13)

    def test_boundary_dofs_interval(self):
        V = LagrangeSpace(build_interval_mesh(5), 2)
        bd = V.all_boundary_dofs([BoundaryMarker.ALL])
        assert np.array_equal(np.sort(V.dof_coords[bd, 0]), [0.0, 1.0])

    def test_boundary_dofs_square_p2(self):
        V = LagrangeSpace(build_square_mesh(3), 2)
        bd = V.all_boundary_dofs([BoundaryMarker.ALL])
        x = V.dof_coords[bd]
        on_edge = (
            np.isclose(x[:, 0], 0) | np.isclose(x[:, 0], 1)
            | np.isclose(x[:, 1], 0) | np.isclose(x[:, 1], 1)
        )
        assert on_edge.all()
        assert len(bd) == 16  # 8 boundary vertices + 8 boundary edge midpoints


def laplace_coeffs(**kw):
    return ProblemCoefficients(source=const_field(0.0), dirichlet=const_field(0.0), **kw)


class TestAssembly1D:
    def test_stiffness_interior_diagonal(self):
        # P1 on h=1/2: interior diagonal of int u'v' is 1/h + 1/h = 4
        V = LagrangeSpace(build_interval_mesh(3), 1)
        A = assemble_bilinear(V, laplace_coeffs()).toarray()
        expected = np.array([[2, -2, 0], [-2, 4, -2], [0, -2, 2]], dtype=float)
        assert np.allclose(A, expected, atol=1e-13)

    def test_mass_matrix_single_element(self):
        # int u v on one unit cell: h/3 on diagonal, h/6 off
        V = LagrangeSpace(build_interval_mesh(2), 1)
        coeffs = ProblemCoefficients(
            source=const_field(0.0),
            dirichlet=const_field(0.0),
            reaction=const_field(1.0),
            diffusion=[[const_field(1e-30)]],  # suppress the stiffness block
        )
        A = assemble_bilinear(V, coeffs).toarray()
        assert np.allclose(A, [[1 / 3, 1 / 6], [1 / 6, 1 / 3]], atol=1e-12)

    def test_convection_makes_matrix_asymmetric(self):
        V = LagrangeSpace(build_interval_mesh(4), 1)
        A = assemble_bilinear(V, laplace_coeffs(convection=np.array([1.0]))).toarray()
        assert not np.allclose(A, A.T)
        # int v u' on a single cell is [[-1/2, 1/2], [-1/2, 1/2]]
        B = assemble_bilinear(
            LagrangeSpace(build_interval_mesh(2), 1),
            ProblemCoefficients(
                source=const_field(0.0),
                dirichlet=const_field(0.0),
                convection=np.array([1.0]),
                diffusion=[[const_field(1e-30)]],
            ),
        ).toarray()
        assert np.allclose(B, [[-0.5, 0.5], [-0.5, 0.5]], atol=1e-13)

    def test_load_vector_constant_source(self):
        # f = 2, h = 1/2: interior entry 2 * h = 1
        V = LagrangeSpace(build_interval_mesh(3), 1)
        b = assemble_linear(V, ProblemCoefficients(source=const_field(2.0),
                                                   dirichlet=const_field(0.0)))
        assert np.allclose(b, [0.5, 1.0, 0.5], atol=1e-14)

    def test_load_vector_two_nodes(self):
        V = LagrangeSpace(build_interval_mesh(2), 1)
        b = assemble_linear(V, ProblemCoefficients(source=const_field(1.0),
                                                   dirichlet=const_field(0.0)))
        assert np.allclose(b, [0.5, 0.5], atol=1e-14)

    def test_peclet_scales_stiffness(self):
        V = LagrangeSpace(build_interval_mesh(3), 1)
        A1 = assemble_bilinear(V, laplace_coeffs()).toarray()
        A2 = assemble_bilinear(V, laplace_coeffs(peclet=10.0)).toarray()
        assert np.allclose(A2, A1 / 10.0, atol=1e-14)

    def test_nonpositive_peclet_rejected(self):
        with pytest.raises(CoefficientError):
            laplace_coeffs(peclet=0.0)

    def test_non_spd_diffusion_rejected(self):
        V = LagrangeSpace(build_interval_mesh(3), 1)
        with pytest.raises(CoefficientError):
            assemble_bilinear(V, laplace_coeffs(diffusion=[[const_field(-1.0)]]))


class TestAssembly2D:
    def test_laplace_interior_diagonal(self):
        # right-triangle pairs on a uniform square grid give the standard
        # 5-point stencil: interior diagonal 4, edge neighbours -1
        V = LagrangeSpace(build_square_mesh(3), 1)
        A = assemble_bilinear(V, laplace_coeffs()).toarray()
        center = 4  # node (1,1) of the 3x3 grid, x-fastest numbering
        assert A[center, center] == pytest.approx(4.0, abs=1e-13)
        for nb in (1, 3, 5, 7):
            assert A[center, nb] == pytest.approx(-1.0, abs=1e-13)

    def test_mass_total_is_area(self):
        mesh = build_square_mesh(4, 0.0, 2.0, 0.0, 1.0)
        V = LagrangeSpace(mesh, 1)
        coeffs = ProblemCoefficients(
            source=const_field(0.0), dirichlet=const_field(0.0),
            reaction=const_field(1.0),
            diffusion=[[const_field(1e-30), const_field(0.0)],
                       [const_field(0.0), const_field(1e-30)]],
        )
        A = assemble_bilinear(V, coeffs)
        assert A.sum() == pytest.approx(2.0, rel=1e-12)  # int 1*1 = area

    def test_variable_diffusion_symmetric(self):
        d11 = Field(lambda X, mu: 1.0 + X[0] ** 2)
        d12 = Field(lambda X, mu: 0.1 * X[0] * X[1])
        d22 = Field(lambda X, mu: 2.0 + X[1] ** 2)
        V = LagrangeSpace(build_square_mesh(4), 2)
        A = assemble_bilinear(V, laplace_coeffs(diffusion=[[d11, d12], [d12, d22]]))
        assert abs(A - A.T).max() < 1e-13


class TestDirichletAndSolve:
    def test_identity_passthrough(self):
        import scipy.sparse as sp

        A = sp.identity(4, format="csr")
        x = solve_linear(A, np.array([1.0, 2.0, 3.0, 4.0]))
        assert np.allclose(x, [1, 2, 3, 4])

    def test_two_by_two(self):
        import scipy.sparse as sp

        A = sp.csr_matrix(np.array([[2.0, 1.0], [1.0, 3.0]]))
        x = solve_linear(A, np.array([3.0, 5.0]))
        assert np.allclose(x, [0.8, 1.4])

    @pytest.mark.filterwarnings("ignore::scipy.sparse.linalg.MatrixRankWarning")
    def test_singular_system_raises(self):
        import scipy.sparse as sp

        A = sp.csr_matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
        with pytest.raises(SolverError):
            solve_linear(A, np.array([1.0, 0.0]))

    def test_poisson_three_nodes(self):
        # -u'' = 2, u(0)=u(1)=0 on two cells: nodal solution (0, 1/4, 0)
        V = LagrangeSpace(build_interval_mesh(3), 1)
        coeffs = ProblemCoefficients(source=const_field(2.0), dirichlet=const_field(0.0))
        A = assemble_bilinear(V, coeffs)
        b = assemble_linear(V, coeffs)
        A, b = apply_dirichlet(A, b, V, lambda x: np.zeros(len(x)))
        x = solve_linear(A, b)
        assert np.allclose(x, [0.0, 0.25, 0.0], atol=1e-14)

    def test_dirichlet_preserves_symmetry(self):
        V = LagrangeSpace(build_square_mesh(4), 1)
        coeffs = laplace_coeffs()
        A = assemble_bilinear(V, coeffs)
        b = assemble_linear(V, coeffs)
        A2, _ = apply_dirichlet(A, b, V, lambda x: np.zeros(len(x)))
        assert abs(A2 - A2.T).max() < 1e-13

    def test_inhomogeneous_values_installed(self):
        V = LagrangeSpace(build_interval_mesh(5), 1)
        coeffs = laplace_coeffs()
        A = assemble_bilinear(V, coeffs)
        b = assemble_linear(V, coeffs)
        g = lambda x: 1.0 + x[:, 0]
        A2, b2 = apply_dirichlet(A, b, V, g)
        x = solve_linear(A2, b2)
        # -u'' = 0 with u(0)=1, u(1)=2 is u = 1 + x, exact for P1
        assert np.allclose(x, 1.0 + V.dof_coords[:, 0], atol=1e-13)

    def test_patch_test_2d(self):
        # linear exact solution is reproduced to machine precision
        V = LagrangeSpace(build_square_mesh(4), 1)
        exact = Field(lambda X, mu: 1.0 + 2.0 * X[0] + 3.0 * X[1])
        coeffs = laplace_coeffs()
        A = assemble_bilinear(V, coeffs)
        b = assemble_linear(V, coeffs)
        A, b = apply_dirichlet(A, b, V, lambda x: exact(x))
        x = solve_linear(A, b)
        assert np.max(np.abs(x - exact(V.dof_coords))) < 1e-10

    def test_robin_annulus_constant_state(self):
        # -Lap u + u = 1 with du/dn + u = 1 on both rings has u = 1;
        # impose Robin data on Inner and Outer, no Dirichlet elimination
        mesh = build_annulus_mesh(6, 32, 0.25, 1.0)
        V = LagrangeSpace(mesh, 1)
        base = dict(source=const_field(1.0), dirichlet=const_field(0.0),
                    reaction=const_field(1.0), robin=const_field(1.0))
        A = assemble_bilinear(V, ProblemCoefficients(
            **base, robin_marker=BoundaryMarker.INNER))
        A += assemble_bilinear(V, ProblemCoefficients(
            **{**base, "source": const_field(0.0), "reaction": None,
               "diffusion": [[const_field(1e-30), const_field(0.0)],
                             [const_field(0.0), const_field(1e-30)]]},
            robin_marker=BoundaryMarker.OUTER))
        b = assemble_linear(V, ProblemCoefficients(
            **base, robin_marker=BoundaryMarker.INNER))
        b += assemble_linear(V, ProblemCoefficients(
            **{**base, "source": const_field(0.0)},
            robin_marker=BoundaryMarker.OUTER))
        x = solve_linear(A.tocsr(), b)
        assert np.max(np.abs(x - 1.0)) < 1e-10


class TestFacetQuadrature:
    def test_normals_point_outward(self):
        mesh = build_annulus_mesh(4, 16, 0.25, 1.0)
        V = LagrangeSpace(mesh, 1)
        fq_in = facet_quadrature(V, BoundaryMarker.INNER, 4)
        fq_out = facet_quadrature(V, BoundaryMarker.OUTER, 4)
        mid_in = fq_in.points.mean(axis=1)
        mid_out = fq_out.points.mean(axis=1)
        # inner boundary: outward normal points toward the origin
        assert np.all(np.einsum("fd,fd->f", fq_in.normals, mid_in) < 0)
        assert np.all(np.einsum("fd,fd->f", fq_out.normals, mid_out) > 0)

    def test_perimeter(self):
        mesh = build_square_mesh(5)
        V = LagrangeSpace(mesh, 1)
        fq = facet_quadrature(V, BoundaryMarker.ALL, 2)
        assert fq.weights.sum() == pytest.approx(4.0, abs=1e-13)

    def test_boundary_integral_of_linear_function(self):
        mesh = build_square_mesh(6)
        V = LagrangeSpace(mesh, 2)
        fq = facet_quadrature(V, BoundaryMarker.ALL, 4)
        pts = fq.points.reshape(-1, 2)
        vals = (pts[:, 0] + 2 * pts[:, 1]).reshape(fq.weights.shape)
        # int over the unit-square boundary of x + 2y = 1*2/2*... = 6
        assert np.sum(fq.weights * vals) == pytest.approx(6.0, rel=1e-13)


class TestInterpolationAndNorms:
    def test_p1_reproduces_linear(self):
        V = LagrangeSpace(build_interval_mesh(4), 1)
        u = interpolate(V, lambda x: 2.0 * x[:, 0] - 1.0)
        pts = np.linspace(0, 1, 17).reshape(-1, 1)
        assert np.allclose(u.eval_at(pts), 2.0 * pts[:, 0] - 1.0, atol=1e-14)

    def test_p2_reproduces_quadratic(self):
        V = LagrangeSpace(build_square_mesh(3), 2)
        f = lambda x: x[:, 0] ** 2 + x[:, 0] * x[:, 1]
        u = interpolate(V, f)
        rng = np.random.default_rng(1)
        pts = rng.random((50, 2))
        assert np.max(np.abs(u.eval_at(pts) - f(pts))) < 1e-13

    def test_interpolation_error_closed_form(self):
        # P1 interpolant of x(1-x) on h=1/2: the element error is
        # -(x-a)(x-b), with int (x-a)^2 (x-b)^2 = h^5/30 per element, so
        # the L2 error is h^2/sqrt(30) = 1/(4 sqrt(30))
        V = LagrangeSpace(build_interval_mesh(3), 1)
        u = interpolate(V, lambda x: x[:, 0] * (1.0 - x[:, 0]))
        f = Field(lambda X, mu: X[0] * (1.0 - X[0]))
        l2, h1, _, _ = error_norms(u, f)
        assert l2 == pytest.approx(1.0 / (4 * math.sqrt(30)), rel=1e-12)

    def test_error_of_exact_interpolant_is_zero(self):
        V = LagrangeSpace(build_square_mesh(4), 1)
        f = Field(lambda X, mu: 3.0 * X[0] - X[1])
        u = interpolate(V, lambda x: f(x))
        l2, h1, _, _ = error_norms(u, f)
        assert l2 < 1e-14 and h1 < 1e-13

    def test_reference_norms(self):
        V = LagrangeSpace(build_interval_mesh(9), 1)
        zero = DiscreteField(V, np.zeros(V.n_dofs))
        f = Field(lambda X, mu: fields.sin(2 * np.pi * X[0]))
        l2, h1, l2r, h1r = error_norms(zero, f, quad_degree=12)
        assert l2 == pytest.approx(l2r)
        assert l2r == pytest.approx(math.sqrt(0.5), rel=1e-10)
        assert h1r == pytest.approx(2 * math.pi * math.sqrt(0.5), rel=1e-10)

    def test_eval_at_square_both_triangles(self):
        V = LagrangeSpace(build_square_mesh(3), 1)
        u = interpolate(V, lambda x: x[:, 0] + 10.0 * x[:, 1])
        pts = np.array([[0.4, 0.1], [0.1, 0.4], [0.9, 0.85], [0.5, 0.5]])
        assert np.allclose(u.eval_at(pts), pts[:, 0] + 10 * pts[:, 1], atol=1e-13)

    def test_eval_at_annulus(self):
        mesh = build_annulus_mesh(8, 48, 0.25, 1.0)
        V = LagrangeSpace(mesh, 1)
        u = interpolate(V, lambda x: x[:, 0] - 2.0 * x[:, 1])
        rng = np.random.default_rng(3)
        r = rng.uniform(0.3, 0.95, 100)
        th = rng.uniform(0, 2 * np.pi, 100)
        pts = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        assert np.max(np.abs(u.eval_at(pts) - (pts[:, 0] - 2 * pts[:, 1]))) < 1e-12

    def test_field_on_quad_matches_gradient(self):
        V = LagrangeSpace(build_square_mesh(4), 2)
        u = interpolate(V, lambda x: x[:, 0] ** 2 - x[:, 1] ** 2)
        qd = V.quad_data(4)
        vals, grads = field_on_quad(V, u.coeffs, qd)
        p = qd.flat_points
        assert np.allclose(vals.ravel(), p[:, 0] ** 2 - p[:, 1] ** 2, atol=1e-12)
        g = np.stack([2 * p[:, 0], -2 * p[:, 1]], axis=1)
        assert np.allclose(grads.reshape(-1, 2), g, atol=1e-12)


class TestConvergenceSmoke:
    @pytest.mark.parametrize("k", [1, 2])
    def test_interval_rate(self, k):
        f = Field(lambda X, mu: fields.sin(2 * np.pi * X[0]))
        src = Field(lambda X, mu: (2 * np.pi) ** 2 * fields.sin(2 * np.pi * X[0]))
        errs, hs = [], []
        for N in (9, 17, 33):
            V = LagrangeSpace(build_interval_mesh(N), k)
            coeffs = ProblemCoefficients(source=src, dirichlet=const_field(0.0))
            A = assemble_bilinear(V, coeffs)
            b = assemble_linear(V, coeffs)
            A, b = apply_dirichlet(A, b, V, lambda x: np.zeros(len(x)))
            u = DiscreteField(V, solve_linear(A, b))
            l2, _, _, _ = error_norms(u, f)
            errs.append(l2)
            hs.append(V.mesh.h)
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert slope == pytest.approx(k + 1, abs=0.2)

    def test_square_p1_rate(self):
        kpi = 2.0
        f = Field(lambda X, mu: fields.sin(kpi * X[0]) * fields.sin(kpi * X[1]))
        src = Field(
            lambda X, mu: 2 * kpi**2 * fields.sin(kpi * X[0]) * fields.sin(kpi * X[1])
        )
        errs, hs = [], []
        for N in (9, 17, 33):
            V = LagrangeSpace(build_square_mesh(N, 0.0, np.pi, 0.0, np.pi), 1)
            coeffs = ProblemCoefficients(source=src, dirichlet=const_field(0.0))
            A = assemble_bilinear(V, coeffs)
            b = assemble_linear(V, coeffs)
            A, b = apply_dirichlet(A, b, V, lambda x: np.zeros(len(x)))
            u = DiscreteField(V, solve_linear(A, b))
            l2, _, _, _ = error_norms(u, f)
            errs.append(l2)
            hs.append(V.mesh.h)
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.2)
