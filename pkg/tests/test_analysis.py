"""Analysis layer: error records, gain statistics, constants, studies, CSV.

Gain-constant oracles follow from seminorm algebra (scaling a prior error
scales the constant); the M-limit checks evaluate the closed forms directly
on fine grids.
"""

import math

import numpy as np
import pytest

from enrichfem import fields
from enrichfem.analysis import (
    ErrorRecord,
    GainStats,
    compute_errors,
    compute_gains,
    convergence_slope,
    cost_model,
    estimate_gain_constants,
    m_sweep,
    quadrature_degree_study,
    write_convergence_table,
    write_degree_study_table,
    write_gain_table,
    write_m_sweep_table,
    write_stats_table,
)
from enrichfem.catalog import get_problem
from enrichfem.enrichment import solve_additive, solve_multiplicative, solve_standard
from enrichfem.errors import LiftingError, UnsupportedError
from enrichfem.fem import LagrangeSpace
from enrichfem.fields import Field, const_field
from enrichfem.priors import Prior


def perturbed_prior(problem, eps, freq=3.0):
    sol = problem.solution

    def expr(X, mu):
        v = fields.sin(freq * np.pi * X[0])
        for x in X[1:]:
            v = v * fields.sin(freq * np.pi * x)
        return sol._fn(X, mu) - eps * v

    return Prior(Field(expr))


class TestComputeErrors:
    def test_solution_against_itself_is_zero(self):
        prob = get_problem("lap1d")
        space = LagrangeSpace(prob.build_mesh(17), 1)
        sol = solve_standard(space, prob.coefficients(prob.mu_1))
        rec = compute_errors(space, prob.mu_1, sol, standard=sol)
        # reference evaluation relocates points, so only near-zero
        assert rec.e_h <= 1e-14

    def test_zero_solution_gives_one(self):
        prob = get_problem("lap1d")
        space = LagrangeSpace(prob.build_mesh(17), 1)
        sol = solve_standard(space, prob.coefficients(prob.mu_1))
        sol.correction.coeffs[:] = 0.0
        rec = compute_errors(space, prob.mu_1, prob.solution, standard=sol)
        assert rec.e_h == pytest.approx(1.0, abs=1e-14)
        assert rec.e_h_h1 == pytest.approx(1.0, abs=1e-14)

    def test_all_methods_recorded(self):
        prob = get_problem("lap1d")
        mu = prob.mu_1
        space = LagrangeSpace(prob.build_mesh(17), 1)
        coeffs = prob.coefficients(mu)
        prior = perturbed_prior(prob, 0.1)
        rec = compute_errors(
            space, mu, prob.solution,
            standard=solve_standard(space, coeffs),
            prior=prior,
            additive=solve_additive(space, coeffs, prior),
            multiplicative={
                10.0: solve_multiplicative(space, coeffs, prior, lift=10.0)
            },
            N=17,
        )
        assert rec.N == 17 and rec.k == 1
        assert rec.h == pytest.approx(1.0 / 16)
        for v in (rec.e_h, rec.e_theta, rec.e_add, rec.e_mult[10.0]):
            assert v is not None and v > 0
        assert rec.e_add < rec.e_h
        # H1 counterparts exist for an analytic reference
        assert rec.e_h_h1 is not None and rec.e_mult_h1[10.0] > 0

    def test_fine_mesh_reference_has_no_h1(self):
        prob = get_problem("lap1d")
        mu = prob.mu_1
        fine = LagrangeSpace(prob.build_mesh(65), 3)
        ref = solve_standard(fine, prob.coefficients(mu))
        coarse = LagrangeSpace(prob.build_mesh(9), 1)
        rec = compute_errors(
            coarse, mu, ref, standard=solve_standard(coarse, prob.coefficients(mu))
        )
        assert rec.e_h is not None and rec.e_h > 0
        assert rec.e_h_h1 is None

    def test_fine_reference_against_itself_is_zero(self):
        prob = get_problem("lap1d")
        mu = prob.mu_1
        fine = LagrangeSpace(prob.build_mesh(33), 3)
        ref = solve_standard(fine, prob.coefficients(mu))
        rec = compute_errors(fine, mu, ref, standard=ref)
        assert rec.e_h <= 1e-13


def record(e_theta=None, e_h=None, e_add=None, e_mult=None):
    return ErrorRecord(
        mu=np.zeros(1), k=1, h=0.1,
        e_h=e_h, e_theta=e_theta, e_add=e_add, e_mult=e_mult or {},
    )


class TestComputeGains:
    def test_elementwise_ratios_and_mean(self):
        recs = [
            record(e_theta=0.1, e_h=1.0, e_add=0.01),
            record(e_theta=0.2, e_h=1.0, e_add=0.05),
        ]
        g = compute_gains(recs)["G_plus_theta"]
        assert g.values == pytest.approx([10.0, 4.0], rel=1e-12)
        assert g.mean == pytest.approx(7.0, rel=1e-12)

    def test_identical_errors_gain_one(self):
        recs = [record(e_theta=0.3, e_h=0.3, e_add=0.3) for _ in range(4)]
        stats = compute_gains(recs)
        for g in stats.values():
            assert g.values == pytest.approx([1.0] * 4)
            assert g.std == 0.0

    def test_zero_denominator_sentinel(self):
        recs = [
            record(e_theta=0.1, e_h=1.0, e_add=0.0),
            record(e_theta=0.1, e_h=1.0, e_add=0.5),
        ]
        g = compute_gains(recs)["G_plus"]
        assert np.isinf(g.values[0])
        assert g.n_infinite == 1
        assert g.mean == pytest.approx(2.0)

    def test_multiplicative_keys(self):
        recs = [record(e_h=1.0, e_add=0.5, e_mult={3.0: 0.25, 100.0: 0.125})]
        stats = compute_gains(recs)
        assert stats["G_M_3"].values[0] == pytest.approx(4.0)
        assert stats["G_M_100"].values[0] == pytest.approx(8.0)

    def test_permutation_invariance(self):
        recs = [record(e_h=float(i), e_add=0.5) for i in range(1, 6)]
        a = compute_gains(recs)["G_plus"]
        b = compute_gains(recs[::-1])["G_plus"]
        assert (a.vmin, a.vmax, a.mean, a.std) == (b.vmin, b.vmax, b.mean, b.std)

    def test_duplication_idempotence(self):
        recs = [record(e_h=1.0, e_add=0.2), record(e_h=2.0, e_add=0.4)]
        a = compute_gains(recs)["G_plus"]
        b = compute_gains(recs + recs)["G_plus"]
        assert (a.vmin, a.vmax, a.mean, a.std) == (b.vmin, b.vmax, b.mean, b.std)

    def test_mean_within_min_max(self):
        rng = np.random.default_rng(0)
        recs = [record(e_h=float(x), e_add=0.3) for x in rng.uniform(0.1, 2, 20)]
        g = compute_gains(recs)["G_plus"]
        assert g.vmin <= g.mean <= g.vmax
        assert g.std >= 0


class TestGainConstants:
    def setup_method(self):
        self.prob = get_problem("lap1d")
        self.mu = self.prob.mu_1
        self.u = self.prob.solution

    def test_exact_prior_all_constants_zero(self):
        gc = estimate_gain_constants(
            self.u, Prior(self.u), self.mu, self.prob.domain, lifts=(1.0, 100.0)
        )
        assert gc.c_add == 0.0
        assert all(v == pytest.approx(0.0, abs=1e-12) for v in gc.c_mult_h1.values())

    def test_zero_prior_gives_one(self):
        gc = estimate_gain_constants(
            self.u, Prior(const_field(0.0)), self.mu, self.prob.domain
        )
        assert gc.c_add == pytest.approx(1.0, rel=1e-13)

    def test_scaled_prior_gives_residual_fraction(self):
        scaled = Prior(Field(lambda X, m: self.u._fn(X, m) * 0.9))
        gc = estimate_gain_constants(self.u, scaled, self.mu, self.prob.domain)
        assert gc.c_add == pytest.approx(0.1, rel=1e-12)

    def test_m_limit_to_additive(self):
        prior = perturbed_prior(self.prob, 0.1)
        lifts = (1.0, 10.0, 100.0, 1000.0)
        gc = estimate_gain_constants(
            self.u, prior, self.mu, self.prob.domain, lifts=lifts
        )
        gaps = [abs(gc.c_mult_h1[m] - gc.c_add) for m in lifts]
        assert all(b < a for a, b in zip(gaps, gaps[1:])), gaps
        assert gaps[-1] / gc.c_add < 0.02
        # the L2 constant converges too, from above
        l2_gaps = [abs(gc.c_mult_l2[m] - gc.c_add) for m in lifts]
        assert l2_gaps[-1] < l2_gaps[0]

    def test_grid_convergence_under_doubling(self):
        prior = perturbed_prior(self.prob, 0.1)
        a = estimate_gain_constants(
            self.u, prior, self.mu, self.prob.domain, lifts=(10.0,)
        )
        b = estimate_gain_constants(
            self.u, prior, self.mu, self.prob.domain, lifts=(10.0,),
            n_cells=4096, sup_points=8192,
        )
        assert abs(b.c_add - a.c_add) / a.c_add < 0.01
        assert abs(b.c_mult_h1[10.0] - a.c_mult_h1[10.0]) / a.c_mult_h1[10.0] < 0.01

    def test_2d_grid(self):
        prob = get_problem("lap2d_low")
        prior = perturbed_prior(prob, 0.1, freq=1.0)
        gc = estimate_gain_constants(
            prob.solution, prior, prob.mu_1, prob.domain, lifts=(10.0,),
            n_2d=33, sup_side=48,
        )
        assert 0 < gc.c_add < 1
        assert gc.c_mult_h1[10.0] > 0
        assert "2d" in gc.grid

    def test_nonpositive_lift_raises(self):
        prior = Prior(const_field(-2.0))
        with pytest.raises(LiftingError, match="not positive"):
            estimate_gain_constants(
                self.u, prior, self.mu, self.prob.domain, lifts=(1.0,)
            )

    def test_hessianless_prior_unsupported(self):
        prob = get_problem("annulus")
        from enrichfem.priors import composition_for
        from enrichfem.neural import init_network, MlpConfig
        net = init_network(MlpConfig(n_spatial=2, n_param=1, hidden=(8,),
                                     activation="tanh", seed=0))
        prior = Prior(net, composition_for(prob))
        with pytest.raises(UnsupportedError, match="Hessian"):
            estimate_gain_constants(
                prob.solution, prior, prob.mu_1, ((-1.0, 1.0), (-1.0, 1.0))
            )

    def test_only_first_order_supported(self):
        with pytest.raises(UnsupportedError, match="q=1"):
            estimate_gain_constants(
                self.u, Prior(self.u), self.mu, self.prob.domain, q=2
            )


class TestMSweep:
    def test_exact_prior_rows(self):
        prob = get_problem("lap1d")
        space = LagrangeSpace(prob.build_mesh(9), 1)
        rows = m_sweep(prob, Prior(prob.solution), (1.0, 10.0), space,
                       quad_degree=16)
        assert [r["M"] for r in rows] == [1.0, 10.0, math.inf]
        assert rows[-1]["method"] == "additive"
        assert all(r["error"] <= 1e-10 for r in rows)

    def test_synthetic_prior_constant_convergence(self):
        prob = get_problem("lap1d")
        prior = perturbed_prior(prob, 0.1)
        space = LagrangeSpace(prob.build_mesh(17), 1)
        rows = m_sweep(prob, prior, (1.0, 10.0, 100.0, 1000.0), space)
        c_add = rows[-1]["c_h1"]
        gaps = [abs(r["c_h1"] - c_add) for r in rows[:-1]]
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert gaps[-1] / c_add < 0.02


class TestConvergenceSlope:
    def test_quadratic(self):
        hs = [0.1, 0.05, 0.025]
        assert convergence_slope(hs, [h**2 for h in hs]) == pytest.approx(2.0)

    def test_constant(self):
        assert convergence_slope([0.1, 0.05], [3.0, 3.0]) == pytest.approx(0.0)

    def test_intercept_independence(self):
        hs = [0.2, 0.1, 0.05, 0.025]
        assert convergence_slope(hs, [3 * h**3 for h in hs]) == pytest.approx(3.0)

    def test_too_short(self):
        with pytest.raises(ValueError):
            convergence_slope([0.1], [1.0])


class TestDegreeStudy:
    def test_polynomial_prior_saturates(self):
        # perturbation (x(1-x))^2 has a degree-2 operator image: every
        # interpolation degree m >= 2 reproduces it exactly
        prob = get_problem("lap1d")
        u = prob.solution
        poly = Prior(Field(lambda X, m: u._fn(X, m) - (X[0] * (1.0 - X[0])) ** 2))
        space = LagrangeSpace(prob.build_mesh(17), 1)
        rows = quadrature_degree_study(prob, poly, space, ms=(1, 2, 3, 4, 5))
        errs = [r["error"] for r in rows]
        assert errs[0] > errs[1] * 1.5
        for e in errs[2:]:
            assert e == pytest.approx(errs[1], rel=1e-9)

    def test_rough_prior_improves_with_degree(self):
        prob = get_problem("lap1d")
        u = prob.solution
        prior = Prior(
            Field(lambda X, m: u._fn(X, m) - 0.05 * fields.sin(6 * np.pi * X[0]))
        )
        space = LagrangeSpace(prob.build_mesh(17), 1)
        rows = quadrature_degree_study(prob, prior, space, ms=(1, 2, 3))
        assert rows[2]["error"] < rows[0]["error"]

    def test_monotone_when_interpolation_dominates(self):
        prob = get_problem("lap1d")
        u = prob.solution
        prior = Prior(
            Field(lambda X, m: u._fn(X, m) - 0.05 * fields.sin(10 * np.pi * X[0]))
        )
        space = LagrangeSpace(prob.build_mesh(17), 3)
        rows = quadrature_degree_study(prob, prior, space, ms=range(3, 8))
        errs = [r["error"] for r in rows]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:])), errs


class TestCostModel:
    def test_equal_dofs_differ_by_weights(self):
        c_std, c_add = cost_model(500, 500, 1, 12461)
        assert c_add - c_std == 12461

    def test_paper_scale_ratio(self):
        c_std, c_add = cost_model(10**4, 10**3, 100, 12461)
        assert c_std / c_add == pytest.approx(8.9, abs=0.01)

    def test_accepts_spaces(self):
        prob = get_problem("lap1d")
        s = LagrangeSpace(prob.build_mesh(11), 1)
        c_std, c_add = cost_model(s, s, 2, 100)
        assert c_std == 2 * s.n_dofs and c_add == 2 * s.n_dofs + 100


class TestWriters:
    def make_records(self):
        recs = []
        for i, (h, scale) in enumerate(((0.1, 1.0), (0.05, 0.25), (0.025, 0.0625))):
            recs.append(
                ErrorRecord(
                    mu=np.array([0.3]), k=1, h=h, N=int(1 / h) + 1,
                    e_h=0.5 * scale, e_theta=0.1, e_add=0.05 * scale,
                    e_mult={10.0: 0.06 * scale},
                )
            )
        return recs

    def test_convergence_table_layout_and_slopes(self, tmp_path):
        path = tmp_path / "conv.csv"
        write_convergence_table(self.make_records(), path)
        lines = path.read_text().splitlines()
        assert lines[0] == "mu_id,k,N,h,e_h,e_h_plus,e_h_M_10"
        assert len(lines) == 5
        footer = lines[-1].split(",")
        assert footer[0] == "slope"
        # errors scale exactly like h^2 -> every slope is 2
        for col in (4, 5, 6):
            assert float(footer[col]) == pytest.approx(2.0, abs=1e-12)

    def test_values_roundtrip(self, tmp_path):
        path = tmp_path / "conv.csv"
        recs = self.make_records()
        write_convergence_table(recs, path)
        row = path.read_text().splitlines()[1].split(",")
        assert float(row[4]) == recs[0].e_h
        assert float(row[6]) == recs[0].e_mult[10.0]

    def test_gain_table(self, tmp_path):
        path = tmp_path / "gain.csv"
        recs = [record(e_theta=0.1, e_h=1.0, e_add=0.0, e_mult={10.0: 0.5})]
        write_gain_table(recs, path)
        lines = path.read_text().splitlines()
        head = lines[0].split(",")
        assert head == ["mu_id", "e_theta", "e_h", "e_h_plus", "e_h_M_10",
                        "G_plus_theta", "G_plus", "G_M_theta_10", "G_M_10"]
        row = lines[1].split(",")
        assert row[5] == "inf" and row[6] == "inf"
        assert float(row[8]) == pytest.approx(2.0)

    def test_stats_table(self, tmp_path):
        path = tmp_path / "stats.csv"
        stats = compute_gains(
            [record(e_h=1.0, e_add=0.2), record(e_h=2.0, e_add=0.2)]
        )
        write_stats_table(stats, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "method,min,max,mean,std"
        row = lines[1].split(",")
        assert row[0] == "G_plus"
        assert float(row[3]) == pytest.approx(7.5)

    def test_m_sweep_and_degree_tables(self, tmp_path):
        rows = [
            {"method": "multiplicative", "M": 10.0, "error": 0.1,
             "c_h1": 0.2, "c_l2": 0.3},
            {"method": "additive", "M": math.inf, "error": 0.05,
             "c_h1": 0.18, "c_l2": 0.18},
        ]
        p1 = tmp_path / "msweep.csv"
        write_m_sweep_table(rows, p1)
        lines = p1.read_text().splitlines()
        assert lines[0] == "method,M,error,c_gain_h1,c_gain_l2"
        assert lines[2].startswith("additive,inf,")

        p2 = tmp_path / "deg.csv"
        write_degree_study_table([{"m": 3, "error": 0.5}], p2)
        assert p2.read_text().splitlines() == ["m,e_h_plus", "3,0.5"]
