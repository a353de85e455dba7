import json
import math

import numpy as np
import pytest

from homoglab.bvp import BVProblem, solve_effective, solve_oscillating
from homoglab.effective import polar_grid, tabulate
from homoglab.errors import InvalidArgument, SolverFailure
from homoglab.grid import Ball, DirichletMesh, Field, TorusGrid, gradient
from homoglab.operators import OperatorSpec, constant, laminate
from homoglab.regularity import (
    CorrectorBank,
    RegularityReport,
    RegularityWarning,
    contrast_ratio,
    cz_ratio,
    cz_sides,
    excess_decay,
    geometric_radii,
    higher_integrability_probe,
    holder_profile,
    ladder_study,
    large_scale_cz_ratio,
    large_scale_cz_sides,
    lipschitz_profile,
    xi_box,
)
from homoglab.vcalc import ExponentParams

SQ = DirichletMesh.square(cells=64)
B = Ball((0.5, 0.5), 0.4)
P3 = ExponentParams(3.0, 1.0)
P3_0 = ExponentParams(3.0, 0.0)
LAM = laminate((1.0, 8.0))


def x1(mesh=SQ):
    return Field(mesh, mesh.nodes[:, 0])


def affine(mesh, slope):
    return Field(mesh, mesh.nodes @ np.asarray(slope, dtype=float))


@pytest.fixture(scope="module")
def laminate_solutions():
    """p = 3 laminate solutions with g = x1 at eps = 1/8 and 1/16 (16 cells per period)."""
    op = OperatorSpec("p-laplace", LAM, P3_0)
    m = DirichletMesh.square(cells=256)
    return {e: solve_oscillating(BVProblem(op, m, e, {"kind": "affine", "slope": [1.0, 0.0]}, cells_per_period=16)) for e in (1 / 8, 1 / 16)}


@pytest.fixture(scope="module")
def regularized_solution():
    op = OperatorSpec("regularized-p-laplace", LAM, P3)
    m = DirichletMesh.square(cells=128)
    u = solve_oscillating(BVProblem(op, m, 1 / 16, {"kind": "trig", "k": [1.0, 0.5], "amplitude": 0.5}, cells_per_period=8))
    return op, u


class TestCZ:
    def test_linear(self):
        s = cz_sides(x1(), None, B, 6.0, P3)
        assert s.lhs == pytest.approx(2.0, rel=1e-14) and s.rhs == pytest.approx(2.0, rel=1e-14)
        assert s.ratio == pytest.approx(1.0, rel=1e-14)

    def test_constant(self):
        s = cz_sides(Field(SQ, np.full(SQ.n_nodes, 4.2)), None, B, 3.0, P3)
        assert (s.lhs, s.rhs, s.ratio) == (1.0, 1.0, 1.0)

    def test_constant_degenerate_mu0(self):
        s = cz_sides(Field(SQ, np.zeros(SQ.n_nodes)), None, B, 3.0, P3_0)
        assert s.ratio == 1.0 and s.degenerate

    def test_constant_force_term(self):
        F = np.tile([3.0, 4.0], (SQ.n_elements, 1))
        s = cz_sides(x1(), F, B, 6.0, P3)
        assert s.rhs == pytest.approx(2.0 + 5.0**0.5, rel=1e-14)

    def test_ball_exits(self):
        with pytest.raises(InvalidArgument):
            cz_ratio(x1(), None, Ball((0.5, 0.5), 0.6), 6.0, P3)

    def test_q_below_p(self):
        with pytest.raises(InvalidArgument):
            cz_ratio(x1(), None, B, 2.0, P3)

    def test_shift_invariance(self, laminate_solutions):
        u = laminate_solutions[1 / 16]
        v = u.copy_with(u.values + 3.0)
        # adding a constant rounds nodal values, so gradients agree to a few ulps
        assert cz_ratio(v, None, B, 6.0, P3_0) == pytest.approx(cz_ratio(u, None, B, 6.0, P3_0), rel=1e-13)

    @pytest.mark.parametrize("lam", [2.0, 10.0])
    def test_scaling_invariance(self, laminate_solutions, lam):
        u = laminate_solutions[1 / 16]
        F = np.tile([0.3, -0.2], (u.mesh.n_elements, 1))
        a = cz_ratio(u, F, B, 6.0, P3_0)
        b = cz_ratio(u.copy_with(lam * u.values), lam**2 * F, B, 6.0, P3_0)
        assert b == pytest.approx(a, rel=1e-12)

    def test_laminate_against_coarser_presweep(self, laminate_solutions):
        cap = 1.5 * cz_ratio(laminate_solutions[1 / 8], None, B, 6.0, P3_0)
        assert cz_ratio(laminate_solutions[1 / 16], None, B, 6.0, P3_0) <= cap


class TestLargeScaleCZ:
    def test_constant_gradient(self):
        with pytest.warns(RegularityWarning):
            r = large_scale_cz_ratio(affine(SQ, [1.0, 2.0]), None, B, 6.0, 1 / 16, P3)
        assert r <= 1.0

    def test_no_warning_when_admissible(self, recwarn):
        m = DirichletMesh.square(cells=128)
        large_scale_cz_ratio(affine(m, [1.0, 2.0]), None, B, 6.0, 0.05, P3_0)
        assert not [w for w in recwarn if issubclass(w.category, RegularityWarning)]

    def test_eps_equals_radius(self, laminate_solutions):
        u = laminate_solutions[1 / 8]
        with pytest.warns(RegularityWarning):
            s = large_scale_cz_sides(u, None, B, 6.0, B.radius, P3_0)
        assert np.isfinite(s.ratio) and s.ratio > 0 and "epsilon > R/8" in s.flags
        with pytest.warns(RegularityWarning):
            again = large_scale_cz_sides(u, None, B, 6.0, B.radius, P3_0)
        assert again == s

    def test_force_term_increases_rhs(self, laminate_solutions):
        u = laminate_solutions[1 / 16]
        F = np.tile([1.0, 0.0], (u.mesh.n_elements, 1))
        with pytest.warns(RegularityWarning):
            a = large_scale_cz_sides(u, None, B, 6.0, 1 / 16, P3_0)
            b = large_scale_cz_sides(u, F, B, 6.0, 1 / 16, P3_0)
        # the indicator of B pulls the maximal function of |F|^p' = 1 below 1 near the boundary of B
        assert b.lhs == a.lhs and a.rhs + 0.5 < b.rhs <= a.rhs + 1.0 + 1e-12

    def test_shift_invariance(self, laminate_solutions):
        u = laminate_solutions[1 / 16]
        with pytest.warns(RegularityWarning):
            a = large_scale_cz_ratio(u, None, B, 6.0, 1 / 16, P3_0)
            b = large_scale_cz_ratio(u.copy_with(u.values - 7.0), None, B, 6.0, 1 / 16, P3_0)
        assert b == pytest.approx(a, rel=1e-13)

    def test_contrast_of_affine(self):
        assert contrast_ratio(affine(SQ, [1.0, 1.0]), B, P3) == pytest.approx(1.0, rel=1e-14)


class TestLipschitz:
    def test_radii(self):
        r = geometric_radii(0.4, 0.05)
        np.testing.assert_allclose(r, [0.4, 0.2, 0.1, 0.05])
        with pytest.raises(InvalidArgument):
            geometric_radii(0.1, 0.2)

    def test_linear(self):
        prof = lipschitz_profile(x1(), (0.5, 0.5), 0.4, 1 / 32, P3)
        np.testing.assert_allclose(prof.values, 1.0, rtol=1e-14)
        assert prof.M == pytest.approx(2.0, rel=1e-14)

    def test_constant(self):
        prof = lipschitz_profile(Field(SQ, np.ones(SQ.n_nodes)), (0.5, 0.5), 0.4, 1 / 32, P3)
        assert np.all(prof.values == 1.0) and prof.degenerate.all() and prof.M == 0.0

    def test_outer_radius_exactly_one(self, regularized_solution):
        _, u = regularized_solution
        prof = lipschitz_profile(u, (0.5, 0.5), 0.4, 1 / 16, P3)
        assert prof.values[0] == 1.0 and prof.radii[-1] >= 1 / 16
        assert prof.sup >= 1.0 and not prof.flags

    def test_mu_flagged(self):
        assert lipschitz_profile(x1(), (0.5, 0.5), 0.4, 1 / 8, P3_0).flags

    def test_shift_invariance(self, regularized_solution):
        _, u = regularized_solution
        a = lipschitz_profile(u, (0.5, 0.5), 0.4, 1 / 16, P3)
        b = lipschitz_profile(u.copy_with(u.values + 1.0), (0.5, 0.5), 0.4, 1 / 16, P3)
        np.testing.assert_allclose(b.values, a.values, rtol=1e-13)


class TestHolder:
    def test_constant_gradient(self):
        prof = holder_profile(affine(SQ, [0.6, 0.8]), (0.5, 0.5), 0.4, 1 / 32, 6.0, P3_0)
        np.testing.assert_allclose(prof.values, (prof.radii / 0.4) ** (2 / 6.0), rtol=1e-13)
        assert prof.argsup == 0.4 and prof.sup == pytest.approx(1.0, rel=1e-14)

    def test_large_q_proxy(self, regularized_solution):
        _, u = regularized_solution
        big = holder_profile(u, (0.5, 0.5), 0.4, 1 / 16, 64 * 3.0, P3)
        lim = holder_profile(u, (0.5, 0.5), 0.4, 1 / 16, math.inf, P3)
        bound = (0.4 * 16) ** (2 / (64 * 3.0)) - 1
        np.testing.assert_array_less(np.abs(big.values / lim.values - 1), bound + 1e-12)

    def test_q_must_exceed_p(self):
        with pytest.raises(InvalidArgument):
            holder_profile(x1(), (0.5, 0.5), 0.4, 1 / 8, 3.0, P3)

    def test_force_term(self):
        F = np.tile([4.0, 0.0], (SQ.n_elements, 1))
        prof = holder_profile(x1(), (0.5, 0.5), 0.4, 1 / 8, 6.0, P3, F=F)
        assert prof.M == pytest.approx(2.0 + 2.0, rel=1e-14)


class FlakyBank(CorrectorBank):
    def __init__(self, *a, bad=None, **kw):
        super().__init__(*a, **kw)
        self.bad = np.asarray(bad, dtype=float)

    def __call__(self, xi):
        if np.array_equal(np.asarray(xi), self.bad):
            raise SolverFailure("forced failure")
        return super().__call__(xi)


class TestExcessDecay:
    eps = 1 / 16

    def synthesized(self, op, xi, cpp=8):
        m = DirichletMesh.square(cells=int(cpp / self.eps))
        grid = TorusGrid(2, cpp)
        bank = CorrectorBank(op, grid)
        phi, _ = _eval(grid, bank(xi), m.nodes / self.eps)
        u = Field(m, m.nodes @ xi + self.eps * phi)
        return m, u, bank

    def test_constant_coefficient(self):
        op = OperatorSpec("regularized-p-laplace", constant(2.0), P3)
        bank = CorrectorBank(op, TorusGrid(2, 8))
        rep = excess_decay(x1(), bank, (0.5, 0.5), 0.4, 1 / 16, xi_box((1.0, 0.0), 0.5, 5), P3)
        assert np.all(rep.excess == 0.0)
        np.testing.assert_array_equal(rep.xi, np.tile([1.0, 0.0], (len(rep.radii), 1)))

    def test_synthesized_corrected_plane(self):
        op = OperatorSpec("regularized-p-laplace", LAM, P3)
        xi = np.array([1.0, 0.25])
        m, u, bank = self.synthesized(op, xi)
        # interpolation floor: V-distance between the discrete gradient and xi + grad phi at centroids
        grad_exact = xi + bank.gradient_at(xi, m.centroids / self.eps)
        d = gradient(u).values - grad_exact
        floor = max(float(np.max(np.sum(d**2, axis=1))), 1e-28)
        rep = excess_decay(u, bank, (0.5, 0.5), 0.4, self.eps, xi_box((1.0, 0.25), 0.25, 3), P3)
        assert np.all(rep.excess <= 10 * floor), (rep.excess, floor)
        np.testing.assert_array_equal(rep.xi, np.tile(xi, (len(rep.radii), 1)))

    def test_failed_candidate_skipped(self):
        op = OperatorSpec("regularized-p-laplace", LAM, P3)
        bank = FlakyBank(op, TorusGrid(2, 8), bad=[1.0, 0.5])
        with pytest.warns(RegularityWarning):
            rep = excess_decay(x1(), bank, (0.5, 0.5), 0.4, 1 / 8, xi_box((1.0, 0.0), 0.5, 3), P3)
        assert rep.skipped and rep.skipped[0]["xi"] == [1.0, 0.5]
        assert not any(np.array_equal(x, [1.0, 0.5]) for x in rep.xi)

    def test_nested_refinement_nonincreasing(self, regularized_solution):
        op, u = regularized_solution
        bank = CorrectorBank(op, TorusGrid(2, 8))
        coarse = xi_box((0.0, 0.0), 2.0, 3)
        fine = xi_box((0.0, 0.0), 2.0, 5)  # superset of the coarse grid
        # off-center: the data are point-symmetric about the center, where the best slope is 0
        a = excess_decay(u, bank, (0.35, 0.4), 0.3, 1 / 16, coarse, P3)
        b = excess_decay(u, bank, (0.35, 0.4), 0.3, 1 / 16, fine, P3)
        c = excess_decay(u, bank, (0.35, 0.4), 0.3, 1 / 16, fine, P3, refine=2)
        assert np.all(b.excess <= a.excess) and np.all(c.excess <= b.excess)
        assert np.any(c.excess < a.excess)

    def test_bad_grid(self):
        bank = CorrectorBank(OperatorSpec("linear-matrix", constant(), ExponentParams(2.0, 1.0)), TorusGrid(2, 4))
        with pytest.raises(InvalidArgument):
            excess_decay(x1(), bank, (0.5, 0.5), 0.4, 1 / 8, [[1.0, 0.0, 0.0]], P3)


def _eval(grid, nodal, y):
    e, w = grid.locate(y)
    return np.sum(nodal[grid.elements[e]] * w, axis=1), e


class TestHigherIntegrability:
    def test_affine(self):
        r = higher_integrability_probe(affine(SQ, [1.0, -1.0]), B, [3.0, 6.0, 12.0], P3)
        np.testing.assert_allclose(list(r["ratios"].values()), 1.0, rtol=1e-13)

    def test_q_equals_p_bound(self, regularized_solution):
        _, u = regularized_solution
        r = higher_integrability_probe(u, B, [3.0], P3)
        assert r["ratios"][3.0] <= 2 ** (2 / 3)

    def test_effective_refinement_stable(self):
        op = OperatorSpec("p-laplace", LAM, P3_0)
        xs, pol = polar_grid(12, 16)
        t = tabulate(op, xs, TorusGrid(2, 16), polar=pol)
        g = {"kind": "trig", "k": [1.0, 0.5], "amplitude": 0.5}
        qs = [3.0, 6.0, 12.0, 24.0]
        out = []
        for N in (32, 64):
            ubar = solve_effective(BVProblem(t, DirichletMesh.square(cells=N), g=g))
            out.append(np.array(list(higher_integrability_probe(ubar, B, qs, P3_0)["ratios"].values())))
        assert np.all(np.isfinite(out[1])) and np.all(np.diff(out[1]) >= 0)
        assert np.max(np.abs(out[1] / out[0] - 1)) <= 0.2


class TestReport:
    OP = OperatorSpec("regularized-p-laplace", LAM, P3)

    def study(self, workers=1, **kw):
        return ladder_study(self.OP, [1 / 4, 1 / 8], "large-scale-cz", cells_per_period=4, workers=workers, **kw)

    def test_workers_byte_identical(self):
        a, b = self.study(1), self.study(4)
        assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()

    def test_contents(self):
        r = self.study()
        rows = r.to_csv().splitlines()
        assert rows[0].startswith("epsilon,lhs,rhs,ratio,degenerate") and rows[0].endswith("solution_hash")
        assert len(rows) == 3
        d = json.loads(r.to_json())
        assert d["uniformity"] == pytest.approx(max(r.ratios) / min(r.ratios))
        assert d["operator_digest"] == self.OP.digest() and all(x > 0 for x in r.ratios)

    def test_id_tracks_config(self):
        a = self.study()
        b = ladder_study(self.OP, [1 / 4, 1 / 8], "large-scale-cz", cells_per_period=4, q=8.0)
        assert a.experiment_id != b.experiment_id

    @pytest.mark.parametrize("quantity", ["cz", "lipschitz", "holder"])
    def test_other_quantities(self, quantity):
        r = ladder_study(self.OP, [1 / 4, 1 / 8], quantity, cells_per_period=4, ball=Ball((0.5, 0.5), 0.25))
        assert all(x > 0 for x in r.ratios)
        assert bool(r.profiles) == (quantity != "cz")

    def test_ladder_validated(self):
        with pytest.raises(InvalidArgument):
            RegularityReport("x", "y", "cz", [0.1, 0.2], [{}, {}])
        with pytest.raises(InvalidArgument):
            ladder_study(self.OP, [1 / 4, 1 / 8], "energy")
