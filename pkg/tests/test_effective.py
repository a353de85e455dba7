import csv
import io
import json

import numpy as np
import pytest

from homoglab.cell import SolverConfig, solve_corrector
from homoglab.effective import (
    EffectiveTable,
    abar,
    check_effective_structure,
    corrector_difference_check,
    effective_interpolant,
    polar_grid,
    tabulate,
)
from homoglab.errors import InvalidArgument
from homoglab.grid import TorusGrid
from homoglab.operators import CoefficientField, OperatorSpec, constant, laminate, required_constant
from homoglab.vcalc import ExponentParams

G32 = TorusGrid(2, 32)


def op_of(family, coef, p=2.0, mu=1.0, **kw):
    return OperatorSpec(family, coef, ExponentParams(p, mu), **kw)


@pytest.fixture(scope="module")
def p3_laminate_table():
    xs, pol = polar_grid(5, 8)
    return tabulate(op_of("regularized-p-laplace", laminate((1.0, 8.0)), 3.0), xs, G32, polar=pol)


class TestAbar:
    @pytest.mark.parametrize("p", [1.5, 3.0])
    def test_constant_coefficient(self, p):
        op = op_of("p-laplace", constant(2.5), p, 0.0)
        xi = np.array([0.6, -1.7])
        expect = 2.5 * np.linalg.norm(xi) ** (p - 2) * xi
        np.testing.assert_allclose(abar(op, xi, G32), expect, rtol=1e-9)

    def test_zero(self):
        assert np.all(abar(op_of("regularized-p-laplace", laminate((1, 8)), 3.0), [0.0, 0.0], G32) == 0)

    def test_linear_laminate(self):
        g = TorusGrid(2, 128)
        op = op_of("linear-matrix", laminate((1.0, 4.0)))
        A = np.stack([abar(op, e, g) for e in np.eye(2)], axis=1)
        np.testing.assert_allclose(np.diag(A), [1.6, 2.5], rtol=1e-2)
        assert abs(A[0, 1]) < 1e-10 and abs(A[1, 0]) < 1e-10

    def test_bit_identical_to_corrector_mean(self):
        op = op_of("orthotropic", laminate((1.0, 3.0)), 3.0, 0.5)
        s = solve_corrector(op, [0.3, 0.9], G32)
        assert np.array_equal(abar(op, [0.3, 0.9], G32), s.mean_flux())

    def test_homogeneity_degenerate(self):
        op = op_of("p-laplace", CoefficientField("checkerboard", (1.0, 3.0)), 3.0, 0.0)
        g = TorusGrid(2, 16)
        base = abar(op, [0.4, 0.7], g)
        for lam in (2.0, 10.0):
            np.testing.assert_allclose(abar(op, lam * np.array([0.4, 0.7]), g), lam**2 * base, rtol=1e-8)

    def test_linearity_p2(self):
        op = op_of("linear-matrix", CoefficientField("checkerboard", (1.0, 5.0)))
        g = TorusGrid(2, 16)
        a1, a2 = abar(op, [1, 0], g), abar(op, [0, 1], g)
        np.testing.assert_allclose(abar(op, [2.0, -3.0], g), 2 * a1 - 3 * a2, atol=1e-9)
        A = np.stack([a1, a2], axis=1)
        assert abs(A[0, 1] - A[1, 0]) <= 1e-6


class TestTabulate:
    def test_single_entry(self):
        op = op_of("regularized-p-laplace", laminate((1, 8)), 3.0)
        t = tabulate(op, [[1.0, 0.0]], G32)
        assert len(t) == 1
        np.testing.assert_array_equal(t.values[0], abar(op, [1.0, 0.0], G32))

    def test_oddness(self):
        op = op_of("regularized-p-laplace", laminate((1, 8)), 3.0)
        t = tabulate(op, [[1.0, 0.0], [-1.0, 0.0]], G32)
        np.testing.assert_allclose(t.values[1], -t.values[0], atol=1e-8)

    def test_sweep_all_converge(self, p3_laminate_table):
        t = p3_laminate_table
        assert len(t) == 41 and all(s == "ok" for s in t.status)
        assert max(t.residuals) <= 1e-10
        assert np.all(t.values[0] == 0) and t.iterations[0] == 0

    def test_strict_monotonicity(self, p3_laminate_table):
        t = p3_laminate_table
        i, j = np.triu_indices(len(t), 1)
        inner = np.sum((t.values[i] - t.values[j]) * (t.xis[i] - t.xis[j]), axis=1)
        assert np.all(inner > 0)

    def test_failure_recorded(self):
        op = op_of("p-laplace", CoefficientField("checkerboard", (1.0, 50.0)), 4.0, 0.0)
        t = tabulate(op, [[1.0, 0.3], [0.0, 0.0]], TorusGrid(2, 16), SolverConfig(max_iters=1, continuation=False))
        assert t.status[0].startswith("failed") and t.status[1] == "ok"

    def test_workers_identical(self):
        op = op_of("regularized-p-laplace", laminate((1, 8)), 3.0)
        xs, pol = polar_grid(3, 4)
        a = tabulate(op, xs, TorusGrid(2, 16), polar=pol)
        b = tabulate(op, xs, TorusGrid(2, 16), SolverConfig(workers=4), polar=pol)
        assert a.to_json() == b.to_json()

    def test_json_csv(self, p3_laminate_table):
        t = p3_laminate_table
        back = EffectiveTable.from_json(t.to_json())
        np.testing.assert_array_equal(back.values, t.values)
        assert back.polar == t.polar
        rows = list(csv.DictReader(io.StringIO(t.to_csv())))
        assert len(rows) == len(t) and rows[0]["ray"] == "-1" and rows[-1]["ray"] == "7"
        assert json.loads(t.to_json())["entries"][0]["status"] == "ok"


class TestStructure:
    def test_constant_matches_underlying(self):
        op = op_of("regularized-p-laplace", constant(2.0), 3.0)
        xs, pol = polar_grid(4, 6)
        t = tabulate(op, xs, TorusGrid(2, 16), polar=pol)
        reps = {r.assumption_id: r for r in check_effective_structure(t)}
        i, j = np.triu_indices(len(t), 1)
        c = np.full(len(i), 2.0)
        a1, a2 = op.flux_local(c, t.xis[i]), op.flux_local(c, t.xis[j])
        num, den = required_constant("A4-dual", t.xis[i], t.xis[j], a1, a2, op.params)
        assert reps["dual-monotone"].fitted_constant == pytest.approx(np.nanmax(num / den), rel=1e-6)
        x = t.xis[1:]
        g = np.linalg.norm(op.flux_local(np.full(len(x), 2.0), x), axis=1) / (1 + np.linalg.norm(x, axis=1)) ** 2
        assert reps["growth"].fitted_constant == pytest.approx(g.max(), rel=1e-6)

    def test_linear_laminate_continuity(self):
        op = op_of("linear-matrix", laminate((1.0, 4.0)))
        xs, pol = polar_grid(3, 8)
        t = tabulate(op, xs, TorusGrid(2, 32), polar=pol)
        rep = {r.assumption_id: r for r in check_effective_structure(t)}["continuity"]
        assert rep.fitted_constant <= 2.5 * 1.01
        assert rep.fitted_constant == pytest.approx(2.5, rel=1e-2)

    def test_orthotropic_dual_finite(self):
        op = op_of("orthotropic", laminate((1.0, 2.0)), 4.0, 1.0)
        xs, pol = polar_grid(4, 8)
        t = tabulate(op, xs, TorusGrid(2, 16), polar=pol)
        rep = {r.assumption_id: r for r in check_effective_structure(t, ("dual-monotone",))}["dual-monotone"]
        assert np.isfinite(rep.fitted_constant) and rep.holds

    def test_strong_monotone_not_gated(self, p3_laminate_table):
        reps = check_effective_structure(p3_laminate_table)
        gated = {r.assumption_id: r.gated for r in reps}
        assert gated["strong-monotone"] is False
        assert all(gated[c] for c in ("growth", "weak-monotone", "continuity", "dual-monotone"))

    def test_unknown_check(self, p3_laminate_table):
        with pytest.raises(InvalidArgument):
            check_effective_structure(p3_laminate_table, ("coercive",))

    def test_needs_two_entries(self):
        op = op_of("linear-matrix", constant())
        with pytest.raises(InvalidArgument):
            check_effective_structure(tabulate(op, [[1.0, 0.0]], TorusGrid(2, 8)))


class TestCorrectorDifference:
    def test_equal_xi(self):
        r = corrector_difference_check(op_of("regularized-p-laplace", laminate((1, 8)), 3.0), [1, 0], [1, 0], G32)
        assert r.left == 0 and r.ratio == 0

    def test_constant_zero(self):
        r = corrector_difference_check(op_of("regularized-p-laplace", constant(2.0), 1.5), [1, 0], [0, 2], G32)
        assert r.left <= 1e-20 and r.tau is not None

    def test_ratio_stable(self):
        op = op_of("regularized-p-laplace", laminate((1.0, 8.0)), 3.0)
        ratios = [corrector_difference_check(op, [1.0, 0.0], [1.0 + d, 0.0], G32).ratio for d in (1e-2, 1e-1, 1.0)]
        assert max(ratios) / min(ratios) < 4
        assert max(ratios) < 1.0


class TestInterpolant:
    def test_exact_at_nodes(self, p3_laminate_table):
        t = p3_laminate_table
        for m in ("bilinear", "cubic"):
            f = effective_interpolant(t, method=m)
            np.testing.assert_allclose(f(t.xis), t.values, rtol=1e-12, atol=1e-14)

    def test_zero(self, p3_laminate_table):
        assert np.all(effective_interpolant(p3_laminate_table, np.zeros(2)) == 0)

    def test_isotropic_closed_form(self):
        op = op_of("p-laplace", constant(2.0), 3.0, 0.0)
        xs, pol = polar_grid(16, 8)
        t = tabulate(op, xs, TorusGrid(2, 8), polar=pol)
        f = effective_interpolant(t)
        rng = np.random.default_rng(0)
        q = rng.normal(size=(500, 2)) * np.exp(rng.uniform(np.log(1e-2), np.log(1e2), (500, 1)))
        exact = 2.0 * np.linalg.norm(q, axis=1)[:, None] * q
        err = np.linalg.norm(f(q) - exact, axis=1) / np.linalg.norm(exact, axis=1)
        assert err.max() <= 0.02

    def test_homogeneous_extrapolation(self):
        op = op_of("p-laplace", constant(1.0), 3.0, 0.0)
        xs, pol = polar_grid(4, 8, 0.1, 10.0)
        f = effective_interpolant(tabulate(op, xs, TorusGrid(2, 8), polar=pol))
        big = np.array([300.0, 0.0])
        np.testing.assert_allclose(f(big), [300.0**2, 0.0], rtol=1e-10)
        assert f.extrapolated == 1

    def test_needs_polar(self):
        op = op_of("linear-matrix", constant())
        with pytest.raises(InvalidArgument):
            effective_interpolant(tabulate(op, [[1.0, 0.0], [0.0, 1.0]], TorusGrid(2, 8)))

    def test_cubic_beats_bilinear_on_anisotropic(self):
        op = op_of("linear-matrix", laminate((1.0, 4.0)))
        xs, pol = polar_grid(6, 16)
        t = tabulate(op, xs, TorusGrid(2, 16), polar=pol)
        q = np.array([[np.cos(a), np.sin(a)] for a in np.linspace(0.1, 6.0, 37)])
        exact = q * [1.6, 2.5]
        errs = {m: np.abs(effective_interpolant(t, q, m) - exact).max() for m in ("bilinear", "cubic")}
        assert errs["cubic"] < errs["bilinear"] / 3
