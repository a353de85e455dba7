"""Realized constants of Calderón-Zygmund, large-scale Lipschitz/Hölder and excess-decay estimates."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bvp import BVProblem, solve_oscillating
from .cell import SolverConfig, solve_corrector
from .errors import HomogLabError, InvalidArgument
from .grid import Ball, DirichletMesh, Field, TorusGrid, gradient, lq_norm, truncated_maximal
from .operators import OperatorSpec
from .vcalc import ExponentParams, v_eval

THETA0 = 0.5
FLOOR_REL = 1e-20


class RegularityWarning(UserWarning):
    """A precondition was violated but the measurement was still taken."""


@dataclass(frozen=True)
class Measurement:
    lhs: float
    rhs: float
    ratio: float
    degenerate: bool = False
    flags: tuple = ()

    def __float__(self):
        return self.ratio

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio, "degenerate": self.degenerate, "flags": list(self.flags)}


def _divide(lhs, rhs, flags=()):
    """``lhs/rhs`` with 0/0 reported as 1 and flagged."""
    if lhs == 0 and rhs == 0:
        return Measurement(0.0, 0.0, 1.0, True, tuple(flags) + ("0/0",))
    ratio = lhs / rhs if rhs > 0 else math.inf
    return Measurement(float(lhs), float(rhs), float(ratio), False, tuple(flags))


def _check_ball(mesh, ball: Ball):
    if not ball.radius > 0:
        raise InvalidArgument("ball radius must be positive")
    if isinstance(mesh, DirichletMesh) and not mesh.contains_ball(ball.center, ball.radius):
        raise InvalidArgument(f"ball (center {list(ball.center)}, radius {ball.radius}) exits the domain")


def _elem_array(F, mesh):
    if F is None:
        return None
    if isinstance(F, Field):
        return np.asarray(F.at_centroids(), dtype=float)
    F = np.asarray(F, dtype=float)
    if F.shape[0] != mesh.n_elements:
        raise InvalidArgument("F must be a Field or an element-wise array")
    return F


def _mag_field(u: Field, mu):
    return Field(u.mesh, mu + np.linalg.norm(gradient(u).values, axis=1), "element")


def _f_term(F, mesh, q, p, ball):
    if F is None:
        return 0.0
    return lq_norm(Field(mesh, F, "element"), q / (p - 1.0), ball, averaged=True) ** (1.0 / (p - 1.0))


def cz_sides(u: Field, F, ball: Ball, q, params: ExponentParams) -> Measurement:
    p = params.p
    if not q >= p:
        raise InvalidArgument(f"q = {q} must be >= p = {p}")
    m = u.mesh
    _check_ball(m, ball)
    g = _mag_field(u, params.mu)
    lhs = lq_norm(g, q, ball.scaled(0.5), averaged=True)
    rhs = lq_norm(g, p, ball, averaged=True) + _f_term(_elem_array(F, m), m, q, p, ball)
    return _divide(lhs, rhs)


def cz_ratio(u: Field, F, ball: Ball, q, params: ExponentParams) -> float:
    """``||mu+|grad u|||_{L^q(B/2)} / (||mu+|grad u|||_{L^p(B)} + ||F||^{1/(p-1)}_{L^{q/(p-1)}(B)})``, averaged norms."""
    return cz_sides(u, F, ball, q, params).ratio


def large_scale_cz_sides(u: Field, F, ball: Ball, q, epsilon, params: ExponentParams, method="auto") -> Measurement:
    """Both sides of the truncated-maximal-function estimate.

    ``epsilon > R/8`` is allowed (the maximal functions then average over few
    radii) but flagged with a :class:`RegularityWarning`.
    """
    p = params.p
    if not q >= p:
        raise InvalidArgument(f"q = {q} must be >= p = {p}")
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    m = u.mesh
    _check_ball(m, ball)
    flags = []
    if epsilon > ball.radius / 8 * (1 + 1e-12):
        flags.append("epsilon > R/8")
        warnings.warn(f"epsilon = {epsilon} exceeds R/8 = {ball.radius / 8}", RegularityWarning, stacklevel=2)
    half = ball.scaled(0.5)
    du = gradient(u).values
    gp = Field(m, np.linalg.norm(du, axis=1) ** p, "element")
    lhs = lq_norm(truncated_maximal(gp, epsilon, half, ball, method), q / p, half, averaged=True)
    rhs = lq_norm(_mag_field(u, params.mu), p, ball, averaged=True) ** p
    F = _elem_array(F, m)
    if F is not None:
        fp = Field(m, np.linalg.norm(F.reshape(len(F), -1), axis=1) ** (p / (p - 1.0)), "element")
        rhs += lq_norm(truncated_maximal(fp, epsilon, ball, ball, method), q / p, ball, averaged=True)
    return _divide(lhs, rhs, flags)


def large_scale_cz_ratio(u: Field, F, ball: Ball, q, epsilon, params: ExponentParams) -> float:
    """``||M_eps(1_B |grad u|^p)||_{L^{q/p}(B/2)}`` over ``||mu+|grad u|||^p_{L^p(B)} + ||M_eps(1_B|F|^{p'})||_{L^{q/p}(B)}``."""
    return large_scale_cz_sides(u, F, ball, q, epsilon, params).ratio


def contrast_ratio(u: Field, ball: Ball, params: ExponentParams) -> float:
    """Fine-scale ratio ``sup_B |grad u| / ||grad u||_{L^p(B)}`` (averaged)."""
    _check_ball(u.mesh, ball)
    g = Field(u.mesh, np.linalg.norm(gradient(u).values, axis=1), "element")
    return _divide(lq_norm(g, math.inf, ball), lq_norm(g, params.p, ball, averaged=True)).ratio


# --- radii profiles ----------------------------------------------------------------


def geometric_radii(R, epsilon, theta=THETA0):
    """``R, theta R, theta^2 R, ...`` down to (and not below) ``epsilon``."""
    if not (R > 0 and epsilon > 0 and 0 < theta < 1):
        raise InvalidArgument("need R > 0, epsilon > 0 and 0 < theta < 1")
    if epsilon > R:
        raise InvalidArgument(f"epsilon = {epsilon} exceeds R = {R}")
    k = int(math.floor(math.log(R / epsilon) / -math.log(theta) + 1e-9))
    return R * theta ** np.arange(k + 1)


@dataclass
class RadiiProfile:
    radii: np.ndarray
    values: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    degenerate: np.ndarray
    M: float | None = None
    flags: tuple = ()

    @property
    def sup(self):
        return float(np.max(self.values))

    @property
    def argsup(self):
        return float(self.radii[int(np.argmax(self.values))])

    def slope(self):
        """Least-squares slope of ``log value`` against ``log r`` (``nan`` if undefined)."""
        ok = (self.values > 0) & ~self.degenerate
        if ok.sum() < 2:
            return math.nan
        return float(np.polyfit(np.log(self.radii[ok]), np.log(self.values[ok]), 1)[0])

    def to_dict(self):
        return {
            "radii": [float(r) for r in self.radii],
            "values": [float(v) for v in self.values],
            "lhs": [float(v) for v in self.lhs],
            "rhs": [float(v) for v in self.rhs],
            "degenerate": [bool(d) for d in self.degenerate],
            "sup": self.sup,
            "argsup": self.argsup,
            "M": self.M,
            "flags": list(self.flags),
        }


def _ball_mean(mesh, values, ball):
    mask = mesh.element_mask(ball)
    if not mask.any():
        raise InvalidArgument(f"ball of radius {ball.radius} contains no element centroid")
    w = mesh.vol[mask]
    return float(math.fsum(w * values[mask]) / math.fsum(w))


def _profile(radii, lhs, rhs, M=None, flags=()):
    meas = [_divide(a, b) for a, b in zip(lhs, rhs)]
    return RadiiProfile(
        np.asarray(radii, dtype=float),
        np.array([x.ratio for x in meas]),
        np.asarray(lhs, dtype=float),
        np.asarray(rhs, dtype=float),
        np.array([x.degenerate for x in meas]),
        M,
        tuple(flags),
    )


def lipschitz_profile(u: Field, center, R, epsilon, params: ExponentParams, theta=THETA0) -> RadiiProfile:
    """``fint_{B_r}|V_p(grad u)|^2 / fint_{B_R}|V_p(grad u)|^2`` over ``r = R, theta R, ...`` down to ``epsilon``.

    ``sup`` is the realized Lipschitz constant and ``M`` the outer average.
    """
    m = u.mesh
    _check_ball(m, Ball(tuple(center), R))
    flags = () if params.mu == 1 else (f"mu = {params.mu} (the estimate is stated for mu = 1)",)
    v2 = np.sum(v_eval(gradient(u).values, params) ** 2, axis=1)
    radii = geometric_radii(R, epsilon, theta)
    lhs = [_ball_mean(m, v2, Ball(tuple(center), r)) for r in radii]
    M = lhs[0]
    return _profile(radii, lhs, [M] * len(radii), M, flags)


def holder_profile(u: Field, center, R, epsilon, q, params: ExponentParams, F=None, theta=THETA0) -> RadiiProfile:
    """``||grad u||_{L^p(B_r)} / ((R/r)^{n/q} bracket)`` for ``r`` in ``[epsilon, R]``.

    The bracket is ``||mu+|grad u|||_{L^p(B_R)} + ||F||^{1/(p-1)}_{L^{q/(p-1)}(B_R)}``;
    ``q = inf`` drops the radial weight.
    """
    p = params.p
    if not q > p:
        raise InvalidArgument(f"q = {q} must exceed p = {p}")
    m = u.mesh
    big = Ball(tuple(center), R)
    _check_ball(m, big)
    grad_mag = Field(m, np.linalg.norm(gradient(u).values, axis=1), "element")
    bracket = lq_norm(_mag_field(u, params.mu), p, big, averaged=True) + _f_term(_elem_array(F, m), m, q, p, big)
    radii = geometric_radii(R, epsilon, theta)
    lhs = [lq_norm(grad_mag, p, Ball(tuple(center), r), averaged=True) for r in radii]
    weight = np.ones(len(radii)) if math.isinf(q) else (R / radii) ** (m.dim / q)
    return _profile(radii, lhs, list(weight * bracket), bracket)


# --- excess decay ------------------------------------------------------------------


class CorrectorBank:
    """Cell correctors on demand, cached by the exact bytes of ``xi``.

    ``grid`` should match the mesh so that ``x/eps`` maps mesh elements onto
    torus elements.
    """

    def __init__(self, op: OperatorSpec, grid: TorusGrid, cfg: SolverConfig = SolverConfig()):
        self.op, self.grid, self.cfg = op, grid, cfg
        self._cache = {}

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        key = xi.tobytes()
        if key not in self._cache:
            if self.op.coefficient.is_constant or not np.any(xi):
                self._cache[key] = np.zeros(self.grid.n_nodes)
            else:
                self._cache[key] = solve_corrector(self.op, xi, self.grid, self.cfg).phi.values
        return self._cache[key]

    def gradient_at(self, xi, y):
        g = self.grid
        e, _ = g.locate(y)
        phi = self(xi)
        return np.einsum("mkd,mk->md", g.grads[e], phi[g.elements[e]])

    def __len__(self):
        return len(self._cache)


@dataclass
class DecayReport:
    radii: np.ndarray
    excess: np.ndarray
    xi: np.ndarray
    candidates: int
    skipped: list = field(default_factory=list)
    floor: float = 0.0

    def pre_floor(self):
        """Length of the leading run of strictly decreasing excesses above the floor."""
        k = 1
        while k < len(self.excess) and self.excess[k] < self.excess[k - 1] and self.excess[k] > self.floor:
            k += 1
        return k

    def contractions(self):
        n = self.pre_floor()
        e = self.excess[:n]
        return e[1:] / e[:-1]

    def exponent(self):
        """Slope of ``log E_k`` against ``log R_k`` over the pre-floor rungs."""
        n = self.pre_floor()
        if n < 2 or np.any(self.excess[:n] <= 0):
            return math.nan
        return float(np.polyfit(np.log(self.radii[:n]), np.log(self.excess[:n]), 1)[0])

    def to_dict(self):
        return {
            "radii": [float(r) for r in self.radii],
            "excess": [float(e) for e in self.excess],
            "xi": [[float(v) for v in x] for x in self.xi],
            "candidates": self.candidates,
            "skipped": self.skipped,
            "floor": self.floor,
            "pre_floor": self.pre_floor(),
            "contractions": [float(c) for c in self.contractions()],
            "exponent": self.exponent(),
        }


def _refine(best, spacing, n):
    offs = np.stack(np.meshgrid(*[np.array([-1.0, 0.0, 1.0])] * n, indexing="ij"), -1).reshape(-1, n)
    return best + 0.5 * spacing * offs


def excess_decay(
    u: Field,
    effective_correctors: CorrectorBank,
    center,
    R,
    epsilon,
    xi_grid,
    params: ExponentParams,
    theta=THETA0,
    refine=0,
    rungs=None,
) -> DecayReport:
    """Excess ``E_k = min_xi fint_{B_{R_k}} |V_p(grad u - xi - grad phi_xi(x/eps))|^2`` on ``R_k = theta^k R``.

    The minimum runs over ``xi_grid``; ``refine`` adds that many levels of
    nested local refinement around each rung's minimizer, so it can only lower
    ``E_k``. Candidates whose corrector fails are skipped with a warning.
    """
    m = u.mesh
    _check_ball(m, Ball(tuple(center), R))
    cand = np.atleast_2d(np.asarray(xi_grid, dtype=float))
    if cand.shape[1] != m.dim or len(cand) == 0:
        raise InvalidArgument("xi_grid must be a non-empty (k, dim) array")
    radii = geometric_radii(R, epsilon, theta)
    if rungs is not None:
        radii = radii[:rungs]
    outer = m.element_mask(Ball(tuple(center), R))
    du = gradient(u).values[outer]
    vol = m.vol[outer]
    cent = m.centroids[outer]
    y = cent / epsilon
    bank = effective_correctors
    skipped, failed = [], set()
    masks = [np.linalg.norm(cent - np.asarray(center, dtype=float), axis=1) <= r for r in radii]
    grads = {}

    def corrector_grad(xi):
        key = xi.tobytes()
        if key in failed:
            return None
        if key not in grads:
            try:
                grads[key] = bank.gradient_at(xi, y)
            except HomogLabError as exc:
                failed.add(key)
                skipped.append({"xi": [float(v) for v in xi], "reason": str(exc)})
                warnings.warn(f"corrector failed for xi = {xi.tolist()}; candidate skipped", RegularityWarning, stacklevel=3)
                return None
        return grads[key]

    def excess(xi, mask):
        g = corrector_grad(xi)
        if g is None:
            return math.inf
        w = du[mask] - xi - g[mask]
        v2 = np.sum(v_eval(w, params) ** 2, axis=1)
        return math.fsum(vol[mask] * v2) / math.fsum(vol[mask])

    spacing = _grid_spacing(cand)
    E, X = [], []
    for mask in masks:
        vals = [excess(xi, mask) for xi in cand]
        k = int(np.argmin(vals))
        best, e = cand[k], vals[k]
        h = spacing
        for _ in range(refine):
            h = h / 2
            for xi in _refine(best, 2 * h, m.dim):
                val = excess(xi, mask)
                if val < e:
                    best, e = xi, val
        if not math.isfinite(e):
            raise InvalidArgument("every candidate xi failed")
        E.append(e)
        X.append(best.copy())
    top = math.fsum(vol * np.sum(v_eval(du, params) ** 2, axis=1)) / math.fsum(vol)
    floor = FLOOR_REL * max(top, 1e-300)
    return DecayReport(radii, np.array(E), np.array(X), len(grads) + len(failed), skipped, floor)


def _grid_spacing(cand):
    """Smallest positive per-axis gap of the candidate set (1 for a single point)."""
    gaps = []
    for a in range(cand.shape[1]):
        d = np.diff(np.unique(cand[:, a]))
        if len(d):
            gaps.append(d.min())
    return np.array([min(gaps)] * cand.shape[1]) if gaps else np.ones(cand.shape[1])


def xi_box(center, half_width, k):
    """``k^n`` tensor grid of candidate slopes in the box ``center +- half_width``."""
    c = np.asarray(center, dtype=float)
    axes = [np.linspace(ci - half_width, ci + half_width, k) for ci in c]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, len(c))


# --- higher integrability ----------------------------------------------------------


def higher_integrability_probe(u_effective: Field, ball: Ball, q_list, params: ExponentParams) -> dict:
    """Ratios ``||mu+|grad u|||_{L^q(B/2)} / ||mu+|grad u|||_{L^p(B)}`` for each ``q``."""
    m = u_effective.mesh
    _check_ball(m, ball)
    g = _mag_field(u_effective, params.mu)
    base = lq_norm(g, params.p, ball, averaged=True)
    ratios = {float(q): _divide(lq_norm(g, q, ball.scaled(0.5), averaged=True), base).ratio for q in q_list}
    vals = list(ratios.values())
    return {"ratios": ratios, "growth": vals[-1] / vals[0] if vals and vals[0] > 0 else math.nan}


# --- ε-ladder reports --------------------------------------------------------------


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def field_hash(u: Field) -> str:
    return hashlib.sha256(np.ascontiguousarray(u.values).tobytes()).hexdigest()[:16]


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class RegularityReport:
    experiment_id: str
    operator_digest: str
    quantity: str
    epsilons: list
    rows: list
    profiles: dict = field(default_factory=dict)
    exponents: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        e = list(self.epsilons)
        if any(b >= a for a, b in zip(e, e[1:])):
            raise InvalidArgument("the epsilon ladder must be strictly decreasing")
        if len(self.rows) != len(e):
            raise InvalidArgument("one row per epsilon is required")

    @property
    def ratios(self):
        return [r["ratio"] for r in self.rows]

    @property
    def uniformity(self):
        vals = [v for v in self.ratios if v is not None and math.isfinite(v) and v > 0]
        return max(vals) / min(vals) if vals else math.nan

    def columns(self):
        cols = ["epsilon", "lhs", "rhs", "ratio", "degenerate"]
        extra = sorted({k for r in self.rows for k in r} - set(cols) - {"solution_hash"})
        return cols + extra + ["solution_hash"]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns()
        w.writerow(cols)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in cols])
        return buf.getvalue()

    def to_dict(self):
        return {
            "experiment_id": self.experiment_id,
            "operator_digest": self.operator_digest,
            "quantity": self.quantity,
            "epsilons": [float(e) for e in self.epsilons],
            "rows": self.rows,
            "profiles": self.profiles,
            "exponents": self.exponents,
            "uniformity": self.uniformity,
            "config": self.config,
        }

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


QUANTITIES = ("cz", "large-scale-cz", "lipschitz", "holder")


def ladder_study(
    op: OperatorSpec,
    eps_ladder,
    quantity="large-scale-cz",
    *,
    g=None,
    ball=Ball((0.5, 0.5), 0.4),
    q=None,
    cells_per_period=16,
    domain=None,
    cfg: SolverConfig = SolverConfig(),
    workers=1,
    config=None,
) -> RegularityReport:
    """Solve the oscillating problem at every ``eps`` and measure ``quantity`` on ``ball``.

    Rungs run in parallel when ``workers > 1``; rows are assembled in ladder
    order so the report does not depend on the worker count. The contrast
    ``sup|grad u| / ||grad u||_{L^p}`` is recorded alongside.
    """
    if quantity not in QUANTITIES:
        raise InvalidArgument(f"quantity: unknown {quantity!r}; expected one of {list(QUANTITIES)}")
    eps_ladder = [float(e) for e in eps_ladder]
    if any(b >= a for a, b in zip(eps_ladder, eps_ladder[1:])) or not eps_ladder:
        raise InvalidArgument("the epsilon ladder must be non-empty and strictly decreasing")
    params = op.params
    q = 2 * params.p if q is None else float(q)
    g = {"kind": "affine", "slope": [1.0] + [0.0] * (op.dim - 1)} if g is None else g
    dom = domain or {"type": "square", "center": [0.5] * op.dim, "half_width": 0.5}

    def rung(eps):
        mesh = _rung_mesh(dom, eps, cells_per_period, op)
        u = solve_oscillating(BVProblem(op, mesh, eps, g, cells_per_period=cells_per_period), cfg)
        row = {"epsilon": eps, "solution_hash": field_hash(u), "cells": mesh.n_elements}
        profile = None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RegularityWarning)
            if quantity == "cz":
                meas = cz_sides(u, None, ball, q, params)
            elif quantity == "large-scale-cz":
                meas = large_scale_cz_sides(u, None, ball, q, eps, params)
            else:
                if quantity == "lipschitz":
                    profile = lipschitz_profile(u, ball.center, ball.radius, eps, params)
                else:
                    profile = holder_profile(u, ball.center, ball.radius, eps, q, params)
                meas = Measurement(profile.sup, 1.0, profile.sup, bool(profile.degenerate.any()), profile.flags)
        if quantity == "large-scale-cz" and eps > ball.radius / 8 * (1 + 1e-12):
            row["flags"] = "epsilon > R/8"
        row.update(lhs=meas.lhs, rhs=meas.rhs, ratio=meas.ratio, degenerate=meas.degenerate)
        row["contrast"] = contrast_ratio(u, ball, params)
        row["iterations"] = u.info.iterations
        return row, profile

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(rung, eps_ladder))
    else:
        results = [rung(e) for e in eps_ladder]
    rows = [r for r, _ in results]
    profiles = {repr(e): p.to_dict() for e, (_, p) in zip(eps_ladder, results) if p is not None}
    contrast = [r["contrast"] for r in rows]
    exponents = {}
    if len(rows) >= 2:
        exponents["contrast_growth_per_halving"] = [b / a for a, b in zip(contrast, contrast[1:])]
        ratios = np.array([r["ratio"] for r in rows])
        if np.all(ratios > 0) and np.all(np.isfinite(ratios)):
            exponents["ratio_slope_log_eps"] = float(np.polyfit(np.log(eps_ladder), np.log(ratios), 1)[0])
    resolved = {
        "operator": op.to_dict(),
        "epsilons": eps_ladder,
        "quantity": quantity,
        "g": _jsonable(g) if isinstance(g, dict) else "custom",
        "ball": {"center": [float(c) for c in ball.center], "radius": float(ball.radius)},
        "q": q,
        "cells_per_period": cells_per_period,
        "domain": dom,
        "solver": cfg.to_dict(),
    }
    if config is not None:
        resolved = config
    return RegularityReport(
        experiment_id=content_hash(_jsonable(resolved)),
        operator_digest=op.digest(),
        quantity=quantity,
        epsilons=eps_ladder,
        rows=rows,
        profiles=profiles,
        exponents=exponents,
        config=_jsonable(resolved),
    )


def _rung_mesh(dom, eps, cpp, op):
    kind = dom.get("type")
    if kind == "square":
        hw = float(dom["half_width"])
        cells = int(round(2 * hw / eps * cpp))
        return DirichletMesh.square(tuple(dom["center"]), hw, cells=cells)
    if kind == "disk":
        return DirichletMesh.disk(tuple(dom["center"]), float(dom["radius"]), h=eps / cpp)
    raise InvalidArgument(f"domain.type: unknown domain {kind!r}")
