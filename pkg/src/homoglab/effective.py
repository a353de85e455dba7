"""The homogenized flux ``abar``: tabulation, structure checks and interpolation."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cell import SolverConfig, solve_corrector
from .errors import HomogLabError, InvalidArgument
from .grid import TorusGrid
from .operators import OperatorSpec, VerificationReport, required_constant
from .vcalc import TAUS, ExponentParams, safe_pow, v_eval

CHECKS = {
    "growth": "|abar(xi)| <= L (mu+|xi|)^(p-1)",
    "weak-monotone": "L <dabar, dxi> >= (mu+|dxi|)^(p-2)|dxi|^2 (p>=2), (mu+|xi1|+|xi2|)^(p-2)|dxi|^2 (p<2)",
    "continuity": "|dabar| <= L (mu+|xi1|+|xi2|)^(p-2)|dxi| (p>=2), (mu+|dxi|)^(p-2)|dxi| (p<2)",
    "dual-monotone": "dual monotonicity of abar in terms of flux differences",
    "strong-monotone": "L <dabar, dxi> >= (mu+|xi1|+|xi2|)^(p-2)|dxi|^2; exploratory, never gated",
}

DEFAULT_CHECKS = ("growth", "weak-monotone", "continuity", "dual-monotone")


def abar(op: OperatorSpec, xi, grid: TorusGrid, cfg: SolverConfig = SolverConfig()):
    """Mean flux of the corrector solution at ``xi`` (no solve for ``xi = 0``)."""
    xi = np.asarray(xi, dtype=float)
    if not np.any(xi):
        return np.zeros(op.dim)
    return solve_corrector(op, xi, grid, cfg).mean_flux()


def polar_grid(magnitudes=16, directions=8, lo=1e-2, hi=1e2):
    """Origin followed by ``directions`` rays of log-spaced magnitudes in ``[lo, hi]`` (2-D)."""
    if magnitudes < 2 or directions < 3 or not 0 < lo < hi:
        raise InvalidArgument("polar grid needs >= 2 magnitudes, >= 3 directions and 0 < lo < hi")
    mags = np.geomspace(lo, hi, magnitudes)
    th = 2 * np.pi * np.arange(directions) / directions
    dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    dirs[np.abs(dirs) < 1e-15] = 0.0
    pts = (dirs[:, None, :] * mags[None, :, None]).reshape(-1, 2)
    return np.vstack([np.zeros((1, 2)), pts]), {"magnitudes": mags.tolist(), "directions": directions}


@dataclass(frozen=True)
class EffectiveTable:
    op: OperatorSpec
    xis: np.ndarray
    values: np.ndarray
    residuals: tuple
    iterations: tuple
    status: tuple
    polar: dict | None = None
    grid_N: int = 0

    def __len__(self):
        return len(self.xis)

    @property
    def ok(self):
        return np.array([s == "ok" for s in self.status])

    def to_dict(self):
        return {
            "operator": self.op.to_dict(),
            "grid_N": self.grid_N,
            "polar": self.polar,
            "entries": [
                {
                    "xi": [float(v) for v in x],
                    "abar": [float(v) for v in a],
                    "residual": r,
                    "iterations": it,
                    "status": s,
                }
                for x, a, r, it, s in zip(self.xis, self.values, self.residuals, self.iterations, self.status)
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        ent = d["entries"]
        return cls(
            OperatorSpec.from_dict(d["operator"]),
            np.array([e["xi"] for e in ent], dtype=float),
            np.array([e["abar"] for e in ent], dtype=float),
            tuple(e["residual"] for e in ent),
            tuple(e["iterations"] for e in ent),
            tuple(e["status"] for e in ent),
            d.get("polar"),
            d.get("grid_N", 0),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def to_csv(self):
        """One row per entry with ray index and magnitude, for plotting along rays."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.xis.shape[1]
        w.writerow(["ray", "magnitude"] + [f"xi{i + 1}" for i in range(n)] + [f"abar{i + 1}" for i in range(n)] + ["residual", "status"])
        for k, (x, a) in enumerate(zip(self.xis, self.values)):
            ray = -1
            if self.polar is not None and k > 0:
                ray = (k - 1) // len(self.polar["magnitudes"])
            w.writerow([ray, repr(float(np.linalg.norm(x)))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in a] + [repr(float(self.residuals[k])), self.status[k]])
        return buf.getvalue()


def tabulate(op: OperatorSpec, xi_grid, grid: TorusGrid, cfg: SolverConfig = SolverConfig(), polar=None):
    """``abar`` at every grid point; distinct solves run in parallel with ``cfg.workers`` threads."""
    xis = np.asarray(xi_grid, dtype=float)
    if xis.ndim != 2 or len(xis) == 0 or xis.shape[1] != op.dim:
        raise InvalidArgument("xi grid must be a nonempty (m, dim) array")

    def one(x):
        if not np.any(x):
            return np.zeros(op.dim), 0.0, 0, "ok"
        try:
            s = solve_corrector(op, x, grid, cfg)
            return s.mean_flux(), float(s.residual_norm), int(s.iterations), "ok"
        except HomogLabError as exc:
            return np.full(op.dim, np.nan), float(getattr(exc, "residual", None) or math.nan), int(getattr(exc, "iterations", None) or 0), f"failed: {exc}"

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            out = list(pool.map(one, xis))
    else:
        out = [one(x) for x in xis]
    return EffectiveTable(
        op,
        xis,
        np.array([o[0] for o in out]),
        tuple(o[1] for o in out),
        tuple(o[2] for o in out),
        tuple(o[3] for o in out),
        polar,
        grid.N,
    )


def _pairs(table):
    idx = np.flatnonzero(table.ok)
    i, j = np.triu_indices(len(idx), k=1)
    return idx[i], idx[j]


def _structure_ratio(check, x1, x2, a1, a2, params):
    p, mu = params.p, params.mu
    dx, da = x1 - x2, a1 - a2
    ndx = np.linalg.norm(dx, axis=-1)
    nda = np.linalg.norm(da, axis=-1)
    s12 = np.linalg.norm(x1, axis=-1) + np.linalg.norm(x2, axis=-1)
    inner = np.sum(da * dx, axis=-1)
    if check == "growth":
        return required_constant("A2-growth", x1, x2, a1, a2, params)
    if check == "weak-monotone":
        rhs = safe_pow(mu + ndx, p - 2.0) * ndx**2 if p >= 2 else safe_pow(mu + s12, p - 2.0) * ndx**2
        return rhs, inner
    if check == "strong-monotone":
        return safe_pow(mu + s12, p - 2.0) * ndx**2, inner
    if check == "continuity":
        base = mu + s12 if p >= 2 else mu + ndx
        return nda, safe_pow(base, p - 2.0) * ndx
    return required_constant("A4-dual", x1, x2, a1, a2, params)


def check_effective_structure(table: EffectiveTable, checks=DEFAULT_CHECKS + ("strong-monotone",), cap=1e3):
    """Fit constants of the structure inequalities over all pairs of tabulated entries."""
    if len(table) < 2:
        raise InvalidArgument("structure checks need a table with at least 2 entries")
    for c in checks:
        if c not in CHECKS:
            raise InvalidArgument(f"unknown check id {c!r}; expected one of {sorted(CHECKS)}")
    i, j = _pairs(table)
    ok = np.flatnonzero(table.ok)
    reports = []
    for c in checks:
        if c == "growth":
            x1, a1 = table.xis[ok], table.values[ok]
            x2, a2 = np.zeros_like(x1), np.zeros_like(a1)
        else:
            x1, x2, a1, a2 = table.xis[i], table.xis[j], table.values[i], table.values[j]
        num, den = _structure_ratio(c, x1, x2, a1, a2, table.op.params)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = num / den
        r = np.where((num == 0) & (den == 0), np.nan, r)
        r = np.where((den <= 0) & (num > 0), np.inf, r)
        valid = ~np.isnan(r)
        if not valid.any():
            reports.append(VerificationReport(c, True, 0.0, cap=cap, samples=0, gated=c != "strong-monotone"))
            continue
        k = int(np.argmax(np.where(valid, r, -np.inf)))
        fitted = float(r[k])
        wr = float(den[k] / num[k]) if num[k] != 0 else math.inf
        reports.append(
            VerificationReport(
                c,
                bool(fitted <= cap),
                fitted,
                (None, x1[k], x2[k]),
                wr,
                fitted,
                False,
                cap,
                int(valid.sum()),
                gated=c != "strong-monotone",
            )
        )
    return reports


@dataclass(frozen=True)
class DifferenceReport:
    left: float
    right: float
    ratio: float
    tau: float | None

    def to_dict(self):
        return dict(self.__dict__)


def corrector_difference_check(op: OperatorSpec, xi1, xi2, grid: TorusGrid, cfg: SolverConfig = SolverConfig(), taus=TAUS):
    """``||V(grad phi_1 - grad phi_2)||^2`` against the p-dependent right side (mu = 1 form)."""
    xi1 = np.asarray(xi1, dtype=float)
    xi2 = np.asarray(xi2, dtype=float)
    P = ExponentParams(op.p, 1.0)
    s1 = solve_corrector(op, xi1, grid, cfg)
    s2 = s1 if np.array_equal(xi1, xi2) else solve_corrector(op, xi2, grid, cfg)
    d = (s1.F.values - xi1) - (s2.F.values - xi2)
    left = float(grid.vol @ np.sum(v_eval(d, P) ** 2, axis=1))
    p = op.p
    dx = xi1 - xi2
    if p >= 2:
        right = (1 + np.linalg.norm(xi1) + np.linalg.norm(xi2)) ** (p - 2) * float(dx @ dx)
        tau = None
    else:
        vd = float(np.sum(v_eval(dx, P) ** 2))
        vs = (np.linalg.norm(v_eval(xi1, P)) + np.linalg.norm(v_eval(xi2, P))) ** 2
        cands = [vd * (1 + t ** (-(2 - p) / p)) + t * vs for t in taus]
        k = int(np.argmin(cands))
        right, tau = float(cands[k]), float(taus[k])
    ratio = left / right if right > 0 else (0.0 if left == 0 else math.inf)
    return DifferenceReport(left, float(right), float(ratio), tau)


# --- interpolation ------------------------------------------------------------------


def _lagrange4(u):
    """Cubic Lagrange weights for nodes 0..3 at local coordinates ``u``."""
    return np.stack(
        [
            -(u - 1) * (u - 2) * (u - 3) / 6,
            u * (u - 2) * (u - 3) / 2,
            -u * (u - 1) * (u - 3) / 2,
            u * (u - 1) * (u - 2) / 6,
        ],
        axis=-1,
    )


@dataclass
class Interpolant:
    """Polar interpolant of a 2-D table.

    On every ray the radial component ``abar . e_theta`` is interpolated in
    ``log r`` through its logarithm and the tangential/radial ratio directly;
    both are then interpolated in the angle. ``method="bilinear"`` uses linear
    weights in both variables, ``"cubic"`` four-point Lagrange stencils (still
    exact at nodes). Beyond the outer ring the table is extended
    ``(p-1)``-homogeneously, inside the inner ring with the local power law of
    the two innermost rings.
    """

    table: EffectiveTable
    method: str = "bilinear"
    extrapolated: int = 0
    evaluated: int = 0

    def __post_init__(self):
        t = self.table
        if self.method not in ("bilinear", "cubic"):
            raise InvalidArgument("interpolation method must be 'bilinear' or 'cubic'")
        if t.polar is None or t.xis.shape[1] != 2:
            raise InvalidArgument("interpolation needs a 2-D polar table")
        if not np.all(t.ok):
            raise InvalidArgument("interpolation needs a table without failed entries")
        mags = np.asarray(t.polar["magnitudes"], dtype=float)
        D = int(t.polar["directions"])
        M = len(mags)
        if self.method == "cubic" and (M < 4 or D < 4):
            raise InvalidArgument("cubic interpolation needs at least 4 magnitudes and 4 directions")
        xs = t.xis[1:].reshape(D, M, 2)
        vs = t.values[1:].reshape(D, M, 2)
        e = xs / mags[None, :, None]
        perp = np.stack([-e[..., 1], e[..., 0]], axis=-1)
        rad = np.sum(vs * e, axis=-1)
        tan = np.sum(vs * perp, axis=-1)
        if np.any(rad <= 0):
            raise InvalidArgument("radial component of abar must be positive for interpolation")
        self.mags = mags
        self.D = D
        self.log_r = np.log(mags)
        self.log_rad = np.log(rad)
        self.ratio = tan / rad
        self.inner_slope = (self.log_rad[:, 1] - self.log_rad[:, 0]) / (self.log_r[1] - self.log_r[0])

    def _stencils(self, pos, th):
        M, D = len(self.mags), self.D
        if self.method == "bilinear":
            i0 = np.minimum(np.floor(pos).astype(int), M - 2)
            ri = np.stack([i0, i0 + 1], axis=1)
            wr = pos - i0
            rw = np.stack([1 - wr, wr], axis=1)
            j0 = np.floor(th).astype(int)
            wt = th - j0
            tj = np.stack([j0, j0 + 1], axis=1) % D
            tw = np.stack([1 - wt, wt], axis=1)
        else:
            s = np.clip(np.floor(pos).astype(int) - 1, 0, M - 4)
            ri = s[:, None] + np.arange(4)
            rw = _lagrange4(pos - s)
            j0 = np.floor(th).astype(int) - 1
            tj = (j0[:, None] + np.arange(4)) % D
            tw = _lagrange4(th - j0)
        return ri, rw, tj, tw

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        single = xi.ndim == 1
        x = np.atleast_2d(xi)
        r = np.linalg.norm(x, axis=1)
        out = np.zeros_like(x)
        nz = r > 0
        if not nz.any():
            return out[0] if single else out
        xr, rr = x[nz], r[nz]
        th = np.mod(np.arctan2(xr[:, 1], xr[:, 0]), 2 * np.pi) * self.D / (2 * np.pi)
        lr = np.log(rr)
        lo, hi = self.log_r[0], self.log_r[-1]
        pos = np.interp(np.clip(lr, lo, hi), self.log_r, np.arange(len(self.mags)))
        ri, rw, tj, tw = self._stencils(pos, th)

        def interp(tab):
            vals = tab[tj[:, :, None], ri[:, None, :]]  # (m, angle stencil, radius stencil)
            return np.einsum("mab,ma,mb->m", vals, tw, rw)

        lrad = interp(self.log_rad)
        ratio = interp(self.ratio)
        slope_in = np.einsum("ma,ma->m", self.inner_slope[tj], tw)
        p = self.table.op.p
        lrad = np.where(lr > hi, lrad + (p - 1) * (lr - hi), lrad)
        lrad = np.where(lr < lo, lrad + slope_in * (lr - lo), lrad)
        self.extrapolated += int(np.sum((lr > hi + 1e-12) | (lr < lo - 1e-12)))
        self.evaluated += len(lr)
        rad = np.exp(lrad)
        e = xr / rr[:, None]
        perp = np.stack([-e[:, 1], e[:, 0]], axis=1)
        out[nz] = rad[:, None] * (e + ratio[:, None] * perp)
        return out[0] if single else out


def effective_interpolant(table: EffectiveTable, xi=None, method="bilinear"):
    """Interpolated ``abar(xi)``; with ``xi=None`` return the reusable interpolant."""
    f = Interpolant(table, method)
    return f if xi is None else f(xi)
