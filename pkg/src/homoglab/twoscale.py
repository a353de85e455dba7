"""Two-scale expansion ``u2s = ubar + sum_Q eta_Q eps phi_{xi_Q}(x/eps)`` on a cube partition,
its residual fields and the fitted homogenization error rate."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import linregress

from .bvp import BVProblem, solve_effective, solve_oscillating
from .cell import CorrectorSolution, solve_corrector, solve_flux_corrector
from .effective import EffectiveTable, Interpolant, polar_grid, tabulate
from .errors import ExpansionFailure, HomogLabError, InvalidArgument, SolverFailure
from .grid import DirichletMesh, Field, TorusGrid, gradient, lq_norm, write_field_binary
from .operators import OperatorSpec
from .solver import SolverConfig

QUANT_STEP = 1e-3
CSV_COLUMNS = ("epsilon", "error", "R1", "R2", "R3", "beta_hat", "r_squared")


def domain_radius(domain) -> float:
    """Inradius-like size of a square (half width) or disk (radius) domain."""
    d = domain.domain if isinstance(domain, DirichletMesh) else domain
    if d["type"] == "square":
        return float(d["half_width"])
    if d["type"] == "disk":
        return float(d["radius"])
    raise InvalidArgument(f"domain.type: unknown domain type {d['type']!r}")


def _domain_dict(domain):
    return domain.domain if isinstance(domain, DirichletMesh) else domain


# --- partition ------------------------------------------------------------------------


@dataclass(frozen=True)
class CubePartition:
    """Open cubes ``z + (-s/2, s/2)^n``, ``s = ell*eps``, ``z`` on the lattice ``s Z^n``.

    Each cube carries the cutoff ``eta = clip((s/2 - |x - z|_inf) / ramp, 0, 1)``,
    piecewise linear with ramp width ``ramp = eps``.
    """

    epsilon: float
    ell: int
    rho: float
    centers: np.ndarray
    indices: np.ndarray
    domain: dict = field(repr=False, default=None)

    @property
    def side(self):
        return self.ell * self.epsilon

    @property
    def ramp(self):
        return self.epsilon

    @property
    def dim(self):
        return self.centers.shape[1]

    def __len__(self):
        return len(self.centers)

    def locate(self, points):
        """Index of the open cube containing each point, ``-1`` outside every cube."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        s = self.side
        k = np.floor(pts / s + 0.5).astype(np.int64)
        inside = np.all(np.abs(pts - k * s) < s / 2, axis=1)
        lo = self.indices.min(axis=0)
        shape = tuple(self.indices.max(axis=0) - lo + 1)
        table = np.full(shape, -1, dtype=np.int64)
        table[tuple((self.indices - lo).T)] = np.arange(len(self))
        rel = k - lo
        ok = inside & np.all((rel >= 0) & (rel < np.array(shape)), axis=1)
        out = np.full(len(pts), -1, dtype=np.int64)
        out[ok] = table[tuple(rel[ok].T)]
        return out

    def cutoff(self, points, cube=None):
        """``(eta, grad eta)`` at ``points``; ``cube`` defaults to the containing cube."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        q = self.locate(pts) if cube is None else np.broadcast_to(np.asarray(cube), (len(pts),))
        eta = np.zeros(len(pts))
        grad = np.zeros_like(pts)
        sel = q >= 0
        if not sel.any():
            return eta, grad
        d = pts[sel] - self.centers[q[sel]]
        i = np.argmax(np.abs(d), axis=1)
        dist = self.side / 2 - np.abs(d[np.arange(len(d)), i])
        eta[sel] = np.clip(dist / self.ramp, 0.0, 1.0)
        ramp = (dist > 0) & (dist < self.ramp)
        g = np.zeros_like(d)
        g[np.arange(len(d)), i] = -np.sign(d[np.arange(len(d)), i]) / self.ramp
        grad[sel] = np.where(ramp[:, None], g, 0.0)
        return eta, grad

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "ell": self.ell,
            "rho": self.rho,
            "side": self.side,
            "ramp": self.ramp,
            "cubes": len(self),
            "centers": self.centers.tolist(),
        }


def meets_shrunken(domain, centers, side, rho):
    """Whether each open cube meets the open domain shrunk by ``2 rho``."""
    d = _domain_dict(domain)
    c = np.asarray(d["center"], dtype=float)
    off = np.abs(np.asarray(centers, dtype=float) - c)
    if d["type"] == "square":
        return np.all(off < d["half_width"] - 2 * rho + side / 2, axis=1)
    gap = np.maximum(off - side / 2, 0.0)
    return np.linalg.norm(gap, axis=1) < d["radius"] - 2 * rho


def build_partition(domain, epsilon, ell, rho) -> CubePartition:
    """Lattice cubes of side ``ell*eps`` meeting the domain shrunk by ``2 rho``."""
    d = _domain_dict(domain)
    R = domain_radius(d)
    n = len(d["center"])
    if not (epsilon > 0 and rho > 0):
        raise InvalidArgument("epsilon and rho must be positive")
    if int(ell) != ell or ell < 2:
        raise InvalidArgument("ell must be an integer >= 2")
    ell = int(ell)
    if not math.sqrt(n) * ell * epsilon < rho:
        raise InvalidArgument(
            f"admissibility violated: sqrt(n)*ell*eps = {math.sqrt(n) * ell * epsilon:.4g} < rho = {rho:.4g} fails"
        )
    if not rho <= R / 4:
        raise InvalidArgument(f"admissibility violated: rho = {rho:.4g} <= radius/4 = {R / 4:.4g} fails")
    s = ell * epsilon
    c = np.asarray(d["center"], dtype=float)
    lo = np.floor((c - R) / s).astype(int) - 1
    hi = np.ceil((c + R) / s).astype(int) + 1
    ks = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)], indexing="ij"), axis=-1).reshape(-1, n)
    z = ks * s
    keep = meets_shrunken(d, z, s, rho)
    return CubePartition(float(epsilon), ell, float(rho), z[keep], ks[keep], d)


def default_ell(epsilon, rho, n):
    """``max(2, round(eps^-1/4))`` lowered until ``sqrt(n) ell eps < rho``; ``None`` if even 2 fails."""
    ell = max(2, int(round(epsilon**-0.25)))
    while ell >= 2 and not math.sqrt(n) * ell * epsilon < rho:
        ell -= 1
    return ell if ell >= 2 else None


# --- expansion ------------------------------------------------------------------------


def quantize(xi, step=QUANT_STEP):
    """Cache key and representative of ``xi`` on a decade-relative lattice of step ``step``."""
    xi = np.asarray(xi, dtype=float)
    r = float(np.linalg.norm(xi))
    if r == 0:
        return (0, tuple(0 for _ in xi)), np.zeros_like(xi)
    e = math.floor(math.log10(r))
    h = step * 10.0**e
    ints = tuple(int(v) for v in np.round(xi / h))
    return (e, ints), np.array(ints, dtype=float) * h


def cube_averages(partition: CubePartition, mesh, elem_values):
    """Exactly rounded element averages per cube (order independent), shape (cubes, n)."""
    owner = partition.locate(mesh.centroids)
    vals = np.asarray(elem_values, dtype=float)
    out = np.full((len(partition), vals.shape[1]), np.nan)
    order = np.argsort(owner, kind="stable")
    bounds = np.searchsorted(owner[order], np.arange(len(partition) + 1))
    for q in range(len(partition)):
        idx = order[bounds[q] : bounds[q + 1]]
        if len(idx) == 0:
            continue
        w = mesh.vol[idx]
        wsum = math.fsum(w)
        out[q] = [math.fsum(w * vals[idx, j]) / wsum for j in range(vals.shape[1])]
    return out


@dataclass
class CorrectorCache:
    """Memoized correctors keyed by quantized ``xi``."""

    op: OperatorSpec
    grid: TorusGrid
    cfg: SolverConfig = SolverConfig()
    entries: dict = field(default_factory=dict)
    hits: int = 0
    solves: int = 0

    def _solve(self, xi):
        if self.op.coefficient.is_constant:
            # the periodic corrector of a constant coefficient vanishes identically
            return _zero_corrector(self.op, xi, self.grid)
        return solve_corrector(self.op, xi, self.grid, SolverConfig(**{**self.cfg.to_dict(), "workers": 1}))

    def fill(self, xis, labels=None):
        """Solve every missing key (in parallel with ``cfg.workers``); return the keys per ``xi``."""
        keys, reps = zip(*(quantize(x) for x in xis)) if len(xis) else ((), ())
        todo = {}
        for i, k in enumerate(keys):
            if k in self.entries or k in todo:
                self.hits += 1
            else:
                todo[k] = (reps[i], i if labels is None else labels[i])
        items = sorted(todo.items())

        def run(item):
            k, (rep, label) = item
            try:
                return k, self._solve(rep)
            except SolverFailure as exc:
                raise ExpansionFailure(
                    f"corrector solve failed on cube {label} (xi_Q = {rep.tolist()}): {exc}", cube=label
                ) from exc

        if self.cfg.workers > 1 and len(items) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                done = list(pool.map(run, items))
        else:
            done = [run(it) for it in items]
        for k, sol in done:
            self.entries[k] = sol
        self.solves += len(done)
        return list(keys)


def _zero_corrector(op, xi, grid):
    xi = np.asarray(xi, dtype=float)
    c = op.coefficient(grid.centroids)
    F = np.broadcast_to(xi, (grid.n_elements, grid.dim))
    return CorrectorSolution(
        xi=xi,
        phi=Field(grid, np.zeros(grid.n_nodes)),
        F=Field(grid, F, "element"),
        flux=Field(grid, op.flux_local(c, F), "element"),
        residual_norm=0.0,
        iterations=0,
        op=op,
    )


@dataclass
class TwoScaleExpansion:
    ubar: Field
    partition: CubePartition
    xi_per_cube: np.ndarray
    keys: list
    cache: CorrectorCache
    u2s: Field
    grad_u2s: Field
    owner: np.ndarray
    eta: np.ndarray
    grad_eta: np.ndarray
    grad_phi: np.ndarray
    residual_fields: dict = field(default_factory=dict)

    @property
    def correctors(self):
        return {k: self.cache.entries[k] for k in dict.fromkeys(self.keys)}

    @property
    def mesh(self):
        return self.ubar.mesh

    def export(self, directory, stem="twoscale"):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_field_binary(self.u2s, d / f"{stem}_u2s.bin")
        write_field_binary(self.grad_u2s, d / f"{stem}_grad_u2s.bin")
        for name, R in self.residual_fields.items():
            write_field_binary(R, d / f"{stem}_{name}.bin")
        return d


def _torus_eval(grid: TorusGrid, nodal, y):
    """P1 value and element gradient of a periodic nodal field at points ``y``."""
    e, w = grid.locate(y)
    v = nodal[grid.elements[e]]
    val = np.sum(v * w, axis=1)
    grad = np.einsum("mkd,mk->md", grid.grads[e], v)
    return val, grad


def corrector_grid(mesh, epsilon, n):
    """Torus grid whose nodes coincide with ``mesh`` nodes scaled by ``1/eps`` when possible."""
    per = epsilon / mesh.h
    N = int(round(per))
    if N >= 4 and abs(per - N) < 1e-9:
        return TorusGrid(n, N)
    return TorusGrid(n, 32)


def _key_ids(keys):
    """Per-cube integer id of the corrector key (``-1`` for empty cubes) and the id-to-key list."""
    reps = list(dict.fromkeys(k for k in keys if k is not None))
    lookup = {k: i for i, k in enumerate(reps)}
    return np.array([lookup.get(k, -1) if k is not None else -1 for k in keys] + [-1], dtype=np.int64)[:-1], reps


def _groups(labels):
    """Yield ``(label, indices)`` for every nonnegative label, in increasing label order."""
    order = np.argsort(labels, kind="stable")
    srt = labels[order]
    cuts = np.flatnonzero(np.diff(srt)) + 1
    for chunk in np.split(order, cuts):
        if len(chunk) and labels[chunk[0]] >= 0:
            yield int(labels[chunk[0]]), chunk


def build_expansion(ubar: Field, partition: CubePartition, op: OperatorSpec, grid_cfg=None, cfg=SolverConfig()):
    """Assemble ``u2s`` (nodal) and its product-rule gradient (element-wise).

    ``grid_cfg`` is a TorusGrid, a cell count ``N`` or ``None`` (match the mesh).
    """
    m = ubar.mesh
    eps = partition.epsilon
    n = m.dim
    if op.dim != n or partition.dim != n:
        raise InvalidArgument("mesh, partition and operator dimensions must agree")
    if grid_cfg is None:
        grid = corrector_grid(m, eps, n)
    elif isinstance(grid_cfg, TorusGrid):
        grid = grid_cfg
    else:
        grid = TorusGrid(n, int(grid_cfg))
    gbar = gradient(ubar).values
    xi_q = cube_averages(partition, m, gbar)
    cache = CorrectorCache(op, grid, cfg)
    live = np.flatnonzero(np.all(np.isfinite(xi_q), axis=1))
    keys = [None] * len(partition)
    for q, k in zip(live, cache.fill(xi_q[live], labels=list(live))):
        keys[q] = k

    kid, reps = _key_ids(keys)

    # nodal u2s
    node_q = partition.locate(m.nodes)
    eta_n, _ = partition.cutoff(m.nodes, node_q)
    node_k = np.where(node_q >= 0, kid[node_q], -1)
    node_k[eta_n == 0] = -1
    phi_nodes = np.zeros(m.n_nodes)
    for k, sel in _groups(node_k):
        phi_nodes[sel], _ = _torus_eval(grid, cache.entries[reps[k]].phi.values, m.nodes[sel] / eps)
    u2s = np.asarray(ubar.values, dtype=float) + eta_n * eps * phi_nodes

    # element gradient by the product rule
    own = partition.locate(m.centroids)
    eta_e, geta_e = partition.cutoff(m.centroids, own)
    elem_k = np.where(own >= 0, kid[own], -1)
    phi_e = np.zeros(m.n_elements)
    gphi_e = np.zeros((m.n_elements, n))
    for k, sel in _groups(elem_k):
        phi_e[sel], gphi_e[sel] = _torus_eval(grid, cache.entries[reps[k]].phi.values, m.centroids[sel] / eps)
    grad = gbar + eps * phi_e[:, None] * geta_e + eta_e[:, None] * gphi_e
    return TwoScaleExpansion(
        ubar=ubar,
        partition=partition,
        xi_per_cube=xi_q,
        keys=keys,
        cache=cache,
        u2s=Field(m, u2s),
        grad_u2s=Field(m, grad, "element"),
        owner=own,
        eta=eta_e,
        grad_eta=geta_e,
        grad_phi=gphi_e,
    )


def residuals(exp: TwoScaleExpansion, op: OperatorSpec, effective, zero_sigma=False):
    """Averaged ``L^{p'}`` norms of the residual fields ``R1``, ``R2``, ``R3``.

    ``effective`` is an EffectiveTable or an interpolant; ``zero_sigma`` forces
    the flux corrector to vanish.
    """
    m = exp.mesh
    eps = exp.partition.epsilon
    n = m.dim
    interp = Interpolant(effective, "cubic") if isinstance(effective, EffectiveTable) else effective
    own = exp.owner
    has = (own >= 0) & np.isin(own, [q for q, k in enumerate(exp.keys) if k is not None])
    gbar = gradient(exp.ubar).values
    xi_e = np.zeros((m.n_elements, n))
    xi_e[has] = exp.xi_per_cube[own[has]]
    eta = np.where(has, exp.eta, 0.0)

    R1 = interp(gbar) - eta[:, None] * interp(xi_e)

    R2 = np.zeros((m.n_elements, n))
    # sigma vanishes identically for a constant coefficient
    if not zero_sigma and not op.coefficient.is_constant:
        kid, reps = _key_ids(exp.keys)
        ramp = has & np.any(exp.grad_eta != 0, axis=1)
        labels = np.where(ramp, kid[np.maximum(own, 0)], -1)
        for k, sel in _groups(labels):
            fc = solve_flux_corrector(exp.cache.entries[reps[k]], exp.cache.cfg)
            y = m.centroids[sel] / eps
            for j in range(n):
                for i in range(n):
                    if i != j:
                        s = exp.cache.grid.interpolate(fc.component(j, i).values, y)
                        R2[sel, j] -= eps * s * exp.grad_eta[sel, i]

    coeff = op.coefficient(m.centroids / eps)
    a_local = np.zeros((m.n_elements, n))
    a_local[has] = op.flux_local(coeff[has], xi_e[has] + exp.grad_phi[has])
    R3 = -(op.flux_local(coeff, exp.grad_u2s.values) - eta[:, None] * a_local)

    q = op.p / (op.p - 1.0)
    exp.residual_fields = {name: Field(m, R, "element") for name, R in (("R1", R1), ("R2", R2), ("R3", R3))}
    return {name: lq_norm(f, q, averaged=True) for name, f in exp.residual_fields.items()}


# --- error rate -----------------------------------------------------------------------


@dataclass
class RateReport:
    rungs: list
    beta_hat: float
    r_squared: float
    complete: bool
    degenerate: bool
    notes: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rungs:
            w.writerow([_fmt(r["epsilon"])] + [_fmt(r.get(c)) for c in ("error", "R1", "R2", "R3")]
                       + [_fmt(self.beta_hat), _fmt(self.r_squared)])
        return buf.getvalue()

    def to_dict(self):
        return {
            "rungs": self.rungs,
            "beta_hat": self.beta_hat,
            "r_squared": self.r_squared,
            "complete": self.complete,
            "degenerate": self.degenerate,
            "notes": list(self.notes),
        }


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def fit_rate(eps, errors):
    """Least-squares slope and R^2 of ``log e`` against ``log eps``."""
    x, y = np.log(np.asarray(eps, float)), np.log(np.asarray(errors, float))
    if len(x) < 2:
        return math.nan, math.nan
    if np.ptp(y) == 0:
        return 0.0, math.nan
    fit = linregress(x, y)
    return float(fit.slope), float(fit.rvalue**2)


def rung_mesh(domain, epsilon, cells_per_period):
    d = _domain_dict(domain)
    h = epsilon / cells_per_period
    if d["type"] == "square":
        cells = int(math.ceil(2 * d["half_width"] / h - 1e-9))
        return DirichletMesh.square(d["center"], d["half_width"], cells=cells)
    return DirichletMesh.disk(d["center"], d["radius"], h=h)


def error_rate(
    op: OperatorSpec,
    domain,
    g,
    eps_ladder,
    ell_rule=None,
    rho=None,
    cfg: SolverConfig = SolverConfig(),
    *,
    cells_per_period=16,
    table: EffectiveTable | None = None,
    zero_sigma=False,
    progress=None,
) -> RateReport:
    """Measure ``e(eps) = |grad u - grad u2s|_p / |mu + |grad u||_p`` over ``eps_ladder`` and fit ``e ~ eps^beta``.

    ``ell_rule`` is ``None`` (default rule), a fixed integer or a callable
    ``(eps, rho, n) -> ell``; ``rho`` is a number, a callable ``eps -> rho`` or
    ``None`` (one eighth of the domain radius). Failing rungs are recorded and
    mark the report incomplete.
    """
    eps_ladder = [float(e) for e in eps_ladder]
    if len(eps_ladder) < 3:
        raise InvalidArgument("eps_ladder needs at least 3 rungs")
    ratios = np.array(eps_ladder[:-1]) / np.array(eps_ladder[1:])
    if not np.allclose(ratios, 2.0, rtol=1e-9):
        raise InvalidArgument("eps_ladder must be geometric with ratio 2 (decreasing)")
    d = _domain_dict(domain)
    n = len(d["center"])
    R = domain_radius(d)
    if table is None:
        xs, pol = polar_grid(32, 32)
        table = tabulate(op, xs, TorusGrid(n, max(cells_per_period, 4)), cfg, polar=pol)
    interp = Interpolant(table, "cubic")
    rungs, notes = [], []
    for eps in eps_ladder:
        r_eps = (rho(eps) if callable(rho) else rho) if rho is not None else R / 8
        if ell_rule is None:
            ell = default_ell(eps, r_eps, n)
        elif callable(ell_rule):
            ell = ell_rule(eps, r_eps, n)
        else:
            ell = int(ell_rule)
        row = {"epsilon": eps, "rho": r_eps, "ell": ell, "status": "ok"}
        try:
            if ell is None:
                raise InvalidArgument(
                    f"admissibility violated: no ell >= 2 with sqrt(n)*ell*eps < rho "
                    f"(sqrt(n)*2*eps = {math.sqrt(n) * 2 * eps:.4g}, rho = {r_eps:.4g})"
                )
            part = build_partition(d, eps, ell, r_eps)
            mesh = rung_mesh(d, eps, cells_per_period)
            u = solve_oscillating(BVProblem(op, mesh, eps, g, cells_per_period=cells_per_period), cfg)
            ubar = solve_effective(BVProblem(table, mesh, g=g, interpolation="cubic"), cfg)
            exp = build_expansion(ubar, part, op, None, cfg)
            res = residuals(exp, op, interp, zero_sigma=zero_sigma)
            du = gradient(u).values
            num = lq_norm(Field(mesh, du - exp.grad_u2s.values, "element"), op.p)
            den = lq_norm(Field(mesh, op.mu + np.linalg.norm(du, axis=1), "element"), op.p)
            naive = lq_norm(Field(mesh, du - gradient(ubar).values, "element"), op.p)
            row.update(
                error=num / den,
                naive_error=naive / den,
                cubes=len(part),
                correctors=exp.cache.solves,
                cache_hits=exp.cache.hits,
                **res,
            )
        except HomogLabError as exc:
            row.update(status=f"failed: {exc}", error=math.nan)
            notes.append(f"eps={eps:g}: {exc}")
        rungs.append(row)
        if progress is not None:
            progress(row)
    good = [r for r in rungs if r["status"] == "ok"]
    complete = len(good) == len(rungs)
    errs = [r["error"] for r in good]
    degenerate = op.coefficient.is_constant or (
        len(errs) >= 2 and (min(errs) <= 0 or np.ptp(np.log(errs)) < math.log(1.1))
    )
    if len(good) >= 2 and min(errs) > 0:
        beta, r2 = fit_rate([r["epsilon"] for r in good], errs)
    else:
        beta, r2 = math.nan, math.nan
    if degenerate:
        notes.append("fit degenerate: errors do not vary across the ladder")
    return RateReport(rungs, beta, r2, complete, bool(degenerate), notes)
