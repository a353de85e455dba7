"""Cell problems on the unit torus: correctors ``phi_xi`` and flux correctors ``sigma_xi``."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgument
from .grid import Field, TorusGrid, gradient, write_field_binary
from .operators import OperatorSpec
from .solver import NonlinearProblem, SolverConfig, operator_local, solve
from .vcalc import ExponentParams, v_eval

__all__ = [
    "SolverConfig",
    "CorrectorSolution",
    "FluxCorrector",
    "BoundsReport",
    "solve_corrector",
    "solve_flux_corrector",
    "corrector_bounds_report",
    "laminate_aligned",
]


@dataclass(frozen=True)
class CorrectorSolution:
    xi: np.ndarray
    phi: Field
    F: Field
    flux: Field
    residual_norm: float
    iterations: int
    op: OperatorSpec = field(repr=False, default=None)
    history: tuple = ()
    warnings: tuple = ()

    @property
    def grid(self) -> TorusGrid:
        return self.phi.mesh

    def mean_flux(self):
        """Quadrature mean of the flux: the effective flux at ``xi``."""
        m = self.grid
        return (m.vol @ self.flux.values) / m.measure

    def diagnostics(self):
        return {
            "xi": [float(v) for v in self.xi],
            "N": self.grid.N,
            "dim": self.grid.dim,
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
            "residual_history": [float(r) for r in self.history],
            "mean_flux": [float(v) for v in self.mean_flux()],
            "phi_mean": float(np.mean(self.phi.values)),
            "warnings": list(self.warnings),
            "operator": None if self.op is None else self.op.to_dict(),
        }

    def export(self, directory, stem="corrector"):
        """Write ``phi`` in the binary field format plus a JSON diagnostics sidecar."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_field_binary(self.phi, d / f"{stem}_phi.bin")
        (d / f"{stem}.json").write_text(json.dumps(self.diagnostics(), indent=2, sort_keys=True) + "\n")
        return d / f"{stem}.json"


def laminate_aligned(coefficient, N):
    """True when every laminate breakpoint falls on a grid line of the ``N``-grid."""
    for b in coefficient.breakpoints if coefficient.kind == "laminate" else ():
        if Fraction(b).limit_denominator(10**6) * N % 1 != 0:
            return False
    if coefficient.kind == "checkerboard" and N % 2:
        return False
    return True


def _degenerate(op):
    return op.family != "linear-matrix" and op.p != 2 and (op.family == "p-laplace" or op.mu == 0)


def regularized(op: OperatorSpec, mu: float) -> OperatorSpec:
    """Same operator with regularisation ``mu`` (the pure p-Laplacian becomes the regularised one)."""
    fam = "regularized-p-laplace" if op.family == "p-laplace" else op.family
    return replace(op, family=fam, params=replace(op.params, mu=mu))


def solve_corrector(op: OperatorSpec, xi, grid: TorusGrid, cfg: SolverConfig = SolverConfig(), phi0=None):
    """Periodic mean-zero discrete solution of ``div a(y, xi + grad phi) = 0``."""
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (op.dim,) or grid.dim != op.dim:
        raise InvalidArgument("xi, grid and operator dimensions must agree")
    if not np.all(np.isfinite(xi)):
        raise InvalidArgument("xi must be finite")
    coeff = op.coefficient(grid.centroids)
    warnings = []
    if not laminate_aligned(op.coefficient, grid.N):
        warnings.append("coefficient jumps are not aligned with grid lines")

    def problem(o):
        return NonlinearProblem(grid, coeff, operator_local(o), fixed=[0], shift=xi, periodic_mean=True)

    u0 = np.zeros(grid.n_nodes) if phi0 is None else np.asarray(phi0, dtype=float)
    cont = (lambda mu: problem(regularized(op, mu))) if _degenerate(op) else None
    u, info = solve(problem(op), u0, cfg, continuation=cont)
    u = u - u.mean()
    phi = Field(grid, u)
    F = Field(grid, xi + gradient(phi).values, "element")
    flux = Field(grid, op.flux_local(coeff, F.values), "element")
    return CorrectorSolution(
        xi=xi,
        phi=phi,
        F=F,
        flux=flux,
        residual_norm=info.residual,
        iterations=info.iterations,
        op=op,
        history=tuple(info.history),
        warnings=tuple(warnings + info.warnings),
    )


# --- flux corrector ------------------------------------------------------------


def _mass_matrix(grid):
    k = grid.dim + 1
    loc = (np.ones((k, k)) + np.eye(k)) / ((k) * (k + 1))
    el = grid.elements
    rows = np.repeat(el, k, axis=1).ravel()
    cols = np.tile(el, (1, k)).ravel()
    data = (grid.vol[:, None, None] * loc).ravel()
    return sp.csc_matrix((data, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))


def l2_project(grid, elem_values):
    """L2 projection of element-wise constant data onto P1 nodal values."""
    elem_values = np.asarray(elem_values, dtype=float)
    k = grid.dim + 1
    w = grid.vol[:, None] / k
    cols = elem_values.reshape(grid.n_elements, -1)
    rhs = np.stack([np.bincount(grid.elements.ravel(), np.repeat(w * c[:, None], k, axis=1).ravel(), grid.n_nodes)
                    for c in cols.T], axis=1)
    lu = spla.splu(_mass_matrix(grid))
    out = lu.solve(rhs)
    return out.reshape((grid.n_nodes,) + elem_values.shape[1:])


def _wavenumbers(grid):
    N, n = grid.N, grid.dim
    k = 2 * np.pi * np.fft.fftfreq(N, d=1.0 / N)
    kd = k.copy()
    if N % 2 == 0:
        kd[N // 2] = 0.0  # Nyquist mode carries no odd derivative
    ks = np.meshgrid(*([kd] * n), indexing="ij")
    k2 = sum(kk**2 for kk in np.meshgrid(*([k] * n), indexing="ij"))
    return ks, k2


def _to_lattice(grid, nodal):
    # node ordering of TorusGrid is C-order over the multi-index
    return nodal.reshape((grid.N,) * grid.dim + nodal.shape[1:])


@dataclass(frozen=True)
class FluxCorrector:
    """Skew flux corrector with only the strictly upper triangle stored.

    ``upper[(j, k)]`` holds nodal values of ``sigma_jk`` for ``j < k``.
    """

    upper: dict
    J: Field
    J_nodes: np.ndarray
    identity_error: float
    identity_errors: tuple
    divergence_part: float
    exact_mode: bool = False

    @property
    def grid(self):
        return self.J.mesh

    @property
    def dim(self):
        return self.grid.dim

    def component(self, j, k):
        if j == k:
            return Field(self.grid, np.zeros(self.grid.n_nodes))
        if j < k:
            return Field(self.grid, self.upper[(j, k)])
        return Field(self.grid, -self.upper[(k, j)])

    @property
    def sigma(self):
        n = self.dim
        return [[self.component(j, k) for k in range(n)] for j in range(n)]

    def divergence(self):
        """Nodal ``-sum_k d_k sigma_jk`` by spectral differentiation, shape (nodes, n)."""
        ks, _ = _wavenumbers(self.grid)
        n = self.dim
        out = np.zeros((self.grid.n_nodes, n))
        for j in range(n):
            acc = 0
            for k in range(n):
                if j == k:
                    continue
                s_hat = np.fft.fftn(_to_lattice(self.grid, self.component(j, k).values))
                acc = acc - 1j * ks[k] * s_hat
            out[:, j] = np.real(np.fft.ifftn(acc)).ravel()
        return out

    def to_dict(self):
        return {
            "identity_error": self.identity_error,
            "identity_errors": list(self.identity_errors),
            "divergence_part": self.divergence_part,
            "exact_mode": self.exact_mode,
            "sigma_max": {f"{j},{k}": float(np.abs(v).max()) for (j, k), v in sorted(self.upper.items())},
        }


def solve_flux_corrector(sol: CorrectorSolution, cfg: SolverConfig = SolverConfig()) -> FluxCorrector:
    """Spectral solve of ``-Lap sigma_jk = d_k J_j - d_j J_k`` with ``J = flux - mean flux``."""
    grid = sol.grid
    n = grid.dim
    J = sol.flux.values - sol.mean_flux()
    Jn = l2_project(grid, J)
    Jn -= Jn.mean(axis=0)
    ks, k2 = _wavenumbers(grid)
    k2 = k2.copy()
    k2.flat[0] = 1.0
    J_hat = [np.fft.fftn(_to_lattice(grid, Jn[:, j])) for j in range(n)]
    kJ = sum(ks[k] * J_hat[k] for k in range(n))
    grad_part = [ks[j] * kJ / k2 for j in range(n)]  # gradient (divergence-carrying) part of J
    if cfg.sigma_divergence_exact:
        J_hat = [J_hat[j] - grad_part[j] for j in range(n)]
    upper = {}
    for j in range(n):
        for k in range(j + 1, n):
            rhs = 1j * ks[k] * J_hat[j] - 1j * ks[j] * J_hat[k]
            s_hat = rhs / k2
            s_hat.flat[0] = 0.0
            upper[(j, k)] = np.real(np.fft.ifftn(s_hat)).ravel()
    div_part = np.stack([np.real(np.fft.ifftn(g)).ravel() for g in grad_part], axis=1)
    fc = FluxCorrector(upper, Field(grid, J, "element"), Jn, 0.0, (), float(_rms(div_part)), cfg.sigma_divergence_exact)
    recon = fc.divergence()
    # fluctuations below the solver tolerance are indistinguishable from J = 0
    floor = cfg.tol * max(float(np.linalg.norm(sol.mean_flux())), _rms(sol.flux.values))

    def rel(num, den):
        return 0.0 if num <= floor else (num / den if den > 0 else math.inf)

    errs = [rel(_rms(recon[:, j] - Jn[:, j]), _rms(Jn[:, j])) for j in range(n)]
    err = rel(_rms(recon - Jn), _rms(Jn))
    return replace(fc, identity_error=float(err), identity_errors=tuple(float(e) for e in errs))


def _rms(a):
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a * a) * (a.shape[1] if a.ndim == 2 else 1)))


# --- bounds -----------------------------------------------------------------------


@dataclass(frozen=True)
class BoundsReport:
    xi: tuple
    natural_left: float
    natural_right: float
    natural_ratio: float
    controlled_left: float | None
    controlled_right: float | None
    controlled_ratio: float | None
    phi_part: float

    def to_dict(self):
        return dict(self.__dict__, xi=list(self.xi))


def _int(grid, vals):
    return float(grid.vol @ vals)


def corrector_bounds_report(sol: CorrectorSolution, fluxcor: FluxCorrector) -> BoundsReport:
    """Both sides of the natural corrector bound and, for ``mu = 1``, the controlled V-bound."""
    grid = sol.grid
    op = sol.op
    p, mu = op.p, op.mu
    q = p / (p - 1.0)
    phi_e = sol.phi.at_centroids()
    dphi = gradient(sol.phi).values
    phi_part = _int(grid, np.abs(phi_e) ** p) + _int(grid, np.linalg.norm(dphi, axis=1) ** p)
    sig_part = 0.0
    sig_nodes = [v for _, v in sorted(fluxcor.upper.items())]
    for v in sig_nodes:
        f = Field(grid, v)
        # each stored entry appears twice in the matrix norm
        sig_part += 2 * (_int(grid, np.abs(f.at_centroids()) ** q) + _int(grid, np.linalg.norm(gradient(f).values, axis=1) ** q))
    xi_n = float(np.linalg.norm(sol.xi))
    left = phi_part + sig_part
    right = (mu + xi_n) ** p
    ratio = left / right if right > 0 else (0.0 if left == 0 else math.inf)
    c_left = c_right = c_ratio = None
    if mu == 1.0:
        P = ExponentParams(p, 1.0)
        Q = ExponentParams(q, 1.0)

        def v2(vals, prm):
            vals = np.asarray(vals, dtype=float)
            vals = vals[:, None] if vals.ndim == 1 else vals
            return np.sum(v_eval(vals, prm) ** 2, axis=1)

        c_left = _int(grid, v2(phi_e, P)) + _int(grid, v2(dphi, P))
        for v in sig_nodes:
            f = Field(grid, v)
            c_left += 2 * (_int(grid, v2(f.at_centroids(), Q)) + _int(grid, v2(gradient(f).values, Q)))
        c_right = float(np.sum(v_eval(sol.xi, P) ** 2))
        c_ratio = c_left / c_right if c_right > 0 else (0.0 if c_left == 0 else math.inf)
    return BoundsReport(tuple(float(v) for v in sol.xi), left, right, ratio, c_left, c_right, c_ratio, phi_part)
