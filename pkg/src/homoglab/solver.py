"""P1 finite-element assembly and Newton / Kacanov iterations for ``-div a(x, G + grad u) = -div F``.

The discrete residual at node ``i`` is ``sum_e |e| (a_e - F_e) . grad lambda_{e,i}``
with ``a_e`` evaluated at the element gradient (one-point quadrature).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import InvalidArgument, SolverFailure

log = logging.getLogger(__name__)

DIRECT_LIMIT = 250_000


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iters: int = 50
    damping: float = 1.0
    continuation: bool = True
    sigma_divergence_exact: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.tol > 0 or self.max_iters < 1 or not 0 < self.damping <= 1:
            raise InvalidArgument("need tol > 0, max_iters >= 1 and 0 < damping <= 1")
        if self.workers < 1:
            raise InvalidArgument("workers must be >= 1")

    @classmethod
    def from_dict(cls, d, path="solver"):
        allowed = {"tol", "max_iters", "damping", "continuation", "sigma_divergence_exact", "workers"}
        extra = sorted(set(d) - allowed)
        if extra:
            raise InvalidArgument(f"{path}.{extra[0]}: unknown key")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidArgument(f"{path}: {exc}") from None

    def to_dict(self):
        return {
            "tol": self.tol,
            "max_iters": self.max_iters,
            "damping": self.damping,
            "continuation": self.continuation,
            "sigma_divergence_exact": self.sigma_divergence_exact,
        }


class Assembler:
    """Sparsity pattern and scatter maps for a mesh with a set of free nodes.

    ``fixed`` lists nodes excluded from the linear systems (Dirichlet nodes, or
    one pinned node on the torus).
    """

    def __init__(self, mesh, fixed):
        self.mesh = mesh
        nn = mesh.n_nodes
        self.fixed = np.asarray(fixed, dtype=np.int64)
        free = np.ones(nn, dtype=bool)
        free[self.fixed] = False
        self.free = np.flatnonzero(free)
        red = -np.ones(nn, dtype=np.int64)
        red[self.free] = np.arange(len(self.free))
        el = mesh.elements
        k = el.shape[1]
        rows = np.repeat(el, k, axis=1).ravel()
        cols = np.tile(el, (1, k)).ravel()
        rr, cc = red[rows], red[cols]
        keep = (rr >= 0) & (cc >= 0)
        self._keep = keep
        nf = len(self.free)
        keys = rr[keep] * nf + cc[keep]
        uniq, self._inv = np.unique(keys, return_inverse=True)
        r_u = uniq // nf
        self._indices = (uniq % nf).astype(np.int32)
        self._indptr = np.searchsorted(r_u, np.arange(nf + 1)).astype(np.int32)
        self._nnz = len(uniq)
        self.n_free = nf

    def vector(self, elem_vec):
        """Nodal vector ``sum_e |e| elem_vec_e . grad lambda_{e,i}`` on all nodes."""
        m = self.mesh
        contrib = np.einsum("ekd,ed->ek", m.grads, elem_vec) * m.vol[:, None]
        return np.bincount(m.elements.ravel(), contrib.ravel(), minlength=m.n_nodes)

    def abs_vector(self, elem_mag):
        m = self.mesh
        contrib = np.linalg.norm(m.grads, axis=2) * (m.vol * elem_mag)[:, None]
        return np.bincount(m.elements.ravel(), contrib.ravel(), minlength=m.n_nodes)

    def matrix(self, elem_mat):
        """Reduced stiffness ``sum_e |e| grad lambda_i^T M_e grad lambda_j`` on free nodes."""
        m = self.mesh
        loc = np.einsum("eid,edf,ejf->eij", m.grads, elem_mat, m.grads) * m.vol[:, None, None]
        data = np.bincount(self._inv, loc.ravel()[self._keep], minlength=self._nnz)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_free, self.n_free))


def linear_solve(K, b, spd=True):
    """Direct sparse LU for moderate sizes, AMG-preconditioned CG above."""
    if K.shape[0] == 0:
        return np.zeros(0)
    if K.shape[0] <= DIRECT_LIMIT or not spd:
        return spla.spsolve(K.tocsc(), b, permc_spec="MMD_AT_PLUS_A")
    import pyamg

    # local (Gershgorin) weighting: the default spectral-radius estimate starts from a random vector
    ml = pyamg.smoothed_aggregation_solver(K, symmetry="symmetric", smooth=("jacobi", {"omega": 4.0 / 3.0, "weighting": "local"}))
    resid = []
    x = ml.solve(b, tol=1e-13, accel="cg", maxiter=400, residuals=resid)
    return x


@dataclass
class SolveInfo:
    iterations: int = 0
    residual: float = math.inf
    history: list = field(default_factory=list)
    methods: list = field(default_factory=list)
    converged: bool = False
    warnings: list = field(default_factory=list)


class NonlinearProblem:
    """``sum_e |e| (a_e(G_e + grad u) - F_e) . grad v = 0`` for free nodal values of ``u``.

    ``local(c, z)`` must return ``(flux, jacobian, secant)`` for element
    coefficients ``c`` and gradients ``z``.
    """

    def __init__(self, mesh, coeff, local, fixed, shift=None, rhs=None, periodic_mean=False):
        self.mesh = mesh
        self.coeff = np.asarray(coeff, dtype=float)
        self.local = local
        self.asm = Assembler(mesh, fixed)
        n = mesh.dim
        self.shift = np.zeros((mesh.n_elements, n)) if shift is None else np.broadcast_to(shift, (mesh.n_elements, n))
        self.rhs = None if rhs is None else np.asarray(rhs, dtype=float)
        self.periodic_mean = periodic_mean

    def gradients(self, u):
        m = self.mesh
        return self.shift + np.einsum("ekd,ek->ed", m.grads, u[m.elements])

    def residual(self, u, want="flux"):
        z = self.gradients(u)
        a, jac, sec = self.local(self.coeff, z, want)
        r_el = a if self.rhs is None else a - self.rhs
        r = self.asm.vector(r_el)[self.asm.free]
        mag = np.linalg.norm(a, axis=1) + (0 if self.rhs is None else np.linalg.norm(self.rhs, axis=1))
        scale = np.linalg.norm(self.asm.abs_vector(mag)[self.asm.free])
        return r, scale, jac, sec

    def rel(self, r, scale):
        nr = float(np.linalg.norm(r))
        if nr == 0.0:
            return 0.0
        return nr / scale if scale > 0 else math.inf

    def _project(self, u):
        if self.periodic_mean:
            u = u - u.mean()  # uniform torus: nodal mean equals the P1 integral mean
        return u


def newton(problem: NonlinearProblem, u0, cfg: SolverConfig, info: SolveInfo | None = None):
    """Damped Newton with backtracking on the residual norm; Kacanov steps when Newton stalls."""
    info = info or SolveInfo()
    u = problem._project(np.array(u0, dtype=float))
    free = problem.asm.free
    r, scale, _, _ = problem.residual(u, "none")
    rel = problem.rel(r, scale)
    info.history.append(rel)
    mode = "newton"
    stalls = 0
    for it in range(cfg.max_iters):
        if rel <= cfg.tol:
            info.converged = True
            break
        _, _, jac, sec = problem.residual(u, "secant" if mode == "kacanov" else "jacobian")
        K = problem.asm.matrix(sec if mode == "kacanov" else jac)
        try:
            du = linear_solve(K, -r)
        except RuntimeError as exc:  # singular factorisation
            info.warnings.append(f"linear solve failed: {exc}")
            du = None
        if du is None or not np.all(np.isfinite(du)):
            if mode == "kacanov":
                break
            mode = "kacanov"
            continue
        step = np.zeros_like(u)
        step[free] = du
        t = cfg.damping
        accepted = False
        nr0 = np.linalg.norm(r)
        for _ in range(40):
            trial = problem._project(u + t * step)
            r_t, s_t, _, _ = problem.residual(trial, "none")
            if np.all(np.isfinite(r_t)) and np.linalg.norm(r_t) < nr0:
                accepted = True
                break
            t *= 0.5
        info.iterations = it + 1
        if not accepted:
            stalls += 1
            if mode == "newton":
                log.debug("newton stalled at %g, switching to Kacanov", rel)
                mode = "kacanov"
                continue
            break
        u, r, scale = trial, r_t, s_t
        rel = problem.rel(r, scale)
        info.history.append(rel)
        info.methods.append(mode)
        if mode == "kacanov" and t == cfg.damping and stalls < 3:
            # Kacanov made full progress: try Newton again
            mode = "newton"
    info.residual = rel
    info.converged = rel <= cfg.tol
    return u, info


def solve(problem: NonlinearProblem, u0, cfg: SolverConfig, continuation=None):
    """Newton solve with optional regularisation continuation as a fallback.

    ``continuation`` is a callable ``mu -> NonlinearProblem`` producing
    regularised problems; it is used only when the direct solve fails.
    """
    u, info = newton(problem, u0, cfg)
    if info.converged:
        return u, info
    if continuation is not None and cfg.continuation:
        info.warnings.append("direct solve failed; using regularisation continuation")
        v = np.array(u0, dtype=float)
        mu = 1.0
        while mu >= 1e-6:
            v, sub = newton(continuation(mu), v, replace(cfg, max_iters=max(cfg.max_iters, 30)))
            info.history.extend(sub.history)
            mu *= 0.5
        u, final = newton(problem, v, cfg)
        info.history.extend(final.history)
        info.methods.extend(["continuation"] + final.methods)
        info.iterations += final.iterations
        info.residual = final.residual
        info.converged = final.converged
    if not info.converged:
        raise SolverFailure(
            f"nonlinear solve did not converge: relative residual {info.residual:.3e} > tol {cfg.tol:.1e}",
            residual=info.residual,
            iterations=info.iterations,
        )
    return u, info


def operator_local(op, want_default=None):
    """Adapter turning an :class:`OperatorSpec` into a ``local`` callback."""

    def local(c, z, want):
        a = op.flux_local(c, z)
        jac = op.jacobian_local(c, z) if want == "jacobian" else None
        sec = op.secant_local(c, z) if want == "secant" else None
        return a, jac, sec

    return local
