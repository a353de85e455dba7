"""Dirichlet problems for ``div a(x/eps, grad u) = div F`` and for the effective equation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .effective import EffectiveTable, Interpolant
from .errors import InvalidArgument
from .grid import Ball, DirichletMesh, Field, gradient, integral_mean, lq_norm
from .operators import OperatorSpec
from .solver import NonlinearProblem, SolverConfig, operator_local, solve
from .vcalc import ExponentParams, v_eval

BOUNDARY_KINDS = ("affine", "trig", "constant", "nodal")
RHS_KINDS = ("zero", "constant", "manufactured")
MEYERS_EXPONENTS = (1.05, 1.1, 1.2)
FD_STEP = 1e-6


def manufactured_u(x):
    return np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])


def manufactured_grad(x):
    s0, s1 = np.sin(np.pi * x[..., 0]), np.sin(np.pi * x[..., 1])
    c0, c1 = np.cos(np.pi * x[..., 0]), np.cos(np.pi * x[..., 1])
    return np.pi * np.stack([c0 * s1, s0 * c1], axis=-1)


def boundary_values(g, nodes):
    """Evaluate a boundary tag (dict), a nodal trace or a Field at ``nodes``."""
    if isinstance(g, Field):
        return np.asarray(g.values, dtype=float)
    if isinstance(g, dict):
        kind = g.get("kind")
        if kind == "constant":
            return np.full(len(nodes), float(g.get("value", 0.0)))
        if kind == "affine":
            slope = np.asarray(g.get("slope", [1.0] + [0.0] * (nodes.shape[1] - 1)), dtype=float)
            if slope.shape != (nodes.shape[1],):
                raise InvalidArgument("boundary.slope must have one entry per dimension")
            return nodes @ slope + float(g.get("offset", 0.0))
        if kind == "trig":
            k = np.asarray(g.get("k", [1.0] * nodes.shape[1]), dtype=float)
            return float(g.get("amplitude", 1.0)) * np.sin(2 * np.pi * nodes @ k + float(g.get("phase", 0.0)))
        if kind == "nodal":
            return np.asarray(g["values"], dtype=float)
        raise InvalidArgument(f"boundary.kind: unknown boundary kind {kind!r}; expected one of {list(BOUNDARY_KINDS)}")
    return np.asarray(g, dtype=float)


@dataclass
class BVProblem:
    """Dirichlet problem on ``mesh``; ``operator`` is an OperatorSpec or an EffectiveTable.

    ``rhs`` is ``None``, an element-wise (Ne, n) array, or a tag dict. The tag
    ``{"kind": "manufactured"}`` builds ``F = a(x/eps, grad u*)`` for
    ``u* = sin(pi x1) sin(pi x2)`` (oscillating problems only).
    """

    operator: OperatorSpec | EffectiveTable
    mesh: DirichletMesh
    epsilon: float = 1.0
    g: object = field(default_factory=lambda: {"kind": "constant", "value": 0.0})
    rhs: object = None
    cells_per_period: int = 8
    phase: tuple | None = None
    interpolation: str = "cubic"

    def __post_init__(self):
        if self.oscillating:
            if not self.epsilon > 0:
                raise InvalidArgument("epsilon must be positive")
            if self.cells_per_period < 1:
                raise InvalidArgument("cells_per_period must be >= 1")
            if not self.operator.coefficient.is_constant:
                per = self.epsilon / self.mesh.h
                if per < self.cells_per_period * (1 - 1e-9):
                    raise InvalidArgument(
                        f"mesh does not resolve epsilon: {per:.3g} cells per period < required {self.cells_per_period}"
                    )
        elif isinstance(self.rhs, dict) and self.rhs.get("kind") == "manufactured":
            raise InvalidArgument("manufactured right-hand sides need an oscillating operator")

    @property
    def oscillating(self):
        return isinstance(self.operator, OperatorSpec)

    @property
    def dim(self):
        return self.mesh.dim

    def coefficient(self):
        y = self.mesh.centroids / self.epsilon
        if self.phase is not None:
            y = y + np.asarray(self.phase, dtype=float)
        return self.operator.coefficient(y)

    def rhs_field(self, coeff=None):
        m = self.mesh
        F = self.rhs
        if F is None:
            return None
        if isinstance(F, Field):
            return np.asarray(F.at_centroids(), dtype=float)
        if isinstance(F, dict):
            kind = F.get("kind")
            if kind == "zero":
                return None
            if kind == "constant":
                return np.broadcast_to(np.asarray(F["value"], dtype=float), (m.n_elements, m.dim)).copy()
            if kind == "manufactured":
                if m.dim != 2:
                    raise InvalidArgument("the manufactured solution is two-dimensional")
                c = self.coefficient() if coeff is None else coeff
                return self.operator.flux_local(c, manufactured_grad(m.centroids))
            raise InvalidArgument(f"rhs.kind: unknown right-hand side kind {kind!r}; expected one of {list(RHS_KINDS)}")
        F = np.asarray(F, dtype=float)
        if F.shape != (m.n_elements, m.dim):
            raise InvalidArgument("rhs must be an element-wise (elements, dim) array")
        return F

    def initial_guess(self):
        """Closed-form tags extend to the interior; traces start from zero inside."""
        m = self.mesh
        vals = boundary_values(self.g, m.nodes[m.boundary] if _trace_only(self.g) else m.nodes)
        u0 = np.zeros(m.n_nodes)
        if _trace_only(self.g):
            if vals.shape[0] == m.n_nodes:
                u0[m.boundary] = vals[m.boundary]
            elif vals.shape[0] == len(m.boundary):
                u0[m.boundary] = vals
            else:
                raise InvalidArgument("nodal boundary data must hold one value per node or per boundary node")
        else:
            u0 = vals.astype(float).copy()
        if isinstance(self.rhs, dict) and self.rhs.get("kind") == "manufactured":
            u0[m.interior_nodes()] = manufactured_u(m.nodes[m.interior_nodes()])
        return u0


def _trace_only(g):
    return isinstance(g, Field) or not isinstance(g, dict) or g.get("kind") == "nodal"


def solve_oscillating(prob: BVProblem, cfg: SolverConfig = SolverConfig()) -> Field:
    """Discrete weak solution of ``div a(x/eps, grad u) = div F`` with trace ``g``."""
    if not prob.oscillating:
        raise InvalidArgument("solve_oscillating needs an OperatorSpec operator")
    op = prob.operator
    coeff = prob.coefficient()
    F = prob.rhs_field(coeff)

    def problem(o):
        return NonlinearProblem(prob.mesh, coeff, operator_local(o), prob.mesh.boundary, rhs=F)

    from .cell import _degenerate, regularized

    cont = (lambda mu: problem(regularized(op, mu))) if _degenerate(op) else None
    u, info = solve(problem(op), prob.initial_guess(), cfg, continuation=cont)
    out = Field(prob.mesh, u)
    out.info = info
    return out


def effective_local(interp: Interpolant):
    """``local`` callback for the effective flux with a central finite-difference Jacobian."""

    def local(c, z, want):
        a = interp(z)
        jac = None
        if want in ("jacobian", "secant"):
            n = z.shape[1]
            h = FD_STEP * np.maximum(np.linalg.norm(z, axis=1), 1e-3)
            jac = np.empty((len(z), n, n))
            for k in range(n):
                dz = np.zeros_like(z)
                dz[:, k] = h
                jac[:, :, k] = (interp(z + dz) - interp(z - dz)) / (2 * h[:, None])
            jac = 0.5 * (jac + np.transpose(jac, (0, 2, 1)))
        return a, (jac if want == "jacobian" else None), (jac if want == "secant" else None)

    return local


def solve_effective(prob: BVProblem, cfg: SolverConfig = SolverConfig()) -> Field:
    """Discrete solution of ``div abar(grad u) = div F`` with the interpolated effective flux."""
    if prob.oscillating:
        raise InvalidArgument("solve_effective needs an EffectiveTable operator")
    interp = Interpolant(prob.operator, prob.interpolation)
    F = prob.rhs_field()
    m = prob.mesh
    nl = NonlinearProblem(m, np.ones(m.n_elements), effective_local(interp), m.boundary, rhs=F)
    u, info = solve(nl, prob.initial_guess(), cfg)
    check = Interpolant(prob.operator, prob.interpolation)
    check(gradient(Field(m, u)).values)
    frac = check.extrapolated / max(check.evaluated, 1)
    if frac > 0.01:
        info.warnings.append(f"effective flux extrapolated on {100 * frac:.1f}% of elements")
    out = Field(m, u)
    out.info = info
    out.extrapolated_fraction = frac
    return out


# --- energy audit -------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyReport:
    energy: float | None
    caccioppoli: float
    v_caccioppoli: float
    meyers: dict
    sides: dict

    def to_dict(self):
        return {
            "energy": self.energy,
            "caccioppoli": self.caccioppoli,
            "v_caccioppoli": self.v_caccioppoli,
            "meyers": {str(k): v for k, v in self.meyers.items()},
            "sides": self.sides,
        }


def _ratio(left, right):
    if left == 0:
        return 0.0
    return left / right if right > 0 else math.inf


def energy_audit(u: Field, w: Field | None, F, region: Ball, params: ExponentParams, rho=0.5) -> EnergyReport:
    """Realized constants of the energy, Caccioppoli, V-Caccioppoli and Meyers inequalities on ``region``.

    ``F`` is an element-wise array or ``None``. The V-Caccioppoli form uses
    ``V`` with ``mu = 1``. Meyers uses the inner ball ``rho * region``.
    """
    m = u.mesh
    p, mu = params.p, params.mu
    n = m.dim
    r = region.radius
    half = region.scaled(0.5)
    inner = region.scaled(rho)
    du = gradient(u).values
    g_mag = Field(m, mu + np.linalg.norm(du, axis=1), "element")
    norm_B = lq_norm(g_mag, p, region, averaged=True)
    sides = {"mu_plus_grad_u_Lp_B": norm_B}

    energy = None
    if w is not None:
        dw = gradient(w).values
        left = lq_norm(Field(m, mu + np.linalg.norm(dw, axis=1), "element"), p, region, averaged=True)
        energy = _ratio(left, norm_B)
        sides["mu_plus_grad_w_Lp_B"] = left

    b = integral_mean(u, region)
    osc = lq_norm(Field(m, u.values - b), p, region, averaged=True)
    f_term = 0.0
    if F is not None:
        F = np.asarray(F, dtype=float)
        f_term = lq_norm(Field(m, F, "element"), p / (p - 1.0), region, averaged=True) ** (1.0 / (p - 1.0))
    c_left = lq_norm(g_mag, p, half, averaged=True)
    c_right = mu + osc / r + f_term
    sides.update(caccioppoli_left=c_left, caccioppoli_right=c_right)

    P1 = ExponentParams(p, 1.0)
    v_grad = Field(m, np.linalg.norm(v_eval(du, P1), axis=1), "element")
    vl = lq_norm(v_grad, 2, half, averaged=True)
    scal = ((u.at_centroids() - b) / r)[:, None]
    vr = lq_norm(Field(m, np.abs(v_eval(scal, P1)[:, 0]), "element"), 2, region, averaged=True)
    sides.update(v_caccioppoli_left=vl, v_caccioppoli_right=vr)

    meyers = {}
    grad_mag = Field(m, np.linalg.norm(du, axis=1), "element")
    for k in MEYERS_EXPONENTS:
        left = lq_norm(grad_mag, k * p, inner, averaged=True)
        right = (1 - rho) ** ((n / p) * (1 / k - 1)) * norm_B
        meyers[k] = _ratio(left, right)
    return EnergyReport(energy, _ratio(c_left, c_right), _ratio(vl, vr), meyers, sides)
