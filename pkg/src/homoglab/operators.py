"""Periodic monotone fluxes ``a(y, xi)`` and statistical checks of their structure.

Every flux factors as ``c(y) * f(xi)`` with a scalar periodic coefficient
``c`` and a family-specific vector map ``f``. Jacobians ``df/dxi`` are coded
by hand for each family and a secant ("frozen coefficient") matrix ``S`` with
``f(xi) = S(xi) xi`` is provided for Kacanov iterations.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .vcalc import ExponentParams, safe_pow

FAMILIES = {
    "linear-matrix": "c(y) M xi with a constant symmetric positive definite matrix M (p = 2)",
    "p-laplace": "c(y) |xi|^(p-2) xi (degenerate, mu does not enter the flux)",
    "regularized-p-laplace": "c(y) (mu + |xi|)^(p-2) xi",
    "orthotropic": "c(y) sum_i (mu + |xi_i|)^(p-2) xi_i e_i",
    "finsler": "c(y) (mu + N)^(p-2) N grad N(xi) with N(xi) = (sum_i w_i |xi_i|^s)^(1/s)",
}

COEFFICIENT_KINDS = {
    "constant": "single value",
    "laminate": "piecewise constant in one coordinate, interior breakpoints in (0, 1)",
    "checkerboard": "two values on the 2x2 checkerboard of the unit cell",
    "trig-polynomial": "mean + sum a cos(2 pi k.y) + b sin(2 pi k.y), clipped to bounds",
}

# Jacobians of degenerate families are evaluated with magnitudes floored here
JAC_FLOOR = 1e-12


@dataclass(frozen=True)
class CoefficientField:
    """Scalar Y-periodic coefficient.

    ``values`` holds the constant, the laminate phase values (one more than the
    breakpoints) or the two checkerboard values. ``terms`` holds trig-polynomial
    triples ``(k, a, b)`` with ``k`` an integer wave vector; ``mean`` is its
    constant term.
    """

    kind: str
    values: tuple = (1.0,)
    direction: int = 0
    breakpoints: tuple = ()
    terms: tuple = ()
    mean: float = 1.0
    bounds: tuple | None = None

    def __post_init__(self):
        if self.kind not in COEFFICIENT_KINDS:
            raise InvalidArgument(f"unknown coefficient kind {self.kind!r}")
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        bps = tuple(float(b) for b in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        terms = tuple((tuple(int(k) for k in t[0]), float(t[1]), float(t[2])) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        if self.kind == "constant" and len(vals) != 1:
            raise InvalidArgument("constant coefficient takes exactly one value")
        if self.kind == "laminate":
            if len(vals) != len(bps) + 1:
                raise InvalidArgument("laminate needs len(values) == len(breakpoints) + 1")
            if any(not 0.0 < b < 1.0 for b in bps) or any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
                raise InvalidArgument("laminate breakpoints must be strictly increasing in (0, 1)")
            if self.direction < 0:
                raise InvalidArgument("laminate direction must be a coordinate index")
        if self.kind == "checkerboard" and len(vals) != 2:
            raise InvalidArgument("checkerboard takes exactly two values")
        if self.kind == "trig-polynomial":
            if self.bounds is None:
                amp = sum(abs(a) + abs(b) for _, a, b in terms)
                object.__setattr__(self, "bounds", (self.mean - amp, self.mean + amp))
        elif self.bounds is None:
            object.__setattr__(self, "bounds", (min(vals), max(vals)))
        lo, hi = (float(b) for b in self.bounds)
        object.__setattr__(self, "bounds", (lo, hi))
        if not (0.0 < lo <= hi < math.inf):
            raise InvalidArgument(f"coefficient bounds must satisfy 0 < lower <= upper < inf, got {self.bounds}")
        if self.kind != "trig-polynomial" and any(not lo <= v <= hi for v in vals):
            raise InvalidArgument("coefficient values must lie within bounds")

    # --- evaluation -------------------------------------------------------

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        shape = y.shape[:-1]
        y = np.mod(y.reshape(-1, y.shape[-1]), 1.0)
        if self.kind == "constant":
            out = np.full(len(y), self.values[0])
        elif self.kind == "laminate":
            idx = np.searchsorted(np.asarray(self.breakpoints), y[:, self.direction], side="right")
            out = np.asarray(self.values)[idx]
        elif self.kind == "checkerboard":
            idx = np.sum(np.floor(2.0 * y).astype(int), axis=1) % 2
            out = np.asarray(self.values)[idx]
        else:
            out = np.full(len(y), self.mean)
            for k, a, b in self.terms:
                arg = 2.0 * np.pi * (y[:, : len(k)] @ np.asarray(k, dtype=float))
                out += a * np.cos(arg) + b * np.sin(arg)
            out = np.clip(out, *self.bounds)
        return out.reshape(shape)

    @property
    def is_constant(self):
        return self.kind == "constant" or (
            self.kind == "trig-polynomial" and all(a == 0 and b == 0 for _, a, b in self.terms)
        )

    def jump_lines(self):
        """Coordinates (axis, position) where the coefficient may jump."""
        if self.kind == "laminate":
            return [(self.direction, b) for b in self.breakpoints]
        if self.kind == "checkerboard":
            return [(0, 0.5), (1, 0.5)]
        return []

    def to_dict(self):
        d = {"kind": self.kind, "bounds": list(self.bounds)}
        if self.kind in ("constant", "laminate", "checkerboard"):
            d["values"] = list(self.values)
        if self.kind == "laminate":
            d["direction"] = self.direction
            d["breakpoints"] = list(self.breakpoints)
        if self.kind == "trig-polynomial":
            d["mean"] = self.mean
            d["terms"] = [{"k": list(k), "a": a, "b": b} for k, a, b in self.terms]
        return d

    @classmethod
    def from_dict(cls, d, path="operator.coefficient"):
        _reject_unknown(d, {"kind", "values", "direction", "breakpoints", "terms", "mean", "bounds"}, path)
        if "kind" not in d:
            raise InvalidArgument(f"{path}.kind: missing required field")
        kw = {k: d[k] for k in ("kind", "values", "direction", "breakpoints", "mean") if k in d}
        if "bounds" in d:
            kw["bounds"] = tuple(d["bounds"])
        if "terms" in d:
            terms = []
            for i, t in enumerate(d["terms"]):
                _reject_unknown(t, {"k", "a", "b"}, f"{path}.terms[{i}]")
                terms.append((tuple(t["k"]), t.get("a", 0.0), t.get("b", 0.0)))
            kw["terms"] = tuple(terms)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise InvalidArgument(f"{path}: {exc}") from None


def _reject_unknown(d, allowed, path):
    if not isinstance(d, dict):
        raise InvalidArgument(f"{path}: expected a table")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise InvalidArgument(f"{path}.{extra[0]}: unknown key")


def laminate(values, breakpoints=(0.5,), direction=0, bounds=None):
    return CoefficientField("laminate", tuple(values), direction, tuple(breakpoints), bounds=bounds)


def constant(c=1.0):
    return CoefficientField("constant", (c,))


@dataclass(frozen=True)
class OperatorSpec:
    family: str
    coefficient: CoefficientField
    params: ExponentParams
    dim: int = 2
    matrix: tuple | None = None
    finsler_weights: tuple | None = None
    finsler_s: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgument(f"unknown operator family {self.family!r}")
        if self.dim not in (2, 3):
            raise InvalidArgument("dimension must be 2 or 3")
        if self.coefficient.kind == "laminate" and self.coefficient.direction >= self.dim:
            raise InvalidArgument("laminate direction exceeds dimension")
        if self.family == "linear-matrix":
            if self.params.p != 2:
                raise InvalidArgument("linear-matrix family requires p = 2")
            m = np.eye(self.dim) if self.matrix is None else np.asarray(self.matrix, dtype=float)
            if m.shape != (self.dim, self.dim):
                raise InvalidArgument("matrix shape must be dim x dim")
            if not np.allclose(m, m.T) or np.linalg.eigvalsh(m).min() <= 0:
                raise InvalidArgument("matrix must be symmetric positive definite")
            object.__setattr__(self, "matrix", tuple(map(tuple, m.tolist())))
        if self.family == "finsler":
            p = self.params.p
            s = 2.0 if self.finsler_s is None else float(self.finsler_s)
            lo, hi = min(p, 2.0), max(p, 2.0)
            if not lo <= s <= hi:
                raise InvalidArgument(f"finsler exponent s must lie in [{lo}, {hi}]")
            w = (1.0,) * self.dim if self.finsler_weights is None else tuple(float(v) for v in self.finsler_weights)
            if len(w) != self.dim or min(w) <= 0:
                raise InvalidArgument("finsler weights must be positive, one per dimension")
            object.__setattr__(self, "finsler_s", float(s))
            object.__setattr__(self, "finsler_weights", w)

    @property
    def p(self):
        return self.params.p

    @property
    def mu(self):
        return self.params.mu

    @property
    def is_linear(self):
        return self.family == "linear-matrix" or (
            self.params.p == 2 and self.family in ("p-laplace", "regularized-p-laplace", "orthotropic")
        ) or (self.family == "finsler" and self.params.p == 2 and self.finsler_s == 2.0)

    @property
    def homogeneous(self):
        """True when f(t xi) = t^(p-1) f(xi) exactly (mu plays no role)."""
        return self.family in ("p-laplace", "linear-matrix") or self.params.mu == 0

    # --- flux and derivatives over stacks of gradients -------------------

    def flux_local(self, c, z):
        """``c[:, None] * f(z)`` for coefficient samples ``c`` (m,) and gradients ``z`` (m, n)."""
        return c[:, None] * self._f(np.asarray(z, dtype=float))

    def jacobian_local(self, c, z):
        return c[:, None, None] * self._df(np.asarray(z, dtype=float))

    def secant_local(self, c, z):
        return c[:, None, None] * self._secant(np.asarray(z, dtype=float))

    def _f(self, z):
        p, mu = self.params.p, self.params.mu
        fam = self.family
        if fam == "linear-matrix":
            return z @ np.asarray(self.matrix).T
        r = np.linalg.norm(z, axis=-1)
        if fam == "p-laplace":
            return _times(safe_pow(r, p - 2.0), z, r)
        if fam == "regularized-p-laplace":
            return _times(safe_pow(mu + r, p - 2.0), z, r)
        if fam == "orthotropic":
            az = np.abs(z)
            return np.where(az > 0, safe_pow(mu + az, p - 2.0), 0.0) * z
        # finsler
        g, comp = self._finsler_parts(z)
        return g[:, None] * comp

    def _finsler_parts(self, z, floor=0.0):
        p, mu = self.params.p, self.params.mu
        s = self.finsler_s
        w = np.asarray(self.finsler_weights)
        az = np.maximum(np.abs(z), floor)
        comp = w * np.where(az > 0, safe_pow(az, s - 2.0), 0.0) * z
        n = safe_pow(np.sum(w * safe_pow(az, s), axis=-1), 1.0 / s)
        with np.errstate(invalid="ignore"):
            g = np.where(n > 0, safe_pow(mu + n, p - 2.0) * safe_pow(n, 2.0 - s), 0.0)
        return g, comp

    def _secant(self, z):
        p, mu = self.params.p, self.params.mu
        m, n = z.shape
        eye = np.eye(n)
        fam = self.family
        if fam == "linear-matrix":
            return np.broadcast_to(np.asarray(self.matrix), (m, n, n)).copy()
        r = np.maximum(np.linalg.norm(z, axis=-1), JAC_FLOOR)
        if fam == "p-laplace":
            return safe_pow(r, p - 2.0)[:, None, None] * eye
        if fam == "regularized-p-laplace":
            return safe_pow(mu + r, p - 2.0)[:, None, None] * eye
        az = np.maximum(np.abs(z), JAC_FLOOR)
        if fam == "orthotropic":
            return safe_pow(mu + az, p - 2.0)[:, :, None] * eye
        s = self.finsler_s
        w = np.asarray(self.finsler_weights)
        nn = safe_pow(np.sum(w * safe_pow(az, s), axis=-1), 1.0 / s)
        g = safe_pow(mu + nn, p - 2.0) * safe_pow(nn, 2.0 - s)
        return (g[:, None] * w * safe_pow(az, s - 2.0))[:, :, None] * eye

    def _df(self, z):
        p, mu = self.params.p, self.params.mu
        m, n = z.shape
        eye = np.eye(n)
        fam = self.family
        if fam == "linear-matrix":
            return np.broadcast_to(np.asarray(self.matrix), (m, n, n)).copy()
        if fam in ("p-laplace", "regularized-p-laplace"):
            r = np.maximum(np.linalg.norm(z, axis=-1), JAC_FLOOR)
            base = r if fam == "p-laplace" else mu + r
            s = safe_pow(base, p - 2.0)
            # d/dz [s(r) z] = s I + s'(r) z z^T / r, s'(r) = (p-2) base^(p-3)
            ds_over_r = (p - 2.0) * safe_pow(base, p - 3.0) / r
            return s[:, None, None] * eye + ds_over_r[:, None, None] * np.einsum("mi,mj->mij", z, z)
        az = np.maximum(np.abs(z), JAC_FLOOR)
        if fam == "orthotropic":
            d = safe_pow(mu + az, p - 3.0) * (mu + (p - 1.0) * az)
            return d[:, :, None] * eye
        # finsler: a_i = h(N) w_i |z_i|^(s-2) z_i with h(N) = (mu+N)^(p-2) N^(2-s)
        s = self.finsler_s
        w = np.asarray(self.finsler_weights)
        nn = safe_pow(np.sum(w * safe_pow(az, s), axis=-1), 1.0 / s)
        h = safe_pow(mu + nn, p - 2.0) * safe_pow(nn, 2.0 - s)
        dh = (p - 2.0) * safe_pow(mu + nn, p - 3.0) * safe_pow(nn, 2.0 - s) + (2.0 - s) * safe_pow(
            mu + nn, p - 2.0
        ) * safe_pow(nn, 1.0 - s)
        comp = w * safe_pow(az, s - 2.0) * z  # w_i |z_i|^(s-2) z_i
        dn = safe_pow(nn, 1.0 - s)[:, None] * comp  # dN/dz_j
        diag = (s - 1.0) * w * safe_pow(az, s - 2.0)
        return (dh[:, None, None] * np.einsum("mi,mj->mij", comp, dn)) + (h[:, None] * diag)[:, :, None] * eye

    # --- pointwise API ------------------------------------------------------

    def coefficient_at(self, y):
        return self.coefficient(y)

    def to_dict(self):
        d = {
            "family": self.family,
            "p": self.params.p,
            "mu": self.params.mu,
            "lambda_cap": self.params.lambda_cap,
            "dim": self.dim,
            "coefficient": self.coefficient.to_dict(),
        }
        if self.family == "linear-matrix":
            d["matrix"] = [list(r) for r in self.matrix]
        if self.family == "finsler":
            d["finsler_weights"] = list(self.finsler_weights)
            d["finsler_s"] = self.finsler_s
        return d

    @classmethod
    def from_dict(cls, d, path="operator"):
        allowed = {"family", "p", "mu", "lambda_cap", "dim", "coefficient", "matrix", "finsler_weights", "finsler_s"}
        _reject_unknown(d, allowed, path)
        for key in ("family", "p"):
            if key not in d:
                raise InvalidArgument(f"{path}.{key}: missing required field")
        try:
            params = ExponentParams(float(d["p"]), float(d.get("mu", 1.0)), float(d.get("lambda_cap", 1.0)))
        except (TypeError, ValueError) as exc:
            raise InvalidArgument(f"{path}.p: {exc}") from None
        coef = CoefficientField.from_dict(d.get("coefficient", {"kind": "constant", "values": [1.0]}), f"{path}.coefficient")
        try:
            return cls(
                d["family"],
                coef,
                params,
                int(d.get("dim", 2)),
                tuple(map(tuple, d["matrix"])) if "matrix" in d else None,
                tuple(d["finsler_weights"]) if "finsler_weights" in d else None,
                d.get("finsler_s"),
            )
        except (TypeError, ValueError) as exc:
            raise InvalidArgument(f"{path}.family: {exc}") from None

    def to_toml(self):
        import tomli_w

        return tomli_w.dumps({"operator": self.to_dict()})

    @classmethod
    def from_toml(cls, text):
        return cls.from_dict(_toml_loads(text)["operator"])

    def digest(self):
        import hashlib
        import json

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _toml_loads(text):
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib.loads(text)


def _times(fac, z, r):
    return np.where(r > 0, fac, 0.0)[:, None] * z


def evaluate(op: OperatorSpec, y, z):
    """Flux ``a(y, z)`` for a single point or stacks of points and gradients."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
        raise InvalidArgument("non-finite input")
    single = z.ndim == 1
    y2 = np.atleast_2d(y)
    z2 = np.atleast_2d(z)
    if y2.shape[-1] != op.dim or z2.shape[-1] != op.dim:
        raise InvalidArgument(f"expected {op.dim}-vectors")
    y2, z2 = np.broadcast_arrays(y2, z2)
    out = op.flux_local(op.coefficient(y2), z2)
    return out[0] if single else out


def jacobian(op: OperatorSpec, y, z):
    y2, z2 = np.broadcast_arrays(np.atleast_2d(np.asarray(y, float)), np.atleast_2d(np.asarray(z, float)))
    out = op.jacobian_local(op.coefficient(y2), z2)
    return out[0] if np.ndim(z) == 1 else out


# --- verification -------------------------------------------------------------------

ASSUMPTIONS = {
    "A1-continuity": "|a(y,x1)-a(y,x2)| <= L (mu+|x1|+|x2|)^(p-2) |x1-x2|",
    "A1-monotone": "L <a(y,x1)-a(y,x2), x1-x2> >= (mu+|x1|+|x2|)^(p-2) |x1-x2|^2",
    "A2-monotone": "L <da, dx> >= |dx|^p (p>=2) or (mu+|x1|+|x2|)^(p-2)|dx|^2 (p<2)",
    "A2-growth": "|a(y,x)| <= L (mu+|x|)^(p-1)",
    "A3-monotone": "L <da, dx> >= (1+|dx|)^(p-2)|dx|^2 (p>=2) or (1+|x1|+|x2|)^(p-2)|dx|^2 (p<2)",
    "A3-continuity": "|da| <= L (1+|x1|+|x2|)^(p-2)|dx| (p>=2) or (1+|dx|)^(p-2)|dx| (p<2)",
    "A4-monotone": "L <da, dx> >= (mu+|dx|)^(p-2)|dx|^2 (p>=2) or (mu+|x1|+|x2|)^(p-2)|dx|^2 (p<2)",
    "A4-dual": "L <da, dx> >= (mu^(p-1)+|a1|+|a2|)^(p'-2)|da|^2 (p>=2) or (mu^(p-1)+|da|)^(p'-2)|da|^2 (p<2)",
}


def _nrm(v):
    return np.linalg.norm(v, axis=-1)


def required_constant(assumption_id, x1, x2, a1, a2, params: ExponentParams):
    """Per-sample (numerator, denominator) whose ratio is the constant needed.

    The constant is the smallest ``L`` making the inequality hold for the
    sample; for monotonicity forms the denominator is the inner product.
    """
    if assumption_id not in ASSUMPTIONS:
        raise InvalidArgument(f"unknown assumption id {assumption_id!r}; expected one of {sorted(ASSUMPTIONS)}")
    p, mu = params.p, params.mu
    dx = x1 - x2
    da = a1 - a2
    ndx = _nrm(dx)
    nda = _nrm(da)
    inner = np.sum(da * dx, axis=-1)
    s12 = _nrm(x1) + _nrm(x2)
    if assumption_id == "A2-growth":
        return _nrm(a1), safe_pow(mu + _nrm(x1), p - 1.0)
    if assumption_id == "A1-continuity":
        return nda, safe_pow(mu + s12, p - 2.0) * ndx
    if assumption_id == "A3-continuity":
        if p >= 2:
            return nda, safe_pow(1.0 + s12, p - 2.0) * ndx
        return nda, safe_pow(1.0 + ndx, p - 2.0) * ndx
    if assumption_id == "A1-monotone":
        rhs = safe_pow(mu + s12, p - 2.0) * ndx**2
    elif assumption_id == "A2-monotone":
        rhs = safe_pow(ndx, p) if p >= 2 else safe_pow(mu + s12, p - 2.0) * ndx**2
    elif assumption_id == "A3-monotone":
        rhs = safe_pow(1.0 + ndx, p - 2.0) * ndx**2 if p >= 2 else safe_pow(1.0 + s12, p - 2.0) * ndx**2
    elif assumption_id == "A4-monotone":
        rhs = safe_pow(mu + ndx, p - 2.0) * ndx**2 if p >= 2 else safe_pow(mu + s12, p - 2.0) * ndx**2
    else:  # A4-dual
        q = params.conj
        base = mu ** (p - 1.0) + (_nrm(a1) + _nrm(a2) if p >= 2 else nda)
        rhs = safe_pow(base, q - 2.0) * nda**2
    return rhs, inner


@dataclass(frozen=True)
class SamplerConfig:
    samples: int = 20000
    seed: int = 0
    mag_range: tuple = (1e-4, 1e4)
    cap: float = 1e3
    divergence_factor: float = 100.0
    workers: int = 1

    def __post_init__(self):
        lo, hi = self.mag_range
        if not 0 < lo < hi:
            raise InvalidArgument("mag_range must satisfy 0 < low < high")
        if self.samples < 0 or self.cap <= 0:
            raise InvalidArgument("samples must be >= 0 and cap > 0")


@dataclass
class VerificationReport:
    assumption_id: str
    holds: bool
    fitted_constant: float
    witness: tuple | None = None
    witness_ratio: float | None = None
    violation: float | None = None
    diverging: bool = False
    cap: float = 1e3
    samples: int = 0
    scale_profile: dict = field(default_factory=dict, repr=False)
    gated: bool = True

    def to_dict(self):
        w = None
        if self.witness is not None:
            w = [np.asarray(v).tolist() for v in self.witness]
        return {
            "assumption_id": self.assumption_id,
            "holds": self.holds,
            "fitted_constant": self.fitted_constant,
            "witness": w,
            "witness_ratio": self.witness_ratio,
            "violation": self.violation,
            "diverging": self.diverging,
            "cap": self.cap,
            "samples": self.samples,
            "gated": self.gated,
        }


SHARD = 4096


def _log_uniform_vectors(rng, m, n, lo, hi):
    mag = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(m, n)))
    return mag * rng.choice([-1.0, 1.0], size=(m, n))


def _forced_pairs(rng, n, lo, hi):
    """Adversarial sub-families: near-collinear, orthogonal nudges, axis-aligned, tiny."""
    base_mags = np.geomspace(lo, hi, 9)
    rel = np.geomspace(1e-1, 1e-6, 6)
    x1s, x2s = [], []
    for m in base_mags:
        d = rng.normal(size=n)
        d /= np.linalg.norm(d)
        x = m * d
        perp = np.zeros(n)
        perp[0], perp[1] = -d[1], d[0]
        for r in rel:
            x1s += [x, x, x]
            x2s += [x * (1 + r), x + r * m * perp, -x * r]
            # axis-aligned: second component switched on by a small amount
            e = np.zeros(n)
            e[0] = m
            f = e.copy()
            f[1] = r * m
            x1s.append(f)
            x2s.append(e)
        x1s.append(x)
        x2s.append(-x)
        x1s.append(x)
        x2s.append(np.zeros(n))
    tiny = lo * 1e-2
    x1s.append(np.full(n, tiny))
    x2s.append(np.full(n, -tiny))
    return np.array(x1s), np.array(x2s)


def _decade_profile(scale, vals, lo_mag):
    dec = np.floor(np.log10(np.maximum(scale, lo_mag * 1e-3))).astype(int)
    prof = {}
    for d, v in zip(dec, vals):
        if np.isfinite(v) or v == np.inf:
            prof[int(d)] = max(prof.get(int(d), -np.inf), float(v))
    return dict(sorted(prof.items()))


def _diverges(profile, factor):
    vals = np.array([v for v in profile.values() if v > 0])
    if len(vals) < 3:
        return False
    med = np.median(vals)
    if not np.isfinite(med) or med == 0:
        return not np.all(np.isfinite(vals))
    return bool(max(vals[0], vals[-1]) > factor * med)


def _reduce(op, assumption_id, y, x1, x2):
    c = op.coefficient(y)
    a1 = op.flux_local(c, x1)
    a2 = op.flux_local(c, x2)
    num, den = required_constant(assumption_id, x1, x2, a1, a2, op.params)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / den
    ratio = np.where((num == 0) & (den == 0), np.nan, ratio)
    ratio = np.where((den <= 0) & (num > 0), np.inf, ratio)
    return ratio, num, den


def verify_assumption(op: OperatorSpec, assumption_id: str, sampler: SamplerConfig = SamplerConfig()):
    """Fit the smallest constant making ``assumption_id`` hold over sampled triples."""
    if assumption_id not in ASSUMPTIONS:
        raise InvalidArgument(f"unknown assumption id {assumption_id!r}; expected one of {sorted(ASSUMPTIONS)}")
    n = op.dim
    lo, hi = sampler.mag_range
    sizes = [SHARD] * (sampler.samples // SHARD) + ([sampler.samples % SHARD] if sampler.samples % SHARD else [])

    def shard(i):
        rng = np.random.default_rng(np.random.SeedSequence(sampler.seed, spawn_key=(i,)))
        m = sizes[i]
        y = rng.uniform(0, 1, size=(m, n))
        x1 = _log_uniform_vectors(rng, m, n, lo, hi)
        x2 = _log_uniform_vectors(rng, m, n, lo, hi)
        return y, x1, x2

    frng = np.random.default_rng(np.random.SeedSequence(sampler.seed, spawn_key=(2**31,)))
    fx1, fx2 = _forced_pairs(frng, n, lo, hi)
    fy = frng.uniform(0, 1, size=(len(fx1), n))
    batches = [(fy, fx1, fx2)]

    def run(batch):
        y, x1, x2 = batch
        r, num, den = _reduce(op, assumption_id, y, x1, x2)
        return y, x1, x2, r, num, den

    gen = [shard(i) for i in range(len(sizes))]
    if sampler.workers > 1:
        with ThreadPoolExecutor(sampler.workers) as pool:
            results = list(pool.map(run, batches + gen))
    else:
        results = [run(b) for b in batches + gen]
    y = np.concatenate([r[0] for r in results])
    x1 = np.concatenate([r[1] for r in results])
    x2 = np.concatenate([r[2] for r in results])
    ratio = np.concatenate([r[3] for r in results])
    num = np.concatenate([r[4] for r in results])
    den = np.concatenate([r[5] for r in results])
    valid = ~np.isnan(ratio)
    if not valid.any():
        return VerificationReport(assumption_id, True, 0.0, cap=sampler.cap, samples=sampler.samples)
    r = np.where(valid, ratio, -np.inf)
    k = int(np.argmax(r))
    fitted = float(r[k])
    scale = np.maximum(_nrm(x1), _nrm(x2))
    prof = _decade_profile(scale[valid], ratio[valid], lo)
    div = _diverges(prof, sampler.divergence_factor)
    holds = bool(fitted <= sampler.cap and not div)
    with np.errstate(divide="ignore", invalid="ignore"):
        wr = float(den[k] / num[k]) if num[k] != 0 else math.inf
    witness = (y[k], x1[k], x2[k])
    return VerificationReport(
        assumption_id, holds, fitted, witness, wr, fitted, div, sampler.cap, sampler.samples, prof
    )


def check_modulus(op: OperatorSpec, holder_alpha: float, sampler: SamplerConfig = SamplerConfig()):
    """Fit ``C`` in ``|a(x,z)-a(y,z)| <= C |x-y|^alpha (mu+|z|)^(p-2)|z|``."""
    if not 0 < holder_alpha <= 1:
        raise InvalidArgument("holder_alpha must lie in (0, 1]")
    n = op.dim
    p, mu = op.params.p, op.params.mu
    lo, hi = sampler.mag_range
    rng = np.random.default_rng(np.random.SeedSequence(sampler.seed, spawn_key=(7,)))
    m = max(sampler.samples, 1)
    x = rng.uniform(0, 1, size=(m, n))
    d = rng.normal(size=(m, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    delta = np.exp(rng.uniform(np.log(1e-6), np.log(0.5), size=m))
    yy = x + delta[:, None] * d
    z = _log_uniform_vectors(rng, m, n, lo, hi)
    # pairs straddling every potential jump line
    fx, fy, fz = [], [], []
    for axis, pos in op.coefficient.jump_lines() + [(0, 0.0)]:
        for dl in np.geomspace(1e-1, 1e-6, 6):
            a = rng.uniform(0, 1, size=n)
            b = a.copy()
            a[axis] = pos - dl / 2
            b[axis] = pos + dl / 2
            fx.append(a)
            fy.append(b)
            fz.append(np.ones(n))
    x = np.vstack([np.array(fx), x])
    yy = np.vstack([np.array(fy), yy])
    z = np.vstack([np.array(fz), z])
    nz = _nrm(z)
    num = _nrm(op.flux_local(op.coefficient(x), z) - op.flux_local(op.coefficient(yy), z))
    dist = _nrm(x - yy)
    den = dist**holder_alpha * safe_pow(mu + nz, p - 2.0) * nz
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(num == 0, 0.0, num / den)
    k = int(np.argmax(ratio))
    fitted = float(ratio[k])
    prof = {}
    for dd, v in zip(np.floor(np.log10(dist)).astype(int), ratio):
        prof[int(dd)] = max(prof.get(int(dd), 0.0), float(v))
    prof = dict(sorted(prof.items()))
    div = fitted > 0 and _diverges(prof, sampler.divergence_factor)
    holds = bool(fitted <= sampler.cap and not div)
    return VerificationReport(
        f"modulus(alpha={holder_alpha})", holds, fitted, (x[k], yy[k], z[k]), None, fitted, bool(div),
        sampler.cap, sampler.samples, prof,
    )
