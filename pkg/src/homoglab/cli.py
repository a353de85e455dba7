"""``homog-lab`` command line: resolve a TOML config, run one pipeline, write reports and a manifest.

Exit status: 0 when every gated check passes, 1 when a gated check fails,
2 for configuration errors, 3 for solver failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bvp import BVProblem, energy_audit, solve_effective, solve_oscillating
from .cell import corrector_bounds_report, solve_corrector, solve_flux_corrector
from .config import COMMANDS, config_hash, load, semantic
from .effective import CHECKS, DEFAULT_CHECKS, check_effective_structure, polar_grid, tabulate
from .errors import ExpansionFailure, InvalidArgument, SolverFailure
from .grid import Ball, DirichletMesh, Field, TorusGrid, gradient, lq_norm, write_field_binary
from .operators import ASSUMPTIONS, COEFFICIENT_KINDS, FAMILIES, OperatorSpec, SamplerConfig, verify_assumption
from .regularity import QUANTITIES, ladder_study
from .solver import SolverConfig
from .twoscale import error_rate
from .vcalc import INEQUALITIES, ExponentParams, inequality_audit

EXIT_OK, EXIT_GATED, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class Run:
    """Collects outputs and gated/exploratory check outcomes for one experiment."""

    def __init__(self, cfg, out: Path):
        self.cfg = cfg
        self.out = out
        self.files = []
        self.checks = []
        self.formats = set(cfg["output"]["formats"])

    def check(self, name, passed, gated=True, value=None):
        self.checks.append({"name": name, "passed": bool(passed), "gated": bool(gated), "value": value})

    def write_text(self, name, text):
        path = self.out / name
        path.write_text(text)
        self.files.append(path)

    def write_json(self, name, result):
        if "json" in self.formats:
            body = {"config": semantic(self.cfg), "result": _clean(result)}
            self.write_text(name, json.dumps(body, indent=2, sort_keys=True) + "\n")

    def write_csv(self, name, text):
        if "csv" in self.formats:
            self.write_text(name, text)

    def write_field(self, name, field):
        path = self.out / name
        write_field_binary(field, path)
        self.files.append(path)

    @property
    def failed(self):
        return any(c["gated"] and not c["passed"] for c in self.checks)


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, np.generic):
        return _clean(x.item())
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _rows_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()


def _gated_set(cfg, default):
    g = cfg["checks"]["gated"]
    return set(default if g is None else g)


def _solver(cfg, workers):
    d = dict(cfg["solver"], workers=workers)
    return SolverConfig.from_dict(d)


def _domain(cfg):
    d = cfg["discretization"]["domain"]
    if d["type"] == "square":
        return {"type": "square", "center": d["center"], "half_width": d["half_width"]}
    return {"type": "disk", "center": d["center"], "radius": d["radius"]}


def _mesh(cfg):
    d = _domain(cfg)
    cells = cfg["discretization"]["cells"]
    if d["type"] == "square":
        return DirichletMesh.square(tuple(d["center"]), d["half_width"], cells=cells)
    return DirichletMesh.disk(tuple(d["center"]), d["radius"], h=d["radius"] / cells)


def _ball(cfg):
    b = cfg["measurement"]["ball"]
    return Ball(tuple(b["center"]), b["radius"])


# --- pipelines ------------------------------------------------------------------------


def run_vtest(run: Run, workers, seed):
    v = run.cfg["vtest"]
    names = v["inequalities"] or sorted(INEQUALITIES)
    gated = _gated_set(run.cfg, names)
    rows = []
    for p in v["p"]:
        params = ExponentParams(p, v["mu"])
        for name in names:
            rep = inequality_audit(name, v["samples"], params, seed, dim=v["dim"], workers=workers)
            rows.append(rep.to_dict())
            run.check(f"{name}@p={p}", rep.passed, name in gated, rep.empirical_constant)
    run.write_json("vtest.json", {"audits": rows})
    run.write_csv("vtest.csv", _rows_csv(rows, ["name", "p", "mu", "samples", "empirical_constant", "cap", "pass"]))


def run_check_operator(run: Run, workers, seed):
    op = OperatorSpec.from_dict(run.cfg["operator"])
    c = run.cfg["check"]
    ids = c["assumptions"] or sorted(ASSUMPTIONS)
    gated = _gated_set(run.cfg, ids) - set(run.cfg["checks"]["exploratory"] or ())
    sampler = SamplerConfig(samples=c["samples"], seed=seed, cap=c["cap"], workers=workers)
    rows = []
    for aid in ids:
        rep = verify_assumption(op, aid, sampler)
        rows.append(rep.to_dict())
        run.check(aid, rep.holds, aid in gated, rep.fitted_constant)
    run.write_json("check_operator.json", {"operator_digest": op.digest(), "reports": rows})
    cols = ["assumption_id", "holds", "fitted_constant", "witness_ratio", "violation", "diverging", "cap", "samples"]
    run.write_csv("check_operator.csv", _rows_csv(rows, cols))


def run_cell(run: Run, workers, seed):
    op = OperatorSpec.from_dict(run.cfg["operator"])
    cfg = _solver(run.cfg, workers)
    grid = TorusGrid(op.dim, run.cfg["discretization"]["N"])
    rows, details = [], []
    for i, xi in enumerate(run.cfg["cell"]["xi"]):
        sol = solve_corrector(op, xi, grid, cfg)
        p = op.p
        phi_norm = float((grid.vol @ np.abs(sol.phi.values[grid.elements].mean(axis=1)) ** p) ** (1 / p))
        dphi = sol.F.values - sol.xi
        phi_norm += float((grid.vol @ np.linalg.norm(dphi, axis=1) ** p) ** (1 / p))
        d = sol.diagnostics()
        d["phi_w1p"] = phi_norm
        row = {"index": i, "xi": json.dumps(list(map(float, xi))), "phi_w1p": phi_norm, "residual": sol.residual_norm}
        row["mean_flux"] = json.dumps([float(v) for v in sol.mean_flux()])
        if run.cfg["cell"]["flux_corrector"]:
            fc = solve_flux_corrector(sol, cfg)
            d["flux_corrector"] = fc.to_dict()
            d["bounds"] = corrector_bounds_report(sol, fc).to_dict()
            row["sigma_identity_error"] = fc.identity_error
        run.write_field(f"corrector_{i}_phi.bin", sol.phi)
        rows.append(row)
        details.append(d)
        run.check(f"converged[{i}]", sol.residual_norm <= cfg.tol)
        if op.coefficient.is_constant:
            run.check(f"constant-phi[{i}]", phi_norm <= run.cfg["checks"]["phi_tol"], value=phi_norm)
    run.write_json("cell.json", {"correctors": details})
    cols = ["index", "xi", "phi_w1p", "residual", "mean_flux"] + (["sigma_identity_error"] if run.cfg["cell"]["flux_corrector"] else [])
    run.write_csv("cell.csv", _rows_csv(rows, cols))


def _table(op, cfg, solver):
    e = cfg["effective"]
    xs, pol = polar_grid(e["magnitudes"], e["directions"], e["lo"], e["hi"])
    return tabulate(op, xs, TorusGrid(op.dim, cfg["discretization"]["N"]), solver, polar=pol)


def run_effective(run: Run, workers, seed):
    op = OperatorSpec.from_dict(run.cfg["operator"])
    table = _table(op, run.cfg, _solver(run.cfg, workers))
    explore = set(run.cfg["checks"]["exploratory"] or ()) | {"strong-monotone"}
    gated = _gated_set(run.cfg, DEFAULT_CHECKS) - explore
    for c in gated:
        if c not in CHECKS:
            raise InvalidArgument(f"checks.gated: unknown check {c!r}")
    reps = check_effective_structure(table, tuple(CHECKS))
    for r in reps:
        run.check(r.assumption_id, r.holds, r.assumption_id in gated, r.fitted_constant)
    failed = [s for s in table.status if s != "ok"]
    run.check("all-entries-converged", not failed, value=len(failed))
    if "json" in run.formats:
        run.write_text("table.json", table.to_json())
    run.write_csv("table.csv", table.to_csv())
    run.write_json("structure.json", {"checks": [r.to_dict() for r in reps]})


def run_bvp(run: Run, workers, seed):
    cfg = run.cfg
    op = OperatorSpec.from_dict(cfg["operator"])
    solver = _solver(cfg, workers)
    mesh = _mesh(cfg)
    eps = cfg["bvp"]["epsilon"]
    prob = BVProblem(op, mesh, eps, cfg["boundary"], cfg["rhs"], cfg["discretization"]["cells_per_period"])
    u = solve_oscillating(prob, solver)
    run.write_field("u.bin", u)
    ball = _ball(cfg)
    F = prob.rhs_field()
    result = {"oscillating": {"iterations": u.info.iterations, "residual": u.info.residual}}
    w = None
    if cfg["bvp"]["effective"]:
        table = _table(op, cfg, solver)
        w = solve_effective(BVProblem(table, mesh, g=cfg["boundary"], rhs=None if F is None else F), solver)
        run.write_field("u_effective.bin", w)
        result["effective"] = {
            "iterations": w.info.iterations,
            "residual": w.info.residual,
            "extrapolated_fraction": w.extrapolated_fraction,
        }
        diff = Field(mesh, gradient(u).values - gradient(w).values, "element")
        result["gradient_difference_Lp"] = lq_norm(diff, op.p)
    audit = energy_audit(u, w, F, ball, op.params)
    result["energy_audit"] = audit.to_dict()
    run.check("converged", u.info.converged)
    run.write_json("bvp.json", result)
    run.write_csv("bvp.csv", _rows_csv([dict(audit.sides)], sorted(audit.sides)))


def run_two_scale(run: Run, workers, seed):
    cfg = run.cfg
    op = OperatorSpec.from_dict(cfg["operator"])
    lad = cfg["ladder"]
    rep = error_rate(
        op,
        _domain(cfg),
        cfg["boundary"],
        lad["epsilons"],
        ell_rule=lad["ell"],
        rho=lad["rho"],
        cfg=_solver(cfg, workers),
        cells_per_period=cfg["discretization"]["cells_per_period"],
    )
    run.write_json("two_scale.json", rep.to_dict())
    run.write_csv("two_scale.csv", rep.to_csv())
    beta = rep.beta_hat
    if cfg["checks"]["min_beta"] is not None:
        ok = beta is not None and math.isfinite(beta) and beta >= cfg["checks"]["min_beta"]
        run.check("rate", ok, value=beta)
    run.check("complete", rep.complete, gated=False)


def run_regularity(run: Run, workers, seed):
    cfg = run.cfg
    op = OperatorSpec.from_dict(cfg["operator"])
    m = cfg["measurement"]
    if m["quantity"] not in QUANTITIES:
        raise InvalidArgument(f"measurement.quantity: unknown {m['quantity']!r}; expected one of {list(QUANTITIES)}")
    rep = ladder_study(
        op,
        cfg["ladder"]["epsilons"],
        m["quantity"],
        g=cfg["boundary"],
        ball=_ball(cfg),
        q=m["q"],
        cells_per_period=cfg["discretization"]["cells_per_period"],
        domain=_domain(cfg),
        cfg=_solver(cfg, 1),
        workers=workers,
        config=semantic(cfg),
    )
    run.write_json("regularity.json", json.loads(rep.to_json()))
    run.write_csv("regularity.csv", rep.to_csv())
    u = rep.uniformity
    run.check("uniformity", math.isfinite(u) and u <= cfg["checks"]["uniformity_max"], value=u)


PIPELINES = {
    "vtest": run_vtest,
    "check-operator": run_check_operator,
    "cell": run_cell,
    "effective": run_effective,
    "bvp": run_bvp,
    "two-scale": run_two_scale,
    "regularity": run_regularity,
}


# --- catalog --------------------------------------------------------------------------


def catalog():
    return {
        "families": dict(FAMILIES),
        "coefficients": dict(COEFFICIENT_KINDS),
        "inequalities": {k: v.description for k, v in INEQUALITIES.items()},
        "assumptions": dict(ASSUMPTIONS),
        "effective_checks": dict(CHECKS),
        "regularity_quantities": list(QUANTITIES),
        "commands": list(COMMANDS),
    }


def list_builtins(as_json=False, stream=None):
    stream = stream or sys.stdout
    cat = catalog()
    if as_json:
        stream.write(json.dumps(cat, indent=2, sort_keys=True) + "\n")
        return
    for section in ("families", "coefficients", "inequalities", "assumptions", "effective_checks"):
        stream.write(f"{section}:\n")
        for k, v in cat[section].items():
            stream.write(f"  {k:24s} {v}\n")


# --- entry point ----------------------------------------------------------------------


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def execute(command, config_path, out=None, workers=1, seed=None, stderr=None):
    """Run one experiment; returns the exit status."""
    stderr = stderr or sys.stderr
    try:
        cfg = load(config_path, command)
        if seed is not None:
            cfg["seed"] = int(seed)
        if out is not None:
            cfg["output"]["directory"] = str(out)
        if workers < 1:
            raise InvalidArgument("--workers must be >= 1")
    except InvalidArgument as exc:
        stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    out_dir = Path(cfg["output"]["directory"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        stderr.write(f"config error: output.directory: {exc}\n")
        return EXIT_CONFIG
    run = Run(cfg, out_dir)
    t0 = time.perf_counter()
    status = EXIT_OK
    error = None
    try:
        PIPELINES[cfg["command"]](run, workers, cfg["seed"])
    except InvalidArgument as exc:
        stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (SolverFailure, ExpansionFailure) as exc:
        error = {"type": type(exc).__name__, "message": str(exc)}
        for attr in ("residual", "iterations", "cube"):
            if getattr(exc, attr, None) is not None:
                error[attr] = getattr(exc, attr)
        stderr.write(f"solver failure: {exc}\n")
        status = EXIT_SOLVER
    wall = time.perf_counter() - t0
    if status == EXIT_OK and run.failed:
        status = EXIT_GATED
        bad = [c["name"] for c in run.checks if c["gated"] and not c["passed"]]
        stderr.write(f"gated checks failed: {', '.join(bad)}\n")
    manifest = {
        "command": cfg["command"],
        "config_hash": config_hash(cfg),
        "config": cfg,
        "versions": {
            "homoglab": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "workers": workers,
        "wall_time_s": wall,
        "checks": _clean(run.checks),
        "exit_status": status,
        "error": _clean(error),
        "outputs": {p.name: _file_hash(p) for p in run.files},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return status


def build_parser():
    ap = argparse.ArgumentParser(prog="homog-lab", description="Periodic homogenization experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--seed", type=int)
    lb = sub.add_parser("list-builtins")
    lb.add_argument("--json", action="store_true", help="machine-readable catalog")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "list-builtins":
        list_builtins(args.json)
        return EXIT_OK
    return execute(args.command, args.config, args.out, args.workers, args.seed)


if __name__ == "__main__":
    sys.exit(main())
