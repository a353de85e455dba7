"""Experiment configuration: TOML schema validation, defaults and content hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import InvalidArgument
from .operators import OperatorSpec, _toml_loads
from .solver import SolverConfig

COMMANDS = ("check-operator", "cell", "effective", "bvp", "two-scale", "regularity", "vtest")

# leaves are (kind, default)
NUM, INT, BOOL, STR = "number", "integer", "boolean", "string"
NUMS, STRS, VECS, TABLE = "number list", "string list", "list of number lists", "table"

SCHEMA = {
    "command": (STR, None),
    "seed": (INT, 0),
    "operator": (TABLE, None),
    "solver": (TABLE, {}),
    "boundary": (TABLE, {"kind": "affine", "slope": [1.0, 0.0]}),
    "rhs": (TABLE, None),
    "discretization": {
        "N": (INT, 32),
        "cells_per_period": (INT, 16),
        "cells": (INT, 64),
        "domain": {
            "type": (STR, "square"),
            "center": (NUMS, [0.5, 0.5]),
            "half_width": (NUM, 0.5),
            "radius": (NUM, 1.0),
        },
    },
    "ladder": {"epsilons": (NUMS, [0.125, 0.0625, 0.03125]), "ell": (INT, None), "rho": (NUM, None)},
    "measurement": {
        "quantity": (STR, "large-scale-cz"),
        "q": (NUM, None),
        "q_list": (NUMS, [3.0, 6.0, 12.0]),
        "ball": {"center": (NUMS, [0.5, 0.5]), "radius": (NUM, 0.4)},
    },
    "vtest": {
        "p": (NUMS, [1.5, 2.0, 3.0, 4.0]),
        "mu": (NUM, 1.0),
        "samples": (INT, 10000),
        "inequalities": (STRS, None),
        "dim": (INT, 2),
    },
    "check": {"assumptions": (STRS, None), "samples": (INT, 20000), "cap": (NUM, 1e3)},
    "cell": {"xi": (VECS, [[1.0, 0.0]]), "flux_corrector": (BOOL, True)},
    "effective": {"magnitudes": (INT, 8), "directions": (INT, 8), "lo": (NUM, 1e-2), "hi": (NUM, 1e2)},
    "bvp": {"epsilon": (NUM, 0.125), "effective": (BOOL, True)},
    "checks": {
        "gated": (STRS, None),
        "exploratory": (STRS, None),
        "uniformity_max": (NUM, 2.0),
        "min_beta": (NUM, None),
        "phi_tol": (NUM, 1e-8),
    },
    "output": {"directory": (STR, "out"), "formats": (STRS, ["json", "csv"])},
}

# not part of the experiment's meaning: excluded from the config hash
NON_SEMANTIC = ("output",)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_leaf(kind, v, path):
    ok = {
        NUM: _is_num(v),
        INT: isinstance(v, int) and not isinstance(v, bool),
        BOOL: isinstance(v, bool),
        STR: isinstance(v, str),
        NUMS: isinstance(v, list) and all(_is_num(x) for x in v),
        STRS: isinstance(v, list) and all(isinstance(x, str) for x in v),
        VECS: isinstance(v, list) and all(isinstance(r, list) and all(_is_num(x) for x in r) for r in v),
        TABLE: isinstance(v, dict),
    }[kind]
    if not ok:
        raise InvalidArgument(f"{path}: expected {kind}, got {type(v).__name__}")
    if kind == NUM:
        return float(v)
    if kind == NUMS:
        return [float(x) for x in v]
    if kind == VECS:
        return [[float(x) for x in r] for r in v]
    return copy.deepcopy(v)


def _resolve(data, schema, path):
    if not isinstance(data, dict):
        raise InvalidArgument(f"{path or 'config'}: expected a table")
    extra = sorted(set(data) - set(schema))
    if extra:
        raise InvalidArgument(f"{path + '.' if path else ''}{extra[0]}: unknown key")
    out = {}
    for key, node in schema.items():
        p = f"{path}.{key}" if path else key
        if isinstance(node, dict):
            out[key] = _resolve(data.get(key, {}), node, p)
            continue
        kind, default = node
        if key in data:
            out[key] = _check_leaf(kind, data[key], p)
        else:
            out[key] = copy.deepcopy(default)
    return out


def resolve(data: dict, command: str | None = None) -> dict:
    """Validate a parsed config and fill defaults; errors name the offending field."""
    cfg = _resolve(data, SCHEMA, "")
    if cfg["command"] is None:
        cfg["command"] = command
    elif command is not None and cfg["command"] != command:
        raise InvalidArgument(f"command: config is for {cfg['command']!r}, invoked as {command!r}")
    if cfg["command"] not in COMMANDS:
        raise InvalidArgument(f"command: unknown command {cfg['command']!r}; expected one of {list(COMMANDS)}")
    if cfg["command"] != "vtest":
        if cfg["operator"] is None:
            raise InvalidArgument("operator: missing required table")
        cfg["operator"] = OperatorSpec.from_dict(cfg["operator"]).to_dict()
    SolverConfig.from_dict(cfg["solver"])
    if cfg["discretization"]["domain"]["type"] not in ("square", "disk"):
        raise InvalidArgument("discretization.domain.type: expected 'square' or 'disk'")
    for fmt in cfg["output"]["formats"]:
        if fmt not in ("json", "csv"):
            raise InvalidArgument(f"output.formats: unknown format {fmt!r}")
    return cfg


def load(path, command=None) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidArgument(f"config: cannot read {path}: {exc.strerror}") from None
    try:
        data = _toml_loads(text)
    except ValueError as exc:
        raise InvalidArgument(f"config: TOML parse error: {exc}") from None
    return resolve(data, command)


def semantic(cfg: dict) -> dict:
    """The resolved config without fields that cannot change results."""
    return {k: v for k, v in cfg.items() if k not in NON_SEMANTIC}


def config_hash(cfg: dict) -> str:
    """Hash of the semantic fields; independent of key order and output location."""
    return hashlib.sha256(json.dumps(semantic(cfg), sort_keys=True, separators=(",", ":")).encode()).hexdigest()
