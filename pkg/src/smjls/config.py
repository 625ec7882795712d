"""Config file loading and validation for the command line front end.

Configs are YAML documents of two kinds. kind: system declares a mode
chain directly: per-mode constant Metzler matrices, optional posynomial
entry tables ({coeff, exponents} term lists, or 0 for an absent entry),
the embedded chain, a sojourn law per mode or per edge, and optional
cost/constraint posynomials. kind: bethedging declares the biological
dosing model (growth, switching, antibiotics, budget, sojourn) and the
mode system is built from it.

Validation is two-staged: a JSON-schema pass that reports the failing
field by path, then the library constructors, whose semantic errors are
re-raised as ConfigError so callers never see a stack trace for a bad
document. Every loaded config keeps the raw parsed document for
echoing into run reports.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import jsonschema
import numpy as np
import yaml

from .bethedging import Antibiotic, BetHedgingParams, build_system, weibull_scale_for_mean
from .optimizer import SolverOptions
from .posy import ZERO, Monomial, Posynomial, PosyOrZero
from .system import (
    DiracSojourn,
    ParametrizedSystem,
    SemiMarkovSpec,
    SojournDistribution,
    TruncatedExponential,
    TruncatedWeibull,
    UniformSojourn,
)

__all__ = ["ConfigError", "LoadedConfig", "load_config"]


class ConfigError(Exception):
    """A config document problem, located by field path where possible."""


_TERM_SCHEMA = {
    "type": "object",
    "properties": {
        "coeff": {"type": "number", "exclusiveMinimum": 0},
        "exponents": {"type": "array", "items": {"type": "number"}, "minItems": 1},
    },
    "required": ["coeff", "exponents"],
    "additionalProperties": False,
}

_POSY_SCHEMA = {"type": "array", "items": _TERM_SCHEMA, "minItems": 1}

_ENTRY_SCHEMA = {"oneOf": [{"const": 0}, _POSY_SCHEMA]}

_MATRIX_SCHEMA = {
    "type": "array",
    "items": {"type": "array", "items": {"type": "number"}, "minItems": 1},
    "minItems": 1,
}

_SOJOURN_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["weibull", "exponential", "uniform", "dirac"]},
        "scale": {"type": "number"},
        "shape": {"type": "number"},
        "rate": {"type": "number"},
        "point": {"type": "number"},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["kind", "horizon"],
    "additionalProperties": False,
}

_SOLVER_SCHEMA = {
    "type": "object",
    "properties": {f.name: {"type": ["number", "integer"]} for f in fields(SolverOptions)},
    "additionalProperties": False,
}

_SYSTEM_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"const": "system"},
        "param_dim": {"type": "integer", "minimum": 0},
        "chain": {
            "type": "object",
            "properties": {"P": _MATRIX_SCHEMA},
            "required": ["P"],
            "additionalProperties": False,
        },
        "sojourn": {
            "type": "object",
            "properties": {
                "per_mode": {"type": "array", "items": _SOJOURN_SCHEMA, "minItems": 1},
                "table": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": {"oneOf": [{"type": "null"}, _SOJOURN_SCHEMA]},
                    },
                    "minItems": 1,
                },
            },
            "oneOf": [{"required": ["per_mode"]}, {"required": ["table"]}],
            "additionalProperties": False,
        },
        "modes": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "metzler": _MATRIX_SCHEMA,
                    "varying": {
                        "type": "array",
                        "items": {"type": "array", "items": _ENTRY_SCHEMA},
                    },
                },
                "required": ["metzler"],
                "additionalProperties": False,
            },
            "minItems": 1,
        },
        "cost": _POSY_SCHEMA,
        "constraints": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "terms": _POSY_SCHEMA,
                    "bound": {"type": "number", "exclusiveMinimum": 0},
                },
                "required": ["terms", "bound"],
                "additionalProperties": False,
            },
        },
        "solver": _SOLVER_SCHEMA,
    },
    "required": ["kind", "param_dim", "chain", "sojourn", "modes"],
    "additionalProperties": False,
}

_BETHEDGING_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"const": "bethedging"},
        "growth": _MATRIX_SCHEMA,
        "switching": {"type": "array", "items": _MATRIX_SCHEMA, "minItems": 2},
        "antibiotics": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "max_dose": {"type": "number", "exclusiveMinimum": 0},
                    "offset": {"type": "number", "exclusiveMinimum": 0},
                    "sharpness": {"type": "number", "exclusiveMinimum": 0},
                    "potency": {
                        "type": "array",
                        "items": {"type": "number", "minimum": 0},
                        "minItems": 1,
                    },
                    "unit_cost": {"type": "number", "exclusiveMinimum": 0},
                },
                "required": ["max_dose", "offset", "sharpness", "potency"],
                "additionalProperties": False,
            },
            "minItems": 1,
        },
        "budget": {"type": "number", "exclusiveMinimum": 0},
        "sojourn": {
            "type": "object",
            "properties": {
                "scale": {"oneOf": [{"type": "number"}, _MATRIX_SCHEMA]},
                "shape": {"oneOf": [{"type": "number"}, _MATRIX_SCHEMA]},
                "mean": {"type": "number", "exclusiveMinimum": 0},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
            },
            "oneOf": [
                {"required": ["scale", "shape", "horizon"], "not": {"required": ["mean"]}},
                {"required": ["mean", "shape"], "not": {"required": ["scale"]}},
            ],
            "additionalProperties": False,
        },
        "solver": _SOLVER_SCHEMA,
    },
    "required": ["kind", "growth", "switching", "antibiotics", "budget", "sojourn"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class LoadedConfig:
    """A validated config with its built system and raw echo document."""

    kind: str
    system: ParametrizedSystem
    params: BetHedgingParams | None
    solver: SolverOptions
    raw: dict
    path: str


def _schema_check(doc, schema) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(f"{err.json_path}: {err.message}")


def _build_posy(terms) -> Posynomial:
    return Posynomial([Monomial(t["coeff"], tuple(t["exponents"])) for t in terms])


def _build_entry(entry) -> PosyOrZero:
    return ZERO if entry == 0 else _build_posy(entry)


def _build_sojourn(spec, where: str) -> SojournDistribution:
    kind = spec["kind"]
    horizon = spec["horizon"]
    needs = {"weibull": ("scale", "shape"), "exponential": ("rate",), "uniform": (), "dirac": ("point",)}
    missing = [k for k in needs[kind] if k not in spec]
    stray = [k for k in spec if k not in needs[kind] + ("kind", "horizon")]
    if missing or stray:
        detail = f"missing {missing}" if missing else f"unexpected {stray}"
        raise ConfigError(f"{where}: {kind} sojourn {detail}")
    if kind == "weibull":
        return TruncatedWeibull(spec["scale"], spec["shape"], horizon)
    if kind == "exponential":
        return TruncatedExponential(spec["rate"], horizon)
    if kind == "uniform":
        return UniformSojourn(horizon)
    return DiracSojourn(spec["point"], horizon)


def _build_solver(doc) -> SolverOptions:
    overrides = doc.get("solver", {})
    ints = {f.name for f in fields(SolverOptions) if f.type == "int"}
    kwargs = {k: int(v) if k in ints else float(v) for k, v in overrides.items()}
    try:
        return SolverOptions(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"$.solver: {exc}") from exc


def _load_system(doc) -> ParametrizedSystem:
    P = doc["chain"]["P"]
    N = len(P)
    soj = doc["sojourn"]
    if "per_mode" in soj:
        dists = [
            _build_sojourn(s, f"$.sojourn.per_mode[{i}]")
            for i, s in enumerate(soj["per_mode"])
        ]
        if len(dists) != N:
            raise ConfigError(
                f"$.sojourn.per_mode: lists {len(dists)} laws for a {N}-mode chain"
            )
        chain = SemiMarkovSpec.per_mode(P, dists)
    else:
        table = [
            [
                None if s is None else _build_sojourn(s, f"$.sojourn.table[{i}][{j}]")
                for j, s in enumerate(row)
            ]
            for i, row in enumerate(soj["table"])
        ]
        chain = SemiMarkovSpec(P, table)

    dim = doc["param_dim"]
    metzler = []
    varying = []
    for k, mode in enumerate(doc["modes"]):
        M = np.array(mode["metzler"], dtype=float)
        n = M.shape[0] if M.ndim == 2 else 0
        grid = mode.get("varying")
        if grid is None:
            grid = [[0] * n for _ in range(n)]
        metzler.append(M)
        varying.append([[_build_entry(e) for e in row] for row in grid])
    cost = _build_posy(doc["cost"]) if "cost" in doc else None
    cons = [(_build_posy(c["terms"]), c["bound"]) for c in doc.get("constraints", [])]
    return ParametrizedSystem(metzler, varying, chain, dim, cost=cost, constraints=cons)


def _load_bethedging(doc) -> BetHedgingParams:
    meds = [
        Antibiotic(
            max_dose=a["max_dose"],
            offset=a["offset"],
            sharpness=a["sharpness"],
            potency=tuple(a["potency"]),
            unit_cost=a.get("unit_cost", 1.0),
        )
        for a in doc["antibiotics"]
    ]
    soj = doc["sojourn"]
    if "mean" in soj:
        shape = soj["shape"]
        if not isinstance(shape, (int, float)):
            raise ConfigError("$.sojourn.shape: a mean-specified sojourn needs a scalar shape")
        horizon = soj.get("horizon", 5.0 * soj["mean"])
        scale = weibull_scale_for_mean(soj["mean"], shape, horizon)
    else:
        scale, shape, horizon = soj["scale"], soj["shape"], soj["horizon"]
    return BetHedgingParams(
        growth=doc["growth"],
        switching=doc["switching"],
        antibiotics=meds,
        budget=doc["budget"],
        sojourn_scale=scale,
        sojourn_shape=shape,
        horizon=horizon,
    )


def load_config(path) -> LoadedConfig:
    """Parse, schema-check, and build the objects a config declares.

    Raises ConfigError for anything wrong with the document: YAML syntax
    (with line/column), schema violations (with field path), or semantic
    rejections from the library constructors.
    """
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"invalid YAML in {path}{where}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    kind = doc.get("kind")
    if kind not in ("system", "bethedging"):
        raise ConfigError("$.kind: must be 'system' or 'bethedging'")
    schema = _SYSTEM_SCHEMA if kind == "system" else _BETHEDGING_SCHEMA
    _schema_check(doc, schema)
    solver = _build_solver(doc)
    try:
        if kind == "system":
            system = _load_system(doc)
            params = None
        else:
            params = _load_bethedging(doc)
            system = build_system(params)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return LoadedConfig(
        kind=kind, system=system, params=params, solver=solver, raw=doc, path=str(path)
    )
