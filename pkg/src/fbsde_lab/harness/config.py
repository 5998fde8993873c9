"""Experiment configuration: dataclasses, JSON loading and schema checks."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..errors import SchemaError

SEED_ENV = "FBSDE_LAB_SEED"
OUTPUT_ENV = "FBSDE_LAB_OUTPUT_DIR"

DEFAULT_SEED = 20240601


@dataclass
class GridConfig:
    t0: float = 0.0
    T: float = 1.0
    N: int = 200


@dataclass
class McConfig:
    M: int = 10_000
    seed: int = DEFAULT_SEED
    antithetic: bool = True


@dataclass
class BasisConfig:
    degree: int = 2
    variables: list = field(default_factory=lambda: ["x", "w"])
    ridge: float = 1e-8


@dataclass
class ExperimentConfig:
    experiment: str
    problem: dict = field(default_factory=dict)
    grid: GridConfig = field(default_factory=GridConfig)
    mc: McConfig = field(default_factory=McConfig)
    basis: BasisConfig = field(default_factory=BasisConfig)
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"grid.N": 50})``."""
        d = json.loads(json.dumps(self.to_dict()))
        for key, val in changes.items():
            node = d
            *head, last = key.split(".")
            for h in head:
                node = node[h]
            node[last] = val
        return from_dict(d, apply_env=False)


_SECTIONS = {"grid": GridConfig, "mc": McConfig, "basis": BasisConfig}
_TYPES = {
    "grid": {"t0": (int, float), "T": (int, float), "N": int},
    "mc": {"M": int, "seed": int, "antithetic": bool},
    "basis": {"degree": int, "variables": list, "ridge": (int, float)},
}


def _type_ok(val, typ) -> bool:
    if typ is int or typ == (int,):
        return isinstance(val, int) and not isinstance(val, bool)
    if typ == (int, float):
        return isinstance(val, (int, float)) and not isinstance(val, bool)
    return isinstance(val, typ)


def from_dict(raw: dict, apply_env: bool = True) -> ExperimentConfig:
    """Validate a raw mapping and fill in defaults from the experiment registry.

    Raises :class:`SchemaError` listing every offending key.
    """
    from .experiments import REGISTRY
    from .problems import problem_errors

    if not isinstance(raw, dict):
        raise SchemaError("configuration must be a JSON object", ("<root>",))
    bad: list = []
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    bad += [k for k in raw if k not in allowed]
    name = raw.get("experiment")
    if not isinstance(name, str) or name not in REGISTRY:
        raise SchemaError(f"unknown experiment {name!r}; known: {sorted(REGISTRY)}", ("experiment",))
    exp = REGISTRY[name]
    sections = {}
    for sec, cls in _SECTIONS.items():
        given = raw.get(sec, {})
        if not isinstance(given, dict):
            bad.append(sec)
            given = {}
        merged = {**dataclasses.asdict(cls()), **exp.defaults.get(sec, {})}
        for key, val in given.items():
            if key not in merged:
                bad.append(f"{sec}.{key}")
            elif not _type_ok(val, _TYPES[sec][key]):
                bad.append(f"{sec}.{key}")
            else:
                merged[key] = val
        sections[sec] = cls(**merged)
    problem = raw.get("problem", {})
    if not isinstance(problem, dict):
        bad.append("problem")
        problem = {}
    if problem.get("kind", exp.problem.get("kind")) == exp.problem.get("kind"):
        problem = {**exp.problem, **problem}
    else:
        problem = dict(problem)
    bad += problem_errors(problem)
    params = raw.get("params", {})
    tols = raw.get("tolerances", {})
    for label, given, ref in (("params", params, exp.params), ("tolerances", tols, exp.tolerances)):
        if not isinstance(given, dict):
            bad.append(label)
            continue
        bad += [f"{label}.{k}" for k in given if k not in ref]
    out = raw.get("output_dir", "runs")
    if not isinstance(out, str):
        bad.append("output_dir")
        out = "runs"
    if bad:
        raise SchemaError("invalid configuration", tuple(bad))
    mc = sections["mc"]
    grid = sections["grid"]
    if grid.N < 1 or mc.M < 1 or grid.T <= grid.t0:
        raise SchemaError("grid/mc sizes out of range",
                          tuple(k for k, ok in (("grid.N", grid.N >= 1), ("mc.M", mc.M >= 1),
                                                ("grid.T", grid.T > grid.t0)) if not ok))
    cfg = ExperimentConfig(
        experiment=name,
        problem=problem,
        grid=grid,
        mc=mc,
        basis=sections["basis"],
        params={**exp.params, **(params if isinstance(params, dict) else {})},
        tolerances={**exp.tolerances, **(tols if isinstance(tols, dict) else {})},
        output_dir=out,
    )
    return apply_env_overrides(cfg) if apply_env else cfg


def apply_env_overrides(cfg: ExperimentConfig, env: Optional[dict] = None) -> ExperimentConfig:
    """``FBSDE_LAB_SEED`` replaces the seed, ``FBSDE_LAB_OUTPUT_DIR`` the output directory."""
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.mc.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise SchemaError(f"{SEED_ENV} must be an integer", (SEED_ENV,)) from exc
    if env.get(OUTPUT_ENV):
        cfg.output_dir = env[OUTPUT_ENV]
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw: Any = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}", ("<file>",)) from exc
    return from_dict(raw)


def default_config(name: str, **overrides) -> ExperimentConfig:
    """Registry defaults for ``name`` (no environment overrides) with dotted-path changes."""
    cfg = from_dict({"experiment": name}, apply_env=False)
    return cfg.replace(**overrides) if overrides else cfg
