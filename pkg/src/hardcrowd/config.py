"""Scenario configuration: YAML files mapped onto dataclasses.

Every field has a default, and ``scenario_to_dict`` writes the fully resolved
tree, so the manifest of a run is itself a valid scenario file.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml


class ConfigError(ValueError):
    """A scenario value is missing, mistyped or out of range; the message names the field path."""


@dataclass
class RoomSpec:
    outer: list = field(default_factory=lambda: [[0.0, 0.0], [10.0, 0.0], [10.0, 4.0], [0.0, 4.0]])
    obstacles: list = field(default_factory=list)
    exits: list = field(default_factory=lambda: [[[10.0, 1.5], [10.0, 2.5]]])


@dataclass
class FieldSpec:
    kind: str = "exit"  # exit: shortest path to the exits; uniform: constant vector
    speed: float = 1.0
    velocity: list = field(default_factory=lambda: [1.0, 0.0])


@dataclass
class TypeSpec:
    field: str = "default"
    strategy: str = "none"  # none | decelerate | bypass
    l_prox: float = 0.5
    alpha_deg: float = 60.0


@dataclass
class PopulationSpec:
    kind: str = "random"  # random | lattice | positions
    count: int = 50
    region: list = field(default_factory=lambda: [0.5, 0.5, 5.0, 3.5])
    lattice: str = "triangular"
    positions: list = field(default_factory=list)
    types: list = field(default_factory=list)  # per-disk type names; empty means all "default"
    type_regions: list = field(default_factory=list)  # [{box: [...], type: name}], later entries win
    margin: float = 0.0  # extra clearance between disks in random fills


@dataclass
class SolverSpec:
    tol_geom: float | None = None
    tol_kkt: float | None = None
    max_iter: int | None = None
    eps_act: float | None = None
    accelerate: bool = True


@dataclass
class MicroSpec:
    radius: float = 0.2
    population: PopulationSpec = field(default_factory=PopulationSpec)
    types: dict = field(default_factory=lambda: {"default": TypeSpec()})
    solver: SolverSpec = field(default_factory=SolverSpec)
    stop_on_jam: bool = True
    jam_window: int = 200
    jam_speed_tol: float = 1e-3


@dataclass
class RectSpec:
    box: list = field(default_factory=lambda: [0.0, 0.0, 1.0, 1.0])
    density: float = 1.0
    population: int = 0


@dataclass
class MacroSpec:
    populations: int = 1
    initial: str = "rectangles"  # rectangles | raster | from_micro
    rectangles: list = field(default_factory=list)
    raster: list = field(default_factory=list)  # CSV paths, one per population, rows top-down
    fields: list = field(default_factory=lambda: ["default"])  # one field name per population
    alpha: str = "none"  # none | linear
    quantum: float = 1.0
    max_walk_steps: int = 10**9
    rho_ref: Any = "max"  # "max" or a number, used when initial = from_micro
    stop_below: float = 1e-9  # stop once interior mass falls below this (relative to the start)


@dataclass
class OutputSpec:
    frame_stride: int = 10
    frames: bool = True


@dataclass
class Scenario:
    name: str = "scenario"
    model: str = "micro"  # micro | macro | both
    seed: int = 0
    tau: float = 0.01
    steps: int = 1000
    resolution: float = 0.1
    room: RoomSpec = field(default_factory=RoomSpec)
    fields: dict = field(default_factory=lambda: {"default": FieldSpec()})
    micro: MicroSpec = field(default_factory=MicroSpec)
    macro: MacroSpec = field(default_factory=MacroSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    base_dir: str = "."  # directory relative raster paths are resolved against


_NESTED = {
    (Scenario, "room"): RoomSpec,
    (Scenario, "micro"): MicroSpec,
    (Scenario, "macro"): MacroSpec,
    (Scenario, "output"): OutputSpec,
    (MicroSpec, "population"): PopulationSpec,
    (MicroSpec, "solver"): SolverSpec,
}
_MAPS = {(Scenario, "fields"): FieldSpec, (MicroSpec, "types"): TypeSpec}
_LISTS = {(MacroSpec, "rectangles"): RectSpec}


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'scenario'}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key (allowed: {', '.join(names)})")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if (cls, key) in _NESTED:
            kwargs[key] = _build(_NESTED[(cls, key)], value, sub)
        elif (cls, key) in _MAPS:
            if not isinstance(value, dict):
                raise ConfigError(f"{sub}: expected a mapping of names to entries")
            kwargs[key] = {str(k): _build(_MAPS[(cls, key)], v, f"{sub}.{k}") for k, v in value.items()}
        elif (cls, key) in _LISTS:
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[key] = [_build(_LISTS[(cls, key)], v, f"{sub}[{k}]") for k, v in enumerate(value)]
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _require(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate(s: Scenario) -> Scenario:
    _require(s.model in ("micro", "macro", "both"), "model", f"expected micro, macro or both, got {s.model!r}")
    _require(_number(s.tau) and s.tau > 0, "tau", "must be a positive number")
    _require(isinstance(s.steps, int) and s.steps >= 0, "steps", "must be a non-negative integer")
    _require(_number(s.resolution) and s.resolution > 0, "resolution", "must be a positive number")
    _require(isinstance(s.seed, int) and s.seed >= 0, "seed", "must be a non-negative integer")
    _require(isinstance(s.output.frame_stride, int) and s.output.frame_stride >= 1, "output.frame_stride", "must be >= 1")
    for name, f in s.fields.items():
        _require(f.kind in ("exit", "uniform"), f"fields.{name}.kind", "expected exit or uniform")
        _require(_number(f.speed) and f.speed >= 0, f"fields.{name}.speed", "must be non-negative")
        _require(len(f.velocity) == 2 and all(_number(v) for v in f.velocity), f"fields.{name}.velocity", "must be two numbers")
    m = s.micro
    if s.model in ("micro", "both"):
        _require(_number(m.radius) and m.radius > 0, "micro.radius", "must be positive")
        p = m.population
        _require(p.kind in ("random", "lattice", "positions"), "micro.population.kind", "expected random, lattice or positions")
        if p.kind == "positions":
            _require(len(p.positions) > 0, "micro.population.positions", "must list at least one position")
        else:
            _require(isinstance(p.count, int) and p.count >= 0, "micro.population.count", "must be a non-negative integer")
            _require(len(p.region) == 4, "micro.population.region", "expected [xmin, ymin, xmax, ymax]")
        for t, ts in m.types.items():
            _require(ts.field in s.fields, f"micro.types.{t}.field", f"no field named {ts.field!r}")
            _require(ts.strategy in ("none", "decelerate", "bypass"), f"micro.types.{t}.strategy", "expected none, decelerate or bypass")
            _require(0 < ts.alpha_deg < 180, f"micro.types.{t}.alpha_deg", "must lie in (0, 180)")
            _require(ts.l_prox >= 0, f"micro.types.{t}.l_prox", "must be non-negative")
        for k, t in enumerate(p.types):
            _require(t in m.types, f"micro.population.types[{k}]", f"no type named {t!r}")
        for k, tr in enumerate(p.type_regions):
            _require(isinstance(tr, dict) and tr.get("type") in m.types, f"micro.population.type_regions[{k}].type", "unknown type")
            _require(len(tr.get("box", [])) == 4, f"micro.population.type_regions[{k}].box", "expected [xmin, ymin, xmax, ymax]")
        _require(m.jam_window >= 1, "micro.jam_window", "must be >= 1")
    M = s.macro
    if s.model in ("macro", "both"):
        _require(M.populations in (1, 2), "macro.populations", "must be 1 or 2")
        _require(M.initial in ("rectangles", "raster", "from_micro"), "macro.initial", "expected rectangles, raster or from_micro")
        if M.initial == "from_micro":
            _require(s.model == "both", "macro.initial", "from_micro needs model: both")
            _require(M.populations == 1, "macro.populations", "from_micro builds a single population")
        if M.initial == "raster":
            _require(len(M.raster) == M.populations, "macro.raster", "one CSV path per population is required")
        for k, r in enumerate(M.rectangles):
            _require(len(r.box) == 4, f"macro.rectangles[{k}].box", "expected [xmin, ymin, xmax, ymax]")
            _require(_number(r.density) and 0 <= r.density <= 1, f"macro.rectangles[{k}].density", "must lie in [0, 1]")
            _require(0 <= r.population < M.populations, f"macro.rectangles[{k}].population", "no such population")
        _require(len(M.fields) == M.populations, "macro.fields", "one field name per population is required")
        for k, f in enumerate(M.fields):
            _require(f in s.fields, f"macro.fields[{k}]", f"no field named {f!r}")
        _require(M.alpha in ("none", "linear"), "macro.alpha", "expected none or linear")
        _require(_number(M.quantum) and M.quantum > 0, "macro.quantum", "must be positive")
        _require(M.rho_ref == "max" or (_number(M.rho_ref) and 0 < M.rho_ref <= 1), "macro.rho_ref", "expected 'max' or a number in (0, 1]")
    return s


def scenario_from_dict(data: dict, base_dir: str | Path | None = None) -> Scenario:
    s = _build(Scenario, data, "")
    if base_dir is not None and "base_dir" not in (data or {}):
        s.base_dir = str(base_dir)
    return validate(s)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return scenario_from_dict(data or {}, base_dir=path.parent.resolve())


def _plain(x):
    if dataclasses.is_dataclass(x):
        return {f.name: _plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def scenario_to_dict(s: Scenario) -> dict:
    return _plain(s)


def dump_scenario(s: Scenario, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario_to_dict(s), fh, sort_keys=False)


def seeds(seed: int) -> dict[str, int]:
    """Per-subsystem seeds: children 0, 1, 2 of ``SeedSequence(seed)`` feed the initial fill, the projection and spare use."""
    kids = np.random.SeedSequence(seed).spawn(3)
    names = ("population", "projection", "spare")
    return {n: int(k.generate_state(1, dtype=np.uint32)[0]) for n, k in zip(names, kids)}
