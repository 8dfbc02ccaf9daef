"""Experiment configuration: a versioned YAML file mapped onto typed blocks."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Validation failure; ``path`` names the offending field (``solver.dt``)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class EnvironmentBlock:
    dimension: int = 2
    half_width: float = 10.0
    intensity: float = 4.0
    seeds: list = field(default_factory=lambda: [0])
    constant: bool = False  # m == 1 everywhere instead of a percolation sample
    periodic: bool = False  # identify opposite faces of the box


@dataclass
class FieldBlock:
    smoothing_radius: float = 0.25
    spec: str = "quadratic"  # quadratic | power
    power: float = 2.0
    drift: list | None = None  # constant b; None means b = 0


@dataclass
class SolverBlock:
    h: float = 0.015625
    dt: float | None = None  # None: cfl * largest stable step
    cfl: float = 0.9
    epsilons: list = field(default_factory=lambda: [0.5, 0.25, 0.125])
    T: float = 1.0
    half_width: float = 1.5
    theta: list = field(default_factory=lambda: [1.0, 0.0])  # linear initial data <theta, x>
    x: list = field(default_factory=lambda: [0.0, 0.0])
    mc_paths: int = 2000
    mc_dt: float = 0.01
    h_scales_with_eps: bool = True  # h = solver.h * eps / min(epsilons)


@dataclass
class EffectiveBlock:
    directions: int = 8
    radii: list = field(default_factory=lambda: [1.0])
    betas: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    support_ratio: float = 1.0
    h: float = 0.25
    maxiter: int = 300
    fk_T: float = 10.0
    fk_paths: int = 2000
    fk_dt: float = 0.01
    hopf_lax_t: float = 1.0


@dataclass
class LdpBlock:
    T: float = 50.0
    n_paths: int = 10000
    dt: float = 0.05
    speeds: list = field(default_factory=lambda: [0.0, 0.25, 0.5])
    radius: float = 1.5


@dataclass
class CorrectorBlock:
    radii: list = field(default_factory=lambda: [2.0, 4.0, 6.0, 8.0])
    probe_density: float = 16.0
    n_loops: int = 20
    support: float = 1.5
    spline_h: float = 0.5
    palm_configs: int = 100
    palm_half_width: float = 8.0
    epsilon: float = 0.1


@dataclass
class OutputBlock:
    directory: str = "out"


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    environment: EnvironmentBlock = dataclasses.field(default_factory=EnvironmentBlock)
    field: FieldBlock = dataclasses.field(default_factory=FieldBlock)
    solver: SolverBlock = dataclasses.field(default_factory=SolverBlock)
    effective: EffectiveBlock = dataclasses.field(default_factory=EffectiveBlock)
    ldp: LdpBlock = dataclasses.field(default_factory=LdpBlock)
    corrector: CorrectorBlock = dataclasses.field(default_factory=CorrectorBlock)
    output: OutputBlock = dataclasses.field(default_factory=OutputBlock)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        out = dataclasses.replace(self, environment=dataclasses.replace(self.environment, seeds=[int(seed)]))
        validate(out)
        return out


_BLOCK_TYPES = {"environment": EnvironmentBlock, "field": FieldBlock, "solver": SolverBlock,
                "effective": EffectiveBlock, "ldp": LdpBlock, "corrector": CorrectorBlock, "output": OutputBlock}


def _coerce(path: str, value: Any, default: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    # optional entries (default None) take null, a number or a list
    if value is None or isinstance(value, list):
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, a list or null, got {value!r}")
    return float(value)


def _build_block(name: str, raw: Any):
    cls = _BLOCK_TYPES[name]
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    proto = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", f"unknown key (allowed: {', '.join(sorted(known))})")
    kwargs = {k: _coerce(f"{name}.{k}", v, getattr(proto, k)) for k, v in raw.items()}
    return cls(**kwargs)


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    for key in raw:
        if key != "schema_version" and key not in _BLOCK_TYPES:
            raise ConfigError(key, "unknown top-level key")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version!r} (expected {SCHEMA_VERSION})")
    cfg = ExperimentConfig(version, **{k: _build_block(k, raw.get(k)) for k in _BLOCK_TYPES})
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    return from_dict(raw or {})


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def _positive(path: str, v) -> None:
    if v is None or not v > 0:
        raise ConfigError(path, f"must be positive, got {v!r}")


def validate(cfg: ExperimentConfig) -> None:
    env, fl, so, ef, ld, co = cfg.environment, cfg.field, cfg.solver, cfg.effective, cfg.ldp, cfg.corrector
    if env.dimension < 2:
        raise ConfigError("environment.dimension", "must be at least 2")
    for name in ("half_width", "intensity"):
        _positive(f"environment.{name}", getattr(env, name))
    if not env.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in env.seeds):
        raise ConfigError("environment.seeds", "must be a non-empty list of integers")
    if not 0 < fl.smoothing_radius <= 0.5:
        raise ConfigError("field.smoothing_radius", "must lie in (0, 1/2]")
    if fl.spec not in ("quadratic", "power"):
        raise ConfigError("field.spec", f"unknown Hamiltonian kind {fl.spec!r}")
    if fl.spec == "power" and not fl.power > 1:
        raise ConfigError("field.power", "must exceed 1")
    if fl.drift is not None and len(fl.drift) != env.dimension:
        raise ConfigError("field.drift", f"needs {env.dimension} components")
    for name in ("h", "cfl", "T", "half_width", "mc_dt"):
        _positive(f"solver.{name}", getattr(so, name))
    if so.cfl > 1:
        raise ConfigError("solver.cfl", "must not exceed 1")
    if not so.epsilons or any(not e > 0 for e in so.epsilons):
        raise ConfigError("solver.epsilons", "must be a non-empty list of positive numbers")
    for name in ("theta", "x"):
        if len(getattr(so, name)) != env.dimension:
            raise ConfigError(f"solver.{name}", f"needs {env.dimension} components")
    if so.mc_paths < 2:
        raise ConfigError("solver.mc_paths", "must be at least 2")
    for eps in so.epsilons:
        h = solver_h(cfg, eps)
        n = so.half_width / h
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("solver.half_width", f"must be a multiple of h = {h:g} (eps = {eps:g})")
        if so.dt is not None:
            _positive("solver.dt", so.dt)
            # diffusive part of the CFL sum at a saturated node (lambda = 1/2); necessary for stability
            rate = env.dimension * eps * 0.5 / h ** 2
            if so.dt * rate > 1:
                raise ConfigError("solver.dt", f"CFL inequality dt * d * eps * lambda_max / h^2 <= 1 violated "
                                               f"at eps = {eps:g}: {so.dt * rate:.4g} > 1")
    if ef.directions < 1:
        raise ConfigError("effective.directions", "must be at least 1")
    if not ef.betas or any(not b > 0 for b in ef.betas) or list(ef.betas) != sorted(ef.betas):
        raise ConfigError("effective.betas", "must be an increasing list of positive numbers")
    if not 0 < ef.support_ratio <= 1:
        raise ConfigError("effective.support_ratio", "must lie in (0, 1]")
    for name in ("h", "fk_T", "fk_dt", "hopf_lax_t"):
        _positive(f"effective.{name}", getattr(ef, name))
    if env.periodic or env.constant:
        n = 2 * env.half_width / ef.h
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("effective.h", "torus side must be a multiple of h")
    for name in ("T", "dt", "radius"):
        _positive(f"ldp.{name}", getattr(ld, name))
    if ld.T < 100 * ld.dt:
        raise ConfigError("ldp.T", "must be at least 100 dt")
    if not co.radii or list(co.radii) != sorted(set(co.radii)):
        raise ConfigError("corrector.radii", "must be strictly increasing")
    if not env.constant and max(co.radii) > env.half_width:
        raise ConfigError("corrector.radii", "must lie within the box")
    for name in ("probe_density", "support", "spline_h", "palm_half_width", "epsilon"):
        _positive(f"corrector.{name}", getattr(co, name))
    if not cfg.output.directory:
        raise ConfigError("output.directory", "must be non-empty")


def solver_h(cfg: ExperimentConfig, eps: float) -> float:
    so = cfg.solver
    if not so.h_scales_with_eps:
        return so.h
    return so.h * eps / min(so.epsilons)
