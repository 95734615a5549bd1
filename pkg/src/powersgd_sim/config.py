"""Experiment configuration: a flat JSON object validated fail-closed."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .cluster import Schedule, make_rng
from .errors import ConfigError, PreconditionError
from .problems import CounterexampleProblem, ProblemSpec, QuadraticProblem

PROBLEMS = ("counterexample", "quadratic")


@dataclass(frozen=True)
class RunConfig:
    problem: str = "counterexample"
    sigma: float = 1.0  # counterexample oracle scale
    target_seed: int = 0  # quadratic target ~ N(0, 1) from this seed
    noise_sigma: float = 0.0  # quadratic oracle noise, E||noise||^2 = noise_sigma^2
    N: int = 4
    m: int = 2
    n: int = 2
    r: int = 1
    tau: int = 1
    eta: float | str = 0.01
    mu: float = 0.0
    T: int = 100
    trials: int = 1
    master_seed: int = 0
    schedule: str = "powersgd"
    force_xi0_ones: bool = False
    # Extras with defaults; not required in config files.
    tail: int = 200  # final-window length for the convergence check
    converge_tol: float | None = None  # None: 0.1 * epsilon_0 on the counterexample
    oracle_samples: int = 10_000
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        try:
            Schedule(self.schedule)
        except ValueError:
            raise ConfigError(f"unknown schedule {self.schedule!r}") from None
        for name in ("N", "m", "n", "r", "tau", "T", "trials", "tail", "workers"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, int) or val < 1:
                raise ConfigError(f"{name} must be a positive integer, got {val!r}")
        for name in ("master_seed", "target_seed", "oracle_samples"):
            val = getattr(self, name)
            if isinstance(val, bool) or not isinstance(val, int) or val < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {val!r}")
        if not self.r <= self.n <= self.m:
            raise ConfigError(f"need r <= n <= m, got r={self.r}, n={self.n}, m={self.m}")
        if self.problem == "counterexample" and (self.m, self.n) != (2, 2):
            raise ConfigError("the counterexample problem is 2x2")
        if not _is_number(self.mu) or not 0.0 <= self.mu < 1.0:
            raise ConfigError(f"mu must lie in [0, 1), got {self.mu!r}")
        if isinstance(self.eta, str):
            if self.eta != "theoretical":
                raise ConfigError(f"eta must be a number or 'theoretical', got {self.eta!r}")
        elif not _is_number(self.eta) or not self.eta > 0 or not math.isfinite(self.eta):
            raise ConfigError(f"eta must be > 0, got {self.eta!r}")
        for name in ("sigma", "noise_sigma"):
            val = getattr(self, name)
            if not _is_number(val) or not val >= 0 or not math.isfinite(val):
                raise ConfigError(f"{name} must be a finite number >= 0, got {val!r}")
        if self.converge_tol is not None and (not _is_number(self.converge_tol) or self.converge_tol < 0):
            raise ConfigError(f"converge_tol must be >= 0, got {self.converge_tol!r}")
        if not isinstance(self.force_xi0_ones, bool):
            raise ConfigError("force_xi0_ones must be a boolean")

    @property
    def schedule_kind(self) -> Schedule:
        return Schedule(self.schedule)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_values(self, **kw) -> "RunConfig":
        try:
            return replace(self, **kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**data)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(data)


def load_sweep(path) -> list[tuple[str, list]]:
    """Parse a sweep spec ``{"name": [values, ...], ...}``; order is preserved."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load sweep spec {path}: {exc}") from None
    if not isinstance(data, dict) or not data:
        raise ConfigError("sweep spec must be a non-empty JSON object")
    grid = []
    for name, values in data.items():
        if name not in FIELD_NAMES:
            raise ConfigError(f"unknown sweep parameter {name!r}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep parameter {name!r} needs a non-empty list of values")
        grid.append((name, values))
    return grid


def build_problem(config: RunConfig) -> ProblemSpec:
    try:
        if config.problem == "counterexample":
            return CounterexampleProblem(config.sigma, force_xi0=config.force_xi0_ones)
        target = make_rng(config.target_seed).standard_normal((config.m, config.n))
        return QuadraticProblem(config.m, config.n, target, config.noise_sigma)
    except PreconditionError as exc:
        raise ConfigError(str(exc)) from None


def describe(config: RunConfig) -> str:
    eta = config.eta if isinstance(config.eta, str) else f"{config.eta:g}"
    return (f"{config.problem} {config.schedule} N={config.N} r={config.r} tau={config.tau} "
            f"eta={eta} mu={config.mu:g} T={config.T} trials={config.trials}")

