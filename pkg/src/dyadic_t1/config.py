"""Experiment configuration: a YAML document with optional per-command sections."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .desk import DESK
from .grid import gamma


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dims: tuple = (1, 1)
    N: int = DESK["N"]
    L: int = 0
    r: int = DESK["r"]
    gam: float | None = None
    alpha: float | None = None
    d_lambda: float | None = None
    bad_const: float = DESK["bad_const"]
    seed: int | None = None
    measures: tuple = ("random_iid", "uniform")
    trials: int | None = None
    out: str = "results"
    threads: int = 1
    commands: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.measures = tuple(self.measures)
        if len(self.dims) != 2 or any(d not in (1, 2) for d in self.dims):
            raise ConfigError("dims must be a pair with entries in {1, 2}")
        if self.N < 1 or self.L < 0:
            raise ConfigError("need N >= 1 and L >= 0")
        if self.r < 1:
            raise ConfigError("r must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.alpha is not None and self.d_lambda is not None:
            g = gamma(self.alpha, self.d_lambda)
            if self.gam is not None and abs(g - self.gam) > 1e-12:
                raise ConfigError(f"gam={self.gam} disagrees with gamma(alpha, d_lambda)={g}")
            self.gam = g
        if self.gam is not None and not 0 < self.gam < 1:
            raise ConfigError("gam must lie in (0, 1)")

    @property
    def gamma_value(self) -> float:
        return DESK["gam"] if self.gam is None else self.gam

    @property
    def depth(self) -> int:
        return self.N + self.L

    def option(self, command: str, name: str, default=None):
        return self.commands.get(command, {}).get(name, default)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        d["measures"] = list(self.measures)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        d = yaml.safe_load(text) or {}
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("a seed is required for randomized runs (--seed or config)")
        return int(self.seed)
