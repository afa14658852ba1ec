"""Dataclass configs and the key=value config file loader."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Unknown key, bad value, or unreadable config file."""


@dataclass(frozen=True)
class SimConfig:
    workspace: float = 0.4  # square tabletop side W, meters
    grid: int = 64          # heightmap cells per side
    crop: int = 24          # in-hand crop cells per side

    @property
    def cell(self) -> float:
        return self.workspace / self.grid


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.9
    n_step: int = 3
    margin: float = 0.1       # required Q gap below the expert action
    slm_weight: float = 1.0
    lr: float = 1e-3
    batch_size: int = 16
    target_sync: int = 100    # steps between target-net parameter copies
    steps: int = 2000
    seed: int = 0
    grid: int = 32            # action/observation grid used by the policy
    rotations: int = 8
    arch: str = "conv"        # "conv" or "patch" (linear on local patches)
    mask: str = "pick_nonempty"  # or "none"


@dataclass(frozen=True)
class LlmConfig:
    endpoint: str = ""
    model: str = ""
    temperature_decision: float = 1.0
    temperature_eval: float = 0.0
    temperature_corrector: float = 0.0
    max_in_flight: int = 4
    retries: int = 3
    backoff: float = 0.5
    timeout: float = 60.0

    def temperature_for(self, role: str) -> float:
        return {
            "decision": self.temperature_decision,
            "eval": self.temperature_eval,
            "corrector": self.temperature_corrector,
        }[role]


@dataclass(frozen=True)
class PathsConfig:
    demos: str = "demos"
    models: str = "models"
    fixtures: str = "fixtures"


@dataclass(frozen=True)
class AppConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


# config-file key -> (section attr, field name, parser)
_KEYS = {
    "sim.W": ("sim", "workspace", float),
    "sim.G": ("sim", "grid", int),
    "sim.C": ("sim", "crop", int),
    "llm.endpoint": ("llm", "endpoint", str),
    "llm.model": ("llm", "model", str),
    "llm.temperature_decision": ("llm", "temperature_decision", float),
    "llm.temperature_eval": ("llm", "temperature_eval", float),
    "llm.temperature_corrector": ("llm", "temperature_corrector", float),
    "llm.max_in_flight": ("llm", "max_in_flight", int),
    "llm.retries": ("llm", "retries", int),
    "llm.backoff": ("llm", "backoff", float),
    "llm.timeout": ("llm", "timeout", float),
    "learner.gamma": ("learner", "gamma", float),
    "learner.n_step": ("learner", "n_step", int),
    "learner.margin": ("learner", "margin", float),
    "learner.slm_weight": ("learner", "slm_weight", float),
    "learner.lr": ("learner", "lr", float),
    "learner.batch_size": ("learner", "batch_size", int),
    "learner.target_sync": ("learner", "target_sync", int),
    "learner.steps": ("learner", "steps", int),
    "learner.seed": ("learner", "seed", int),
    "learner.grid": ("learner", "grid", int),
    "learner.rotations": ("learner", "rotations", int),
    "learner.arch": ("learner", "arch", str),
    "learner.mask": ("learner", "mask", str),
    "paths.demos": ("paths", "demos", str),
    "paths.models": ("paths", "models", str),
    "paths.fixtures": ("paths", "fixtures", str),
}

ENV_CONFIG = "ROBOTGPT_CONFIG"
ENV_API_KEY = "ROBOTGPT_API_KEY"


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' lines and blanks are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | os.PathLike | None = None,
                overrides: dict[str, str] | None = None) -> AppConfig:
    """Build an AppConfig from defaults, an optional file, and overrides.

    `path=None` falls back to the ROBOTGPT_CONFIG env var; if that is unset
    too, defaults are used.
    """
    pairs: dict[str, str] = {}
    if path is None:
        path = os.environ.get(ENV_CONFIG) or None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        pairs.update(parse_config_text(p.read_text()))
    if overrides:
        pairs.update(overrides)

    sections = {"sim": {}, "learner": {}, "llm": {}, "paths": {}}
    for key, value in pairs.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key: {key}")
        section, attr, parse = _KEYS[key]
        try:
            sections[section][attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc

    return AppConfig(
        sim=SimConfig(**sections["sim"]),
        learner=LearnerConfig(**sections["learner"]),
        llm=LlmConfig(**sections["llm"]),
        paths=PathsConfig(**sections["paths"]),
    )
