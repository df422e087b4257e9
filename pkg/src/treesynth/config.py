"""Pipeline configuration: YAML file -> typed config with safe defaults.

Flags override the file; the file overrides defaults. Credentials never
live here, only the names of environment variables that hold them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import yaml

from .backends.config import BackendConfig
from .errors import BadFraction, ConfigError
from .pcs import PerturbConfig

DEFAULT_PLAN_SIZES = {"positive": 8, "hard_negative": 8, "easy_negative": 8}

_TOP_KEYS = {
    "seed",
    "store",
    "subject_token",
    "instruction_pairs",
    "thresholds",
    "perturbation",
    "diversity",
    "plan_sizes",
    "backends",
}


@dataclass(frozen=True)
class Thresholds:
    positive: float = 0.3
    hard_negative: float = 0.1
    text: float = 0.2

    def __post_init__(self):
        for name in ("positive", "hard_negative", "text"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"threshold {name} must be finite, got {value!r}")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    store: str = "store"
    subject_token: str = "sks"
    instruction_pairs: int = 2
    thresholds: Thresholds = field(default_factory=Thresholds)
    perturbation: PerturbConfig = field(default_factory=PerturbConfig)
    diversity_k: int | None = None
    diversity_seed: int = 0
    plan_sizes: dict[str, int] = field(
        default_factory=lambda: dict(DEFAULT_PLAN_SIZES)
    )
    backends: dict[str, BackendConfig] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.instruction_pairs < 0:
            raise ConfigError("instruction_pairs must be >= 0")
        if not self.subject_token:
            raise ConfigError("subject_token must be non-empty")
        for role, size in self.plan_sizes.items():
            if not isinstance(size, int) or size < 1:
                raise ConfigError(f"plan size for {role} must be >= 1, got {size!r}")

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Pin every stage seed; used by the CLI's --seed override."""
        return replace(
            self,
            seed=seed,
            diversity_seed=seed,
            perturbation=replace(self.perturbation, seed=seed),
        )

    def digest_payload(self) -> dict:
        """The reproducibility-relevant settings, for the manifest digest."""
        return {
            "seed": self.seed,
            "subject_token": self.subject_token,
            "instruction_pairs": self.instruction_pairs,
            "thresholds": {
                "positive": self.thresholds.positive,
                "hard_negative": self.thresholds.hard_negative,
                "text": self.thresholds.text,
            },
            "perturbation": {
                "patch_size": self.perturbation.patch_size,
                "mode": self.perturbation.mode,
                "seed": self.perturbation.seed,
                "shuffle_fraction": self.perturbation.shuffle_fraction,
            },
            "diversity": {"k": self.diversity_k, "seed": self.diversity_seed},
            "plan_sizes": dict(sorted(self.plan_sizes.items())),
        }


def _section(data: dict, key: str) -> dict:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be a mapping")
    return value


def load_config(path: str | None = None) -> PipelineConfig:
    """Parse the YAML config file; None gives pure defaults."""
    if path is None:
        return PipelineConfig()
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    seed = data.get("seed", 0)
    try:
        thresholds = Thresholds(**_section(data, "thresholds"))
    except TypeError as exc:
        raise ConfigError(f"bad thresholds config: {exc}") from exc

    perturb_section = _section(data, "perturbation")
    perturb_section.setdefault("seed", seed)
    try:
        perturbation = PerturbConfig(**perturb_section)
    except (TypeError, ValueError, BadFraction) as exc:
        raise ConfigError(f"bad perturbation config: {exc}") from exc

    diversity = _section(data, "diversity")
    unknown = set(diversity) - {"k", "seed"}
    if unknown:
        raise ConfigError(f"unknown diversity keys: {sorted(unknown)}")

    plan_sizes = dict(DEFAULT_PLAN_SIZES)
    plan_sizes.update(_section(data, "plan_sizes"))

    backends = {}
    for name, section in _section(data, "backends").items():
        if not isinstance(section, dict):
            raise ConfigError(f"backend {name!r} must be a mapping")
        try:
            backends[name] = BackendConfig(**section)
        except TypeError as exc:
            raise ConfigError(f"bad backend config {name!r}: {exc}") from exc

    try:
        return PipelineConfig(
            seed=seed,
            store=data.get("store", "store"),
            subject_token=data.get("subject_token", "sks"),
            instruction_pairs=data.get("instruction_pairs", 2),
            thresholds=thresholds,
            perturbation=perturbation,
            diversity_k=diversity.get("k"),
            diversity_seed=diversity.get("seed", seed),
            plan_sizes=plan_sizes,
            backends=backends,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
