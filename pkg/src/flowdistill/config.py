"""Experiment configuration: a nested JSON document with typed sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .analytic import GaussianMixture, preset_mixture
from .fgm import DistillConfig
from .flowtrain import PretrainConfig
from .nets import TimeDistribution, VectorFieldNet

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "MetricConfig",
    "NetworkSpec",
    "VerifyConfig",
    "load_config",
    "preset_config",
]

PRESETS = ("ring8", "two-moons-gmm", "single-gauss")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class NetworkSpec:
    hidden: tuple = (128, 128, 128)
    n_freq: int = 8
    activation: str = "silu"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden widths must be positive")
        if self.n_freq < 0:
            raise ValueError("n_freq must be >= 0")

    def build(self, dim: int) -> VectorFieldNet:
        return VectorFieldNet(dim, self.hidden, self.n_freq, self.activation)


@dataclass
class MetricConfig:
    n_samples: int = 10000
    n_proj: int = 256
    euler_steps: int = 50
    field_mse_n: int = 20000
    probe_n: int = 2000

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")


@dataclass
class VerifyConfig:
    n: int = 1_000_000
    n_configs: int = 5
    times: tuple = (0.1, 0.5, 0.9)
    fd_step: float = 1e-5
    n_chunks: int = 100
    teacher_components: int = 3

    def __post_init__(self):
        self.times = tuple(float(t) for t in self.times)
        if any(not 0.0 < t <= 1.0 for t in self.times):
            raise ValueError("times must lie in (0, 1]")
        if self.n < 2 or self.n_chunks < 2 or self.n_configs < 1 or self.teacher_components < 1:
            raise ValueError("n, n_chunks must be >= 2; n_configs, teacher_components >= 1")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")


@dataclass
class ExperimentConfig:
    """Everything one run needs.

    ``mixture`` is either ``{"preset": name}`` or an explicit mixture with
    ``weights``, ``means`` and ``variances``. The pretrain and distill
    sections take their seeds from the top-level ``seed``.
    """

    mixture: dict = field(default_factory=lambda: {"preset": "ring8"})
    network: NetworkSpec = field(default_factory=NetworkSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        self.pretrain.seed = self.seed
        self.distill.seed = self.seed

    def target(self) -> GaussianMixture:
        try:
            if "preset" in self.mixture:
                return preset_mixture(self.mixture["preset"])
            return GaussianMixture.from_dict(self.mixture)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError("mixture", str(exc)) from None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return from_dict({**self.to_dict(), "seed": int(seed)})

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "mixture": _plain(self.mixture),
            "network": _section_dict(self.network),
            "pretrain": _section_dict(self.pretrain, skip=("seed",)),
            "distill": _section_dict(self.distill, skip=("seed",)),
            "metrics": _section_dict(self.metrics),
            "verify": _section_dict(self.verify),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _plain(value):
    if isinstance(value, TimeDistribution):
        return value.to_dict()
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _section_dict(obj, skip=()) -> dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name not in skip}


def _build_section(cls, data, path: str, skip=()):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
        if isinstance(value, dict) and key.endswith("time"):
            try:
                value = TimeDistribution(**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.{key}", str(exc)) from None
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("", "configuration must be a JSON object")
    sections = {
        "network": (NetworkSpec, ()),
        "pretrain": (PretrainConfig, ("seed",)),
        "distill": (DistillConfig, ("seed",)),
        "metrics": (MetricConfig, ()),
        "verify": (VerifyConfig, ()),
    }
    kwargs = {}
    for key, value in data.items():
        if key in sections:
            cls, skip = sections[key]
            kwargs[key] = _build_section(cls, value, key, skip)
        elif key == "mixture":
            if not isinstance(value, dict):
                raise ConfigError("mixture", "expected an object")
            kwargs[key] = value
        elif key == "seed":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError("seed", "must be a non-negative integer")
            kwargs[key] = value
        elif key == "out_dir":
            kwargs[key] = str(value)
        else:
            raise ConfigError(key, "unknown field")
    cfg = ExperimentConfig(**kwargs)
    cfg.target()
    return cfg


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"not valid JSON: {exc}") from None
    return from_dict(data)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc}") from None
    return loads(text)


def preset_config(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError("mixture.preset", f"unknown preset {name!r}")
    return ExperimentConfig(mixture={"preset": name}, out_dir=f"runs/{name}")
