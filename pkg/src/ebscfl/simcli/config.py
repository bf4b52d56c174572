"""Run configuration and its TOML loader.

Example file::

    seed = 3
    output_dir = "out"

    [dims]
    n = 10
    m = 2
    l = 8
    layers = [2, 5]        # optional grouped aggregation plan

    [train]
    rounds = 40
    local_steps = 2
    server_steps = 20
    batch_size = 16
    eta = 0.1              # server step on the aggregate
    eta_init = 0.05        # server-side training on root data
    lr = 0.05              # client-side training
    eta_decay = 0.93       # the aggregate has the fixed norm |g0|, so the step must shrink

    [data]
    kind = "linear"        # or "logistic"
    alpha = 0.0            # Dirichlet concentration; "inf" for an even split, 0 for pure clients
    samples = 64
    root_samples = 64
    test_samples = 256
    noise = 0.1
    init_radius = 0.5      # start this far from the ground truth (omit for a random start)

    [attack]
    kind = "sign-flip"     # none, label-flip, sign-flip, scaling, cosine-guided
    fraction = 0.4
    scale = 1e6
    target_cos = 0.1
    stretch = 1.0

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..kdc import ProtocolDims

ATTACK_KINDS = ("none", "label-flip", "sign-flip", "scaling", "cosine-guided")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    fraction: float = 0.0
    scale: float = 1e6  # scaling attack factor
    target_cos: float = 0.1  # cosine-guided attack: cosine to the benign mean
    stretch: float = 1.0  # cosine-guided attack: norm relative to the benign mean

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.fraction < 1.0:
            raise ConfigError(f"adversary fraction must lie in [0, 1), got {self.fraction}")
        if not -1.0 < self.target_cos < 1.0:
            raise ConfigError("target_cos must lie in (-1, 1)")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.fraction > 0

    def adversaries(self, n: int) -> tuple[int, ...]:
        """The last ``round(fraction * n)`` clients."""
        if not self.active:
            return ()
        count = int(round(self.fraction * n))
        return tuple(range(n - count, n))


@dataclass(frozen=True)
class DimsSpec:
    n: int = 10
    m: int = 2
    l: int = 8
    s: int = 1
    t: int | None = None
    layers: tuple[int, ...] | None = None
    weighting: str = "cluster"

    def build(self) -> ProtocolDims:
        try:
            return ProtocolDims(n=self.n, m=self.m, l=self.l, s=self.s, t=self.t, layers=self.layers,
                                weighting=self.weighting)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class TrainSpec:
    rounds: int = 40
    local_steps: int = 2
    server_steps: int = 20
    batch_size: int = 16
    eta: float = 0.1
    eta_init: float = 0.05
    lr: float = 0.05
    eta_decay: float = 0.93

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if min(self.local_steps, self.server_steps, self.batch_size) < 1:
            raise ConfigError("local_steps, server_steps and batch_size must be >= 1")
        if self.eta_decay <= 0:
            raise ConfigError("eta_decay must be positive")


@dataclass(frozen=True)
class DataSpec:
    kind: str = "linear"
    alpha: float = 0.0
    samples: int = 64
    root_samples: int = 64
    test_samples: int = 256
    noise: float = 0.1
    init_radius: float | None = 0.5

    def __post_init__(self):
        if self.kind not in ("linear", "logistic"):
            raise ConfigError("data kind must be 'linear' or 'logistic'")
        if self.alpha < 0 or math.isnan(self.alpha):
            raise ConfigError("alpha must be >= 0 (use inf for an even split)")
        if min(self.samples, self.root_samples, self.test_samples) < 1:
            raise ConfigError("sample counts must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    dims: DimsSpec = field(default_factory=DimsSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    data: DataSpec = field(default_factory=DataSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.dims.n < self.dims.m:
            raise ConfigError(f"need at least as many clients as clusters (n={self.dims.n}, m={self.dims.m})")

    @property
    def protocol_dims(self) -> ProtocolDims:
        return self.dims.build()

    @property
    def adversaries(self) -> tuple[int, ...]:
        return self.attack.adversaries(self.dims.n)

    def without_attack(self) -> "RunConfig":
        return replace(self, attack=AttackSpec())


_SECTIONS = {"dims": DimsSpec, "train": TrainSpec, "data": DataSpec, "attack": AttackSpec}
_TOP = {"seed", "output_dir"}


def _coerce(cls, name: str, value: Any):
    types = {f.name: f.type for f in fields(cls)}
    kind = types[name]
    if name == "layers":
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
            raise ConfigError("layers must be a list of integers")
        return tuple(value)
    if "float" in kind:
        if isinstance(value, str) and value.lower() in ("inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if "int" in kind:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def _section(cls, raw: Mapping[str, Any], where: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**{k: _coerce(cls, k, v) for k, v in raw.items()})
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    unknown = sorted(set(raw) - set(_SECTIONS) - _TOP)
    if unknown:
        raise ConfigError(f"unknown section(s) or key(s): {', '.join(unknown)}")
    parts = {name: _section(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out = str(raw.get("output_dir", "out"))
    cfg = RunConfig(**parts, seed=seed, output_dir=out)
    cfg.protocol_dims  # validates the dimensions early
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(raw)
