"""Flat JSON run configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .dcbank import MODES
from .synthio import AdvectionConfig


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # task extents
    height: int = 32
    width: int = 32
    t_in: int = 5
    t_out: int = 20
    t_window: int = 2
    t_step: int = 1
    # model
    dim: int = 16
    patch: int = 4
    lambda_drift: float = 0.3
    mode: str = "corrected"
    empty_memory: str = "bypass"
    memory_capacity: int | None = None
    # optimization
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    # synthetic data
    n_train: int = 200
    n_val: int = 20
    n_test: int = 50
    data_seed: int = 7
    n_blobs: int = 3
    speed_min: float = 0.5
    speed_max: float = 1.5
    rotation: float = 0.05
    sigma_min: float = 2.0
    sigma_max: float = 4.0
    amp_min: float = 0.4
    amp_max: float = 0.9
    growth: float = 0.03
    oscillation: float = 0.3
    period_min: float = 6.0
    period_max: float = 12.0
    noise: float = 0.0
    # evaluation
    thresholds: list | None = None
    event_floor: float = 0.05
    # gradient check
    gradcheck_steps: int = 3
    gradcheck_batch: int = 2
    gradcheck_coords: int = 32
    gradcheck_eps: float = 1e-4
    gradcheck_tol: float = 1e-4

    @property
    def n_steps(self) -> int:
        return self.t_out // self.t_step

    @property
    def capacity(self) -> int:
        return self.memory_capacity or self.n_steps

    @property
    def n_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def validate(self) -> "RunConfig":
        if self.height % self.patch or self.width % self.patch:
            raise RunConfigError(f"{self.height}x{self.width} frame not divisible by patch {self.patch}")
        if self.t_in < self.t_window:
            raise RunConfigError(f"t_in={self.t_in} shorter than window {self.t_window}")
        if self.t_out % self.t_step:
            raise RunConfigError(f"t_out={self.t_out} not a multiple of t_step={self.t_step}")
        if self.capacity < self.n_steps:
            raise RunConfigError(f"memory_capacity {self.capacity} < rollout steps {self.n_steps}")
        if self.mode not in MODES:
            raise RunConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.empty_memory not in ("bypass", "fallback"):
            raise RunConfigError("empty_memory must be 'bypass' or 'fallback'")
        if self.lambda_drift < 0:
            raise RunConfigError("lambda_drift must be nonnegative")
        if min(self.dim, self.epochs + 1, self.batch_size, self.n_train) < 1:
            raise RunConfigError("dim, batch_size and n_train must be positive")
        return self

    def advection(self) -> AdvectionConfig:
        return AdvectionConfig(
            n_blobs=self.n_blobs, speed=(self.speed_min, self.speed_max), rotation=self.rotation,
            sigma=(self.sigma_min, self.sigma_max), amplitude=(self.amp_min, self.amp_max),
            growth=self.growth, oscillation=self.oscillation,
            period_range=(self.period_min, self.period_max), noise=self.noise,
            seed=self.data_seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def echo(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise RunConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in d.items():
            if isinstance(v, dict):
                raise RunConfigError(f"nested objects are not allowed (key {k!r})")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as err:
            raise RunConfigError(f"config file {path} not found") from err
        except json.JSONDecodeError as err:
            raise RunConfigError(f"config {path}: invalid JSON ({err})") from err
        if not isinstance(raw, dict):
            raise RunConfigError("config must be a JSON object")
        return cls.from_dict(raw)
