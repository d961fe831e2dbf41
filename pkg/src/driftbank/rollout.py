"""Autoregressive forecasting: encode, correct, decode, write back."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import numcore as nc
from .camr import DEFAULT_LAMBDA_DRIFT
from .dcbank import StepDiagnostics, apply, prop1_check
from .membank import MemoryBank
from .numcore import ContractError, Tensor


class ConfigError(ValueError):
    pass


class Backbone(Protocol):
    t_window: int
    t_step: int

    def encode(self, window, p) -> Tensor: ...

    def decode(self, z, p) -> Tensor: ...


@dataclass(frozen=True)
class ToyBackbone:
    """Linear patch embedding: P x P patches of a T_w-frame window go through
    ``E_proj`` to D features; ``D_proj`` maps each token back to a patch of
    the next T_step frames. Tokens are ordered row-major over patches."""

    height: int
    width: int
    patch: int = 4
    t_window: int = 2
    t_step: int = 1

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(
                f"frame {self.height}x{self.width} not divisible by patch {self.patch}")

    @property
    def n_tokens(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    def patchify(self, frames) -> Tensor:
        """(..., T, H, W) -> (..., L, T*P*P)"""
        frames = nc.as_tensor(frames)
        *lead, T, H, W = frames.shape
        P = self.patch
        lead = tuple(lead)
        n = len(lead)
        x = nc.reshape(frames, lead + (T, H // P, P, W // P, P))
        axes = tuple(range(n)) + tuple(n + a for a in (1, 3, 0, 2, 4))
        x = nc.permute(x, axes)
        return nc.reshape(x, lead + ((H // P) * (W // P), T * P * P))

    def unpatchify(self, tokens, T: int) -> Tensor:
        """(..., L, T*P*P) -> (..., T, H, W)"""
        tokens = nc.as_tensor(tokens)
        lead = tokens.shape[:-2]
        n = len(lead)
        P = self.patch
        hp, wp = self.height // P, self.width // P
        x = nc.reshape(tokens, lead + (hp, wp, T, P, P))
        axes = tuple(range(n)) + tuple(n + a for a in (2, 0, 3, 1, 4))
        x = nc.permute(x, axes)
        return nc.reshape(x, lead + (T, self.height, self.width))

    def encode(self, window, p) -> Tensor:
        window = nc.as_tensor(window)
        if window.shape[-3:] != (self.t_window, self.height, self.width):
            raise nc.DimensionError(f"window shape {window.shape} does not match backbone")
        return nc.matmul(self.patchify(window), p["E_proj"])

    def decode(self, z, p) -> Tensor:
        return self.unpatchify(nc.matmul(z, p["D_proj"]), self.t_step)


@dataclass
class StepRecord:
    prior: np.ndarray
    posterior: np.ndarray
    diagnostics: StepDiagnostics
    frames: np.ndarray


@dataclass
class RolloutTrace:
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)


def _frozen(p) -> dict[str, Tensor]:
    return {k: Tensor(getattr(v, "data", v)) for k, v in p.items()}


def run(backbone: Backbone, params, bank: MemoryBank, x_init, n_steps: int,
        mode: str = "corrected", lambda_drift: float = DEFAULT_LAMBDA_DRIFT,
        empty_memory: str = "bypass", y_true=None,
        keep_trace: bool = True) -> tuple[Tensor, RolloutTrace]:
    """Roll the model forward ``n_steps`` times from the context ``x_init``.

    ``x_init`` is (..., T_i, H, W). Returns the concatenated forecast
    (..., n_steps * T_step, H, W) and a per-step trace. When ``y_true`` is
    given every step also carries a drift-reduction report against the
    encoding of the ground-truth window.
    """
    if len(bank) != 0:
        raise ContractError("memory bank must be empty at the start of a rollout")
    if n_steps < 1:
        raise ConfigError("n_steps must be positive")
    if n_steps > bank.capacity:
        raise ConfigError(f"{n_steps} steps exceed memory capacity {bank.capacity}")
    x_init = nc.as_tensor(x_init)
    T_w, T_s = backbone.t_window, backbone.t_step
    if x_init.ndim < 3 or x_init.shape[-3] < T_w:
        raise ConfigError(f"need at least {T_w} context frames, got shape {x_init.shape}")
    truth = None
    if y_true is not None:
        y_arr = np.asarray(getattr(y_true, "data", y_true), dtype=np.float64)
        if y_arr.shape[-3] < n_steps * T_s or y_arr.shape[-2:] != x_init.shape[-2:]:
            raise nc.DimensionError(
                f"targets {y_arr.shape} too short for {n_steps} steps of {T_s} frames")
        truth = np.concatenate([x_init.data, y_arr], axis=-3)
        frozen = _frozen(params)

    n_init = x_init.shape[-3]
    context = x_init[..., n_init - T_w:, :, :]
    outputs: list[Tensor] = []
    trace = RolloutTrace()
    for r in range(1, n_steps + 1):
        bank.current_step = r
        z_prior = backbone.encode(context, params)
        z_post, diag = apply(z_prior, bank, params, mode=mode, lambda_drift=lambda_drift,
                             empty_memory=empty_memory)
        frames = backbone.decode(z_post, params)
        bank.write(z_post, r)
        outputs.append(frames)
        if truth is not None:
            end = n_init + (r - 1) * T_s
            z_tgt = backbone.encode(truth[..., end - T_w:end, :, :], frozen)
            diag.prop1 = prop1_check(z_post, z_prior, z_tgt)
        if keep_trace:
            trace.steps.append(StepRecord(z_prior.numpy(), z_post.numpy(), diag,
                                          frames.numpy()))
        context = nc.concat([context, frames], axis=-3)
        context = context[..., context.shape[-3] - T_w:, :, :]
    bank.current_step = None
    return nc.concat(outputs, axis=-3), trace


def run_with_targets(backbone: Backbone, params, bank: MemoryBank, x_init, y_true,
                     n_steps: int, **kw) -> RolloutTrace:
    """Rollout whose trace carries a drift-reduction report at every step."""
    _, trace = run(backbone, params, bank, x_init, n_steps, y_true=y_true, **kw)
    return trace
