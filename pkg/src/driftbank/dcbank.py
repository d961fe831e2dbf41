"""Posterior update: initial correction, retrieval refinement, gated residual."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .camr import DEFAULT_LAMBDA_DRIFT, RetrievalDiagnostics, retrieve
from .cle import initial_correction, raw_residual, self_attention_correction
from .membank import MemoryBank
from .numcore import Tensor

MODES = ("corrected", "bypass", "passive", "no-cle", "no-camr", "no-content")


@dataclass
class Prop1Report:
    inner: float
    half_norm_sq: float
    condition_holds: bool
    err_before: float
    err_after: float


@dataclass
class StepDiagnostics:
    d_init: np.ndarray | None = None
    d_final: np.ndarray | None = None
    gate_mean: float | None = None
    retrieval: RetrievalDiagnostics | None = None
    prop1: Prop1Report | None = None
    bypassed: bool = False


def apply(z_prior, bank: MemoryBank, p, mode: str = "corrected",
          lambda_drift: float = DEFAULT_LAMBDA_DRIFT,
          empty_memory: str = "bypass") -> tuple[Tensor, StepDiagnostics]:
    """Correct ``z_prior`` using the bank's history.

    ``empty_memory="bypass"`` returns the prior untouched when nothing is
    stored; ``"fallback"`` instead runs the extractor with the prior as its
    own reference and skips retrieval.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if empty_memory not in ("bypass", "fallback"):
        raise ValueError(f"unknown empty-memory policy {empty_memory!r}")
    z_prior = nc.as_tensor(z_prior)
    if mode == "bypass" or (len(bank) == 0 and empty_memory == "bypass"):
        return z_prior, StepDiagnostics(bypassed=True)

    z_ref = bank.reference(z_prior)
    if mode == "no-cle":
        d_init = self_attention_correction(z_prior, p)
    else:
        d_init = initial_correction(z_prior, z_ref, p)

    retrieval = None
    if len(bank) > 0 and mode != "no-camr":
        view = bank.view_with_pos()
        drift = bank.drift_sequence(view)
        delta = raw_residual(z_prior, z_ref)
        d_r, retrieval = retrieve(z_prior, d_init, delta, view, drift, p, lambda_drift,
                                  use_content=(mode != "no-content"))
    else:
        d_r = d_init

    both = nc.concat([z_prior, d_r], axis=-1)
    if mode == "passive":
        z_post = nc.matmul(both, p["W_fuse"])
        gate_mean = None
    else:
        gate = nc.sigmoid(nc.matmul(both, p["W_corr"]))
        z_post = nc.add(z_prior, nc.mul(gate, d_r))
        gate_mean = float(gate.data.mean())
    diag = StepDiagnostics(d_init=d_init.numpy(), d_final=d_r.numpy(),
                           gate_mean=gate_mean, retrieval=retrieval)
    return z_post, diag


def prop1_check(z_posterior, z_prior, z_target) -> Prop1Report:
    """Sufficient-condition report for an additive correction.

    With ``e = prior - target`` and ``step = posterior - prior`` the condition
    is ``<e, step> < -|step|^2 / 2``; when it holds the squared error drops.
    """
    zp = np.asarray(getattr(z_posterior, "data", z_posterior), dtype=np.float64)
    z0 = np.asarray(getattr(z_prior, "data", z_prior), dtype=np.float64)
    zt = np.asarray(getattr(z_target, "data", z_target), dtype=np.float64)
    if not (zp.shape == z0.shape == zt.shape):
        raise nc.DimensionError(f"shapes differ: {zp.shape}, {z0.shape}, {zt.shape}")
    e = (z0 - zt).ravel()
    step = (zp - z0).ravel()
    inner = float(e @ step)
    half = 0.5 * float(step @ step)
    after = zp.ravel() - zt.ravel()
    return Prop1Report(inner=inner, half_norm_sq=half, condition_holds=inner < -half,
                       err_before=float(e @ e), err_after=float(after @ after))
