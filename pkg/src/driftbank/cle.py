"""Initial drift correction from the prior latent and a reference latent.

Projections act on the feature axis (row-vector convention): ``Z @ W``.
``p`` is any mapping holding the named matrices.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import Tensor

CLE_KEYS = ("W_pre", "W_ref", "W_delta", "W_init", "W_O")
# single-head self-attention that stands in for the extractor in the "no-cle" ablation
SELF_ATTN_KEYS = ("W_sa_q", "W_sa_k", "W_sa_v", "W_sa_o")


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise nc.DimensionError(f"latent shapes differ: {a.shape} vs {b.shape}")


def raw_residual(z_prior, z_ref) -> Tensor:
    z_prior, z_ref = nc.as_tensor(z_prior), nc.as_tensor(z_ref)
    _same_shape(z_prior, z_ref)
    return nc.sub(z_prior, z_ref)


def context_discrepancy(z_prior, z_ref, p) -> Tensor:
    z_prior, z_ref = nc.as_tensor(z_prior), nc.as_tensor(z_ref)
    _same_shape(z_prior, z_ref)
    return nc.sub(nc.matmul(z_prior, p["W_pre"]), nc.matmul(z_ref, p["W_ref"]))


def init_gate(z_prior, z_ref, p) -> Tensor:
    return nc.sigmoid(nc.matmul(nc.concat([z_prior, z_ref], axis=-1), p["W_init"]))


def initial_correction(z_prior, z_ref, p, return_gate: bool = False):
    """Gated blend of the projected raw residual and the projected discrepancy,
    mapped through ``W_O``."""
    z_prior, z_ref = nc.as_tensor(z_prior), nc.as_tensor(z_ref)
    delta = raw_residual(z_prior, z_ref)
    disc = context_discrepancy(z_prior, z_ref, p)
    gate = init_gate(z_prior, z_ref, p)
    fused = nc.add(nc.mul(gate, nc.matmul(delta, p["W_delta"])),
                   nc.mul(nc.sub(1.0, gate), disc))
    d_init = nc.matmul(fused, p["W_O"])
    if return_gate:
        return d_init, gate
    return d_init


def self_attention_correction(z_prior, p) -> Tensor:
    """Vanilla single-head self-attention over tokens (ablation replacement)."""
    z_prior = nc.as_tensor(z_prior)
    D = z_prior.shape[-1]
    q = nc.matmul(z_prior, p["W_sa_q"])
    k = nc.matmul(z_prior, p["W_sa_k"])
    v = nc.matmul(z_prior, p["W_sa_v"])
    att = nc.softmax(nc.scale(nc.matmul(q, nc.swap_last(k)), 1.0 / np.sqrt(D)), axis=-1)
    return nc.matmul(nc.matmul(att, v), p["W_sa_o"])
