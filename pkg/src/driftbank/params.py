"""Parameter sets and their initialization.

All learnable arrays live in one flat ``dict[str, np.ndarray]`` so the
optimizer, gradient check and checkpoint code can treat them uniformly.
"""
from __future__ import annotations

import numpy as np

from .camr import CAMR_KEYS
from .cle import CLE_KEYS, SELF_ATTN_KEYS

BACKBONE_KEYS = ("E_proj", "D_proj")
DCBANK_KEYS = CLE_KEYS + CAMR_KEYS + ("W_corr", "pos_table")
ABLATION_KEYS = SELF_ATTN_KEYS + ("W_fuse",)


def fan_in_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(dim: int, capacity: int, patch: int = 4, t_window: int = 2,
                t_step: int = 1, seed: int = 0) -> dict[str, np.ndarray]:
    """Fresh parameters for backbone, correction module and ablation heads.

    ``W_O`` and ``W_sa_o`` start at zero so the initial correction is exactly
    zero; ``pos_table`` starts at zero so retrieval first sees raw latents.
    """
    rng = np.random.default_rng(seed)
    D = dim
    p: dict[str, np.ndarray] = {}
    p["E_proj"] = fan_in_uniform(rng, patch * patch * t_window, D)
    p["D_proj"] = fan_in_uniform(rng, D, patch * patch * t_step)
    for k in ("W_pre", "W_ref", "W_delta"):
        p[k] = fan_in_uniform(rng, D, D)
    p["W_init"] = fan_in_uniform(rng, 2 * D, D)
    p["W_O"] = np.zeros((D, D))
    for k in CAMR_KEYS:
        p[k] = fan_in_uniform(rng, D, D)
    p["W_corr"] = fan_in_uniform(rng, 2 * D, D)
    p["pos_table"] = np.zeros((capacity, D))
    for k in ("W_sa_q", "W_sa_k", "W_sa_v"):
        p[k] = fan_in_uniform(rng, D, D)
    p["W_sa_o"] = np.zeros((D, D))
    # passive fusion starts as "prior plus a bounded random mix of the correction"
    p["W_fuse"] = np.concatenate([np.eye(D), fan_in_uniform(rng, D, D)], axis=0)
    return p


def used_keys(mode: str) -> tuple[str, ...]:
    """Parameters that can receive gradient in ``mode``."""
    if mode == "bypass":
        return BACKBONE_KEYS
    keys = list(BACKBONE_KEYS + DCBANK_KEYS)
    if mode == "no-cle":
        keys = [k for k in keys if k not in CLE_KEYS] + list(SELF_ATTN_KEYS)
    elif mode == "no-camr":
        keys = [k for k in keys if k not in CAMR_KEYS and k != "pos_table"]
    elif mode == "no-content":
        keys = [k for k in keys if k not in ("W_q", "W_K")]
    elif mode == "passive":
        keys = [k for k in keys if k != "W_corr"] + ["W_fuse"]
    return tuple(keys)
