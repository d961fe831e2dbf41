"""Memory retrieval scored by content relevance and drift consistency."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .membank import EmptyMemoryError
from .numcore import Tensor

CAMR_KEYS = ("W_q", "W_K", "W_c", "W_h", "W_agg")
DEFAULT_LAMBDA_DRIFT = 0.3


@dataclass
class RetrievalDiagnostics:
    s_cont: np.ndarray
    s_drift: np.ndarray
    weights: np.ndarray


def _need_memory(mem: Tensor) -> None:
    if mem.ndim < 3 or mem.shape[-3] == 0:
        raise EmptyMemoryError("retrieval over an empty memory")


def content_scores(z_corrected, mem_view, p) -> Tensor:
    """Scaled dot products between the pooled query and pooled memory keys.

    z_corrected: (..., L, D); mem_view: (..., R, L, D) -> (..., R)
    """
    z_corrected, mem_view = nc.as_tensor(z_corrected), nc.as_tensor(mem_view)
    _need_memory(mem_view)
    D = z_corrected.shape[-1]
    q = nc.matmul(nc.mean_pool_tokens(z_corrected), p["W_q"])  # (..., D)
    keys = nc.matmul(nc.mean_pool_tokens(mem_view), p["W_K"])  # (..., R, D)
    s = nc.matmul(keys, nc.expand_dims(q, -1))  # (..., R, 1)
    return nc.scale(nc.reshape(s, s.shape[:-1]), 1.0 / np.sqrt(D))


def drift_scores(delta, drift_seq, p) -> Tensor:
    """Negative feature-mean squared distance between the current pooled
    residual and each pooled historical drift, after projection."""
    delta, drift_seq = nc.as_tensor(delta), nc.as_tensor(drift_seq)
    _need_memory(drift_seq)
    c = nc.matmul(nc.mean_pool_tokens(delta), p["W_c"])  # (..., D)
    H = nc.matmul(nc.mean_pool_tokens(drift_seq), p["W_h"])  # (..., R, D)
    return nc.scale(nc.sq_distance(nc.expand_dims(c, -2), H, axis=-1), -1.0)


def retrieval_weights(s_cont, s_drift, lambda_drift: float) -> Tensor:
    s_cont, s_drift = nc.as_tensor(s_cont), nc.as_tensor(s_drift)
    if s_cont.shape != s_drift.shape:
        raise nc.DimensionError(f"score shapes differ: {s_cont.shape} vs {s_drift.shape}")
    if lambda_drift < 0:
        raise ValueError("lambda_drift must be nonnegative")
    if lambda_drift == 0:
        return nc.softmax(s_cont, axis=-1)
    return nc.softmax(nc.add(s_cont, nc.scale(s_drift, lambda_drift)), axis=-1)


def refine_correction(weights, mem_view, d_init, p) -> Tensor:
    """``W_agg`` applied to the weight-averaged memory, plus ``d_init``."""
    weights, mem_view = nc.as_tensor(weights), nc.as_tensor(mem_view)
    if weights.shape[-1] != mem_view.shape[-3]:
        raise nc.DimensionError("weights and memory length differ")
    R, L, D = mem_view.shape[-3:]
    lead = mem_view.shape[:-3]
    flat = nc.reshape(mem_view, lead + (R, L * D))
    pooled = nc.matmul(nc.expand_dims(weights, -2), flat)  # (..., 1, L*D)
    agg = nc.reshape(pooled, lead + (L, D))
    return nc.add(nc.matmul(agg, p["W_agg"]), d_init)


def retrieve(z_prior, d_init, delta, mem_view, drift_seq, p, lambda_drift: float,
             use_content: bool = True) -> tuple[Tensor, RetrievalDiagnostics]:
    """Full retrieval pass; ``use_content=False`` zeroes the content scores."""
    if use_content:
        s_cont = content_scores(nc.add(z_prior, d_init), mem_view, p)
    else:
        s_cont = nc.zeros(mem_view.shape[:-2])
    s_drift = drift_scores(delta, drift_seq, p)
    w = retrieval_weights(s_cont, s_drift, lambda_drift)
    d_r = refine_correction(w, mem_view, d_init, p)
    diag = RetrievalDiagnostics(s_cont.numpy(), s_drift.numpy(), w.numpy())
    return d_r, diag
