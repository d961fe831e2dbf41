"""Categorical and continuous forecast verification scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numcore import DimensionError

SEVIR_THRESHOLDS = (16, 74, 133, 160, 181, 219)
METEONET_THRESHOLDS = (12, 18, 24, 32)
THRESHOLD_PRESETS = {"sevir": SEVIR_THRESHOLDS, "meteonet": METEONET_THRESHOLDS}

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass(frozen=True)
class Contingency:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    target = np.asarray(getattr(target, "values", target), dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    return pred, target


def contingency(pred, target, threshold: float) -> Contingency:
    """Pixel counts after binarizing both fields at ``>= threshold``."""
    pred, target = _pair(pred, target)
    p = pred >= threshold
    t = target >= threshold
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return Contingency(tp, fp, fn, p.size - tp - fp - fn)


def csi(c: Contingency) -> float:
    denom = c.tp + c.fn + c.fp
    return c.tp / denom if denom > 0 else 0.0


def hss(c: Contingency) -> float:
    num = 2.0 * (c.tp * c.tn - c.fn * c.fp)
    denom = (c.tp + c.fn) * (c.fn + c.tn) + (c.tp + c.fp) * (c.fp + c.tn)
    return num / denom if denom > 0 else 0.0


def csi_mean(pred, target, thresholds) -> float:
    return float(np.mean([csi(contingency(pred, target, t)) for t in thresholds]))


def hss_mean(pred, target, thresholds) -> float:
    return float(np.mean([hss(contingency(pred, target, t)) for t in thresholds]))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _local_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    patches = sliding_window_view(img, win.shape)
    return np.tensordot(patches, win, axes=([-2, -1], [0, 1]))


def ssim_frame(pred: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM map of one frame; local statistics use a Gaussian window
    evaluated only where it fits entirely inside the frame."""
    pred, target = _pair(pred, target)
    win = gaussian_window()
    if pred.shape[0] < win.shape[0] or pred.shape[1] < win.shape[1]:
        win = gaussian_window(min(pred.shape), SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _local_mean(pred, win)
    mu_y = _local_mean(target, win)
    sxx = _local_mean(pred * pred, win) - mu_x ** 2
    syy = _local_mean(target * target, win) - mu_y ** 2
    sxy = _local_mean(pred * target, win) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred, target, data_range: float = 1.0) -> float:
    """Frame-wise SSIM averaged over the horizon (and any leading batch axes)."""
    pred, target = _pair(pred, target)
    if pred.ndim < 2:
        raise DimensionError("ssim needs at least (H, W)")
    frames_p = pred.reshape(-1, *pred.shape[-2:])
    frames_t = target.reshape(-1, *target.shape[-2:])
    return float(np.mean([ssim_frame(a, b, data_range) for a, b in zip(frames_p, frames_t)]))


def mae(pred, target, per_lead: bool = False):
    """Mean absolute error; with ``per_lead`` a vector over the time axis (-3)."""
    pred, target = _pair(pred, target)
    err = np.abs(pred - target)
    if not per_lead:
        return float(err.mean())
    return err.mean(axis=tuple(i for i in range(err.ndim) if i != err.ndim - 3))


def mse(pred, target, per_lead: bool = False):
    pred, target = _pair(pred, target)
    err = (pred - target) ** 2
    if not per_lead:
        return float(err.mean())
    return err.mean(axis=tuple(i for i in range(err.ndim) if i != err.ndim - 3))


def event_thresholds(train: np.ndarray, floor: float = 0.05,
                     quantiles=(0.25, 0.5, 0.75)) -> list[float]:
    """Quantiles of training intensities that count as events (above ``floor``)."""
    vals = np.asarray(train, dtype=np.float64)
    vals = vals[vals > floor]
    if vals.size == 0:
        raise ValueError(f"no training intensities above {floor}")
    return [float(q) for q in np.quantile(vals, quantiles)]


def report_rows(pred, target, thresholds, run_id: str, mode: str) -> list[tuple]:
    """Metric rows ``(run_id, mode, metric, threshold, lead_time, value)``.

    Lead times are 1-based; ``"all"`` marks horizon aggregates and an empty
    threshold marks threshold-free metrics.
    """
    pred, target = _pair(pred, target)
    T = pred.shape[-3]
    rows = []

    def lead(t):
        return pred[..., t, :, :], target[..., t, :, :]

    def emit(metric, thr, lt, value):
        rows.append((run_id, mode, metric, "" if thr is None else f"{thr:.6g}", lt,
                     f"{value:.10g}"))

    for lt in list(range(T)) + ["all"]:
        p, y = (pred, target) if lt == "all" else lead(lt)
        tag = "all" if lt == "all" else str(lt + 1)
        cs = []
        hs = []
        for thr in thresholds:
            c = contingency(p, y, thr)
            cs.append(csi(c))
            hs.append(hss(c))
            emit("csi", thr, tag, cs[-1])
        emit("csi_m", None, tag, float(np.mean(cs)) if cs else 0.0)
        emit("hss", None, tag, float(np.mean(hs)) if hs else 0.0)
        emit("ssim", None, tag, ssim(p, y))
        emit("mae", None, tag, float(np.abs(p - y).mean()))
        emit("mse", None, tag, float(((p - y) ** 2).mean()))
    return rows
