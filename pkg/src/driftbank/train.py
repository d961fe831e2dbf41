"""Rollout loss, AdamW, the training loop and a finite-difference gradient check."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .membank import MemoryBank
from .params import used_keys
from .rollout import ToyBackbone, run

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at optimizer step {step}{': ' + detail if detail else ''}")
        self.step = step


def mse_loss(pred, target) -> nc.Tensor:
    """Mean squared difference over every element; differentiable in ``pred``."""
    pred = nc.as_tensor(pred)
    target = nc.as_tensor(getattr(target, "values", target))
    if pred.shape != target.shape:
        raise nc.DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    return nc.mean(nc.square(nc.sub(pred, target)))


# ------------------------------------------------------------------ AdamW

@dataclass
class OptimState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
         state: OptimState) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Only names present in ``grads`` are touched.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise nc.DimensionError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------- rollout loss

@dataclass
class TaskSpec:
    """Everything a rollout needs besides parameters and data."""

    backbone: ToyBackbone
    t_in: int
    n_steps: int
    mode: str = "corrected"
    lambda_drift: float = 0.3
    empty_memory: str = "bypass"

    @property
    def t_out(self) -> int:
        return self.n_steps * self.backbone.t_step


def forecast(task: TaskSpec, params, x_init, keep_trace: bool = False, y_true=None):
    bank = MemoryBank(pos_table=nc.as_tensor(params["pos_table"]))
    return run(task.backbone, params, bank, x_init, task.n_steps, mode=task.mode,
               lambda_drift=task.lambda_drift, empty_memory=task.empty_memory,
               y_true=y_true, keep_trace=keep_trace)


def loss_and_grads(task: TaskSpec, params: dict[str, np.ndarray], seqs: np.ndarray,
                   keys=None) -> tuple[float, dict[str, np.ndarray]]:
    """Rollout MSE over a batch ``(B, T_i + T_o, H, W)`` and its gradients."""
    keys = used_keys(task.mode) if keys is None else keys
    x = seqs[..., :task.t_in, :, :]
    y = seqs[..., task.t_in:task.t_in + task.t_out, :, :]
    tape = nc.GradTape()
    with tape:
        tracked = {k: (tape.watch(v, k) if k in keys else nc.Tensor(v)) for k, v in params.items()}
        pred, _ = forecast(task, tracked, x)
        loss = mse_loss(pred, y)
    grads = nc.backward(tape, loss)
    return loss.item(), grads


def evaluate_loss(task: TaskSpec, params, seqs: np.ndarray, batch_size: int = 32) -> float:
    total, n = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        b = seqs[i:i + batch_size]
        pred, _ = forecast(task, params, b[:, :task.t_in])
        y = b[:, task.t_in:task.t_in + task.t_out]
        total += float(((pred.data - y) ** 2).mean()) * len(b)
        n += len(b)
    return total / n


def predict(task: TaskSpec, params, seqs: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(seqs), batch_size):
        pred, _ = forecast(task, params, seqs[i:i + batch_size, :task.t_in])
        out.append(pred.numpy())
    return np.concatenate(out, axis=0)


@dataclass
class FitConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0


def fit(task: TaskSpec, params: dict[str, np.ndarray], train: np.ndarray,
        val: np.ndarray | None, cfg: FitConfig,
        on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Train ``params`` in place; returns one log row per epoch.

    Rows carry ``epoch``, ``train_mse`` (mean batch loss of the epoch),
    ``val_mse`` (NaN without a validation set) and ``wall_seconds``.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    state = OptimState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                       weight_decay=cfg.weight_decay)
    keys = used_keys(task.mode)
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = train[order[i:i + cfg.batch_size]]
            try:
                # overflow is detected below, numpy need not warn about it
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grads = loss_and_grads(task, params, batch, keys)
                    gnorm = clip_global_norm(grads, cfg.clip_norm)
            except FloatingPointError as err:
                raise TrainingDivergence(state.t + 1, str(err)) from err
            if not np.isfinite(loss):
                raise TrainingDivergence(state.t + 1, f"loss {loss}")
            if not np.isfinite(gnorm):
                raise TrainingDivergence(state.t + 1, "non-finite gradient")
            step(params, grads, state)
            losses.append(loss)
        row = {"epoch": epoch, "train_mse": float(np.mean(losses)),
               "val_mse": evaluate_loss(task, params, val) if val is not None and len(val) else float("nan"),
               "wall_seconds": time.perf_counter() - t0}
        log.info("epoch %d train %.6g val %.6g", epoch, row["train_mse"], row["val_mse"])
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return history


# ----------------------------------------------------------- gradient check

@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values()) if self.max_rel_err else 0.0


def fd_gradcheck(loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
                 params: dict[str, np.ndarray], eps: float = 1e-5, tolerance: float = 1e-4,
                 n_coords: int = 32, seed: int = 0, names=None) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn(params) -> (loss, grads)``. For every checked array up to
    ``n_coords`` random coordinates are perturbed (all of them when the array
    is smaller); relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    rng = np.random.default_rng(seed)
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_fn(work)
    names = list(grads) if names is None else list(names)
    report = {}
    for name in names:
        arr = work[name]
        flat = arr.reshape(-1)
        if flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        g = np.asarray(grads[name]).reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            lp, _ = loss_fn(work)
            flat[c] = orig - eps
            lm, _ = loss_fn(work)
            flat[c] = orig
            num = (lp - lm) / (2 * eps)
            err = abs(g[c] - num) / max(abs(g[c]), abs(num), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return GradcheckReport(report, tolerance)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(out_dir, params: dict[str, np.ndarray], meta: dict) -> Path:
    """Write ``manifest.json`` plus one raw little-endian float64 blob per array."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        fname = f"{name}.f64"
        (out / fname).write_bytes(arr.tobytes())
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = dict(meta)
    manifest["params"] = entries
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Accepts the checkpoint directory or its ``manifest.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    params = {}
    for name, info in manifest["params"].items():
        raw = (path.parent / info["file"]).read_bytes()
        shape = tuple(info["shape"])
        n = int(np.prod(shape)) if shape else 1
        if len(raw) != 8 * n:
            raise ValueError(f"blob {info['file']} has {len(raw)} bytes, expected {8 * n}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return params, manifest
