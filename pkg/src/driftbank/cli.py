"""``driftbank`` command line: generate, train, evaluate, gradcheck, prop1-audit, compare.

Exit codes: 0 ok, 2 config error, 3 data/format error, 4 check failure,
5 training divergence. Every CSV starts with ``# tool_version=...`` and
``# config=...`` comment lines; JSON outputs carry the same two keys.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, metrics, synthio
from . import numcore as nc
from .config import RunConfig, RunConfigError
from .dcbank import prop1_check
from .membank import MemoryBank
from .params import init_params, used_keys
from .rollout import ConfigError, ToyBackbone, run_with_targets
from .synthio import FrameFormatError, SynthConfigError
from .train import (FitConfig, TaskSpec, TrainingDivergence, fd_gradcheck, fit, forecast,
                    load_checkpoint, loss_and_grads, predict, save_checkpoint)

log = logging.getLogger("driftbank")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECK, EXIT_DIVERGED = 0, 2, 3, 4, 5


class DataError(RuntimeError):
    pass


# ------------------------------------------------------------------ helpers

def _header(cfg_echo: str) -> str:
    return f"# tool_version={__version__}\n# config={cfg_echo}\n"


def write_csv(path, header: list[str], rows, cfg_echo: str) -> None:
    buf = io.StringIO()
    buf.write(_header(cfg_echo))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> tuple[dict, list[dict]]:
    """Comment metadata (``key=value`` lines) and the data rows of one of our CSVs."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


def write_json(path, obj, cfg: RunConfig) -> None:
    out = {"tool_version": __version__, "config": cfg.to_dict(), **obj}
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


def task_for(cfg: RunConfig, mode: str | None = None) -> TaskSpec:
    bb = ToyBackbone(cfg.height, cfg.width, patch=cfg.patch, t_window=cfg.t_window,
                     t_step=cfg.t_step)
    return TaskSpec(bb, cfg.t_in, cfg.n_steps, mode=mode or cfg.mode,
                    lambda_drift=cfg.lambda_drift, empty_memory=cfg.empty_memory)


def fresh_params(cfg: RunConfig) -> dict[str, np.ndarray]:
    return init_params(cfg.dim, cfg.capacity, patch=cfg.patch, t_window=cfg.t_window,
                       t_step=cfg.t_step, seed=cfg.seed)


def load_data(data_dir, split: str, cfg: RunConfig) -> np.ndarray:
    arr = synthio.load_split(data_dir, split)
    need = cfg.t_in + cfg.t_out
    if arr.shape[1] < need or arr.shape[2:] != (cfg.height, cfg.width):
        raise DataError(f"{split} split has sequences {arr.shape[1:]}, config needs "
                        f"({need}, {cfg.height}, {cfg.width})")
    return arr


def load_run(checkpoint) -> tuple[dict, RunConfig]:
    try:
        params, manifest = load_checkpoint(checkpoint)
    except FileNotFoundError as err:
        raise DataError(f"no checkpoint at {checkpoint}") from err
    except (KeyError, ValueError) as err:
        raise DataError(f"malformed checkpoint {checkpoint}: {err}") from err
    return params, RunConfig.from_dict(manifest["config"])


def thresholds_for(cfg: RunConfig, data_dir) -> list[float]:
    if cfg.thresholds:
        return [float(t) for t in cfg.thresholds]
    man = synthio.load_manifest(data_dir)
    if "thresholds" in man:
        return [float(t) for t in man["thresholds"]]
    return metrics.event_thresholds(synthio.load_split(data_dir, "train"), cfg.event_floor)


# ----------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = RunConfig.load(args.config)
    T = cfg.t_in + cfg.t_out
    adv = cfg.advection()
    seqs = synthio.generate(adv, cfg.n_train + cfg.n_val + cfg.n_test, T, cfg.height, cfg.width)
    a, b = cfg.n_train, cfg.n_train + cfg.n_val
    splits = {"train": seqs[:a], "val": seqs[a:b], "test": seqs[b:]}
    splits = {k: v for k, v in splits.items() if v}
    out = synthio.write_dataset(args.out, splits, cfg.to_dict(), cfg.data_seed, __version__)
    thr = metrics.event_thresholds(np.stack([s.values for s in splits["train"]]), cfg.event_floor)
    man = synthio.load_manifest(out)
    man["thresholds"] = thr
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    print(f"wrote {sum(len(v) for v in splits.values())} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.mode:
        cfg.mode = args.mode
        cfg.validate()
    train = load_data(args.data, "train", cfg)
    if not cfg.thresholds:
        # resolved once from the training data and carried in the run config
        cfg.thresholds = thresholds_for(cfg, args.data)
    try:
        val = load_data(args.data, "val", cfg)
    except FrameFormatError:
        val = None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = task_for(cfg)
    params = fresh_params(cfg)
    fc = FitConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, beta1=cfg.beta1,
                   beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay,
                   clip_norm=cfg.clip_norm, seed=cfg.seed)
    t0 = time.perf_counter()
    history = fit(task, params, train, val, fc,
                  on_epoch=lambda r: print(f"epoch {r['epoch']:3d} train {r['train_mse']:.6f} "
                                           f"val {r['val_mse']:.6f}", flush=True))
    # wall time goes to stdout only so reruns write identical files
    print(f"trained {cfg.mode} in {time.perf_counter() - t0:.1f}s")
    echo = cfg.echo()
    rows = [(h["epoch"], f"{h['train_mse']:.10g}", f"{h['val_mse']:.10g}") for h in history]
    write_csv(out / "train_log.csv", ["epoch", "train_mse", "val_mse"], rows, echo)
    save_checkpoint(out / "checkpoint", params,
                    {"tool_version": __version__, "config": cfg.to_dict(), "mode": cfg.mode})
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, cfg = load_run(args.checkpoint)
    test = load_data(args.data, "test", cfg)
    task = task_for(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = predict(task, params, test)
    y = test[:, cfg.t_in:cfg.t_in + cfg.t_out]
    thr = thresholds_for(cfg, args.data)
    run_id = args.run_id or out.name
    rows = metrics.report_rows(pred, y, thr, run_id, cfg.mode)
    write_csv(out / "metrics.csv", ["run_id", "mode", "metric", "threshold", "lead_time", "value"],
              rows, cfg.echo())

    # retrieval weights of every step for a few test sequences
    n_dump = min(args.dump, len(test))
    _, trace = forecast(task, params, test[:n_dump, :cfg.t_in], keep_trace=True)
    steps = []
    for r, rec in enumerate(trace.steps, start=1):
        d = rec.diagnostics
        entry = {"step": r, "bypassed": d.bypassed, "gate_mean": d.gate_mean}
        if d.retrieval is not None:
            entry["weights"] = d.retrieval.weights.tolist()
            entry["content_scores"] = d.retrieval.s_cont.tolist()
            entry["drift_scores"] = d.retrieval.s_drift.tolist()
        steps.append(entry)
    write_json(out / "retrieval.json", {"mode": cfg.mode, "sequences": n_dump, "steps": steps}, cfg)
    mse_all = next(float(r[5]) for r in rows if r[2] == "mse" and r[4] == "all")
    print(f"{run_id}: test mse {mse_all:.6g}, thresholds {[round(t, 4) for t in thr]}")
    return EXIT_OK


def gradcheck_setup(cfg: RunConfig):
    """Task, parameters at a generic point, and a small data batch."""
    bb = ToyBackbone(cfg.height, cfg.width, patch=cfg.patch, t_window=cfg.t_window,
                     t_step=cfg.t_step)
    steps = cfg.gradcheck_steps
    task = TaskSpec(bb, cfg.t_in, steps, mode=cfg.mode, lambda_drift=cfg.lambda_drift,
                    empty_memory=cfg.empty_memory)
    params = fresh_params(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    # W_O and pos_table start at zero; move off that point so every path carries gradient
    for k in ("W_O", "pos_table"):
        params[k] = rng.normal(scale=0.2, size=params[k].shape)
    seqs = synthio.generate(cfg.advection(), cfg.gradcheck_batch,
                            cfg.t_in + steps * cfg.t_step, cfg.height, cfg.width)
    return task, params, np.stack([s.values for s in seqs])


def cmd_gradcheck(args) -> int:
    cfg = RunConfig.load(args.config)
    if cfg.capacity < cfg.gradcheck_steps:
        raise RunConfigError("memory_capacity smaller than gradcheck_steps")
    task, params, batch = gradcheck_setup(cfg)
    keys = used_keys(cfg.mode)
    t0 = time.perf_counter()
    rep = fd_gradcheck(lambda p: loss_and_grads(task, p, batch, keys), params,
                       eps=cfg.gradcheck_eps, tolerance=cfg.gradcheck_tol,
                       n_coords=cfg.gradcheck_coords, seed=cfg.seed, names=keys)
    print(f"{'parameter':<12} {'max_rel_err':>12}")
    for k in keys:
        flag = "" if rep.max_rel_err[k] < rep.tolerance else "  FAIL"
        print(f"{k:<12} {rep.max_rel_err[k]:12.3e}{flag}")
    print(f"worst {rep.worst:.3e} (tolerance {rep.tolerance:g}) in {time.perf_counter() - t0:.1f}s")
    if args.out:
        write_csv(args.out, ["parameter", "max_rel_err", "passed"],
                  [(k, f"{rep.max_rel_err[k]:.6e}", int(rep.max_rel_err[k] < rep.tolerance))
                   for k in keys], cfg.echo())
    return EXIT_OK if rep.passed else EXIT_CHECK


def random_pairs(n: int, dim: int, seed: int, inject: str | None):
    """``(prior, posterior, target)`` triples for the theorem audit.

    Corrections are a random mix of a partial undo of the error and noise,
    so both sides of the condition occur often.
    """
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(n, dim))
    prior = target + rng.normal(size=(n, dim))
    e = prior - target
    if inject == "neg":
        step = -e
    elif inject == "zero":
        step = np.zeros_like(e)
    else:
        alpha = rng.uniform(-0.5, 2.5, size=(n, 1))
        step = -alpha * e + rng.normal(size=(n, dim)) * rng.uniform(0, 1.5, size=(n, 1))
    return prior, prior + step, target


def prop1_random_audit(n: int, dim: int, seed: int = 0, inject: str | None = None) -> dict:
    prior, post, target = random_pairs(n, dim, seed, inject)
    holds = reduced = violations = 0
    for i in range(n):
        rep = prop1_check(post[i], prior[i], target[i])
        better = rep.err_after < rep.err_before
        holds += rep.condition_holds
        reduced += better
        violations += rep.condition_holds and not better
    return {"trials": n, "dim": dim, "condition_holds": holds, "error_reduced": reduced,
            "violations": violations}


def cmd_prop1_audit(args) -> int:
    if args.checkpoint:
        if not args.data:
            raise RunConfigError("--checkpoint needs --data")
        return _prop1_empirical(args)
    t0 = time.perf_counter()
    rep = prop1_random_audit(args.trials, args.dim, args.seed, args.inject)
    n = rep["trials"]
    print(f"trials {n}  dim {rep['dim']}  condition holds {rep['condition_holds'] / n:.2%}  "
          f"error reduced {rep['error_reduced'] / n:.2%}  violations {rep['violations']}  "
          f"({time.perf_counter() - t0:.2f}s)")
    if args.out:
        echo = json.dumps({"trials": n, "dim": rep["dim"], "seed": args.seed,
                           "inject": args.inject}, sort_keys=True, separators=(",", ":"))
        write_csv(args.out, list(rep), [list(rep.values())], echo)
    return EXIT_OK if rep["violations"] == 0 else EXIT_CHECK


def _prop1_empirical(args) -> int:
    params, cfg = load_run(args.checkpoint)
    test = load_data(args.data, "test", cfg)
    if args.limit:
        test = test[:args.limit]
    task = task_for(cfg)
    n_steps = cfg.n_steps
    holds = np.zeros(n_steps)
    reduced = np.zeros(n_steps)
    violations = 0
    for seq in test:
        bank = MemoryBank(pos_table=nc.Tensor(params["pos_table"]))
        trace = run_with_targets(task.backbone, params, bank, seq[:cfg.t_in], seq[cfg.t_in:],
                                 n_steps, mode=cfg.mode, lambda_drift=cfg.lambda_drift,
                                 empty_memory=cfg.empty_memory)
        for r, rec in enumerate(trace.steps):
            rep = rec.diagnostics.prop1
            better = rep.err_after < rep.err_before
            holds[r] += rep.condition_holds
            reduced[r] += better
            violations += rep.condition_holds and not better
    n = len(test)
    rows = [(r + 1, n, f"{holds[r] / n:.6g}", f"{reduced[r] / n:.6g}") for r in range(n_steps)]
    for row in rows:
        print("step {:2d}  condition holds {}  error reduced {}".format(row[0], row[2], row[3]))
    print(f"violations {violations}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(args.out, ["step", "sequences", "condition_rate", "reduced_rate"], rows,
                  cfg.echo())
    return EXIT_OK if violations == 0 else EXIT_CHECK


def compare_rows(run_dirs) -> tuple[list[str], list[list], str]:
    """One row per run: aggregates, per-lead MSE and per-lead MSE deltas vs the first run."""
    runs = []
    for d in run_dirs:
        path = Path(d) / "metrics.csv" if Path(d).is_dir() else Path(d)
        if not path.exists():
            raise DataError(f"no metrics.csv under {d}")
        meta, rows = read_csv(path)
        cfg = json.loads(meta.get("config", "{}"))
        agg = {r["metric"]: float(r["value"]) for r in rows
               if r["lead_time"] == "all" and r["threshold"] == ""}
        agg["hss"] = float(np.mean([float(r["value"]) for r in rows
                                    if r["metric"] == "hss" and r["lead_time"] == "all"]))
        leads = sorted({int(r["lead_time"]) for r in rows if r["lead_time"] != "all"})
        per = {int(r["lead_time"]): float(r["value"]) for r in rows
               if r["metric"] == "mse" and r["lead_time"] != "all"}
        runs.append((rows[0]["run_id"], rows[0]["mode"], cfg.get("lambda_drift", ""), agg,
                     [per[t] for t in leads], leads))
    leads = runs[0][5]
    if any(r[5] != leads for r in runs):
        raise DataError("runs have different lead times")
    header = (["run_id", "mode", "lambda_drift", "csi_m", "hss", "ssim", "mae", "mse"]
              + [f"mse_lead_{t}" for t in leads] + [f"delta_mse_lead_{t}" for t in leads])
    base = runs[0][4]
    out = []
    for run_id, mode, lam, agg, per, _ in runs:
        out.append([run_id, mode, lam] + [f"{agg[k]:.10g}" for k in ("csi_m", "hss", "ssim", "mae", "mse")]
                   + [f"{v:.10g}" for v in per] + [f"{v - b:.10g}" for v, b in zip(per, base)])
    echo = json.dumps({"runs": [str(d) for d in run_dirs]}, separators=(",", ":"))
    return header, out, echo


def cmd_compare(args) -> int:
    header, rows, echo = compare_rows(args.runs)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, header, rows, echo)
    for r in rows:
        print(f"{r[0]:<20} {r[1]:<10} lambda={r[2]!s:<5} mse {r[7]}")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="driftbank", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic advection dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model and write checkpoint + log")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("corrected", "bypass", "passive", "no-cle", "no-camr",
                                      "no-content"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics CSV and retrieval weight dump on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--run-id", default=None, help="defaults to the output directory name")
    p.add_argument("--dump", type=int, default=1, help="test sequences in retrieval.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of a short rollout")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("prop1-audit", help="drift-reduction condition audit")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject", choices=("neg", "zero"), default=None,
                   help="use corrections equal to -error or zero")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--limit", type=int, default=None, help="test sequences to roll out")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_prop1_audit)

    p = sub.add_parser("compare", help="side-by-side table of evaluated runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            return args.func(args)
    except (RunConfigError, ConfigError, SynthConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FrameFormatError, DataError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
