"""Command-line front end: ``hessfine {pretrain,finetune,measure,stability,sweep}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import stability
from .config import SCHEMA_VERSION, ExperimentConfig, load_config
from .errors import CapacityError, CheckpointError, ConfigError, DataError, HessfineError, NumericError
from .net import accuracy, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAPACITY = 0, 2, 3, 4


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=1, sort_keys=True) + "\n")


def _jobs(args) -> int:
    if args.jobs is not None:
        jobs = args.jobs
    else:
        env = os.environ.get("HESSFINE_JOBS")
        try:
            jobs = int(env) if env else 1
        except ValueError as exc:
            raise ConfigError(f"HESSFINE_JOBS must be an integer, got {env!r}") from exc
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return jobs


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed_override is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed_override])
    out = Path(args.out or cfg.output)
    return cfg, out


def _header(cfg: ExperimentConfig, command: str, jobs: int) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "jobs": jobs, "config": cfg.to_dict()}


def _load(path, what: str):
    if not path:
        raise ConfigError(f"no {what} given; pass --{what} or set it in the config")
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"{what} file {path} not found") from exc


# -- commands -------------------------------------------------------------


def cmd_pretrain(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> Path:
    task = ex.build_task(cfg)
    seed = cfg.seeds[0]
    ckpt = ex.pretrain_checkpoint(cfg, task, seed=seed)
    ckpt.provenance["config_task"] = dataclasses.asdict(cfg.task)
    path = save_checkpoint(out / "pretrained.json", ckpt)
    net = ckpt.network
    manifest = _header(cfg, "pretrain", jobs)
    manifest.update(
        checkpoint=path.name,
        seed=seed,
        source_accuracy=accuracy(net, task.source.X, task.source.y),
        target_test_accuracy=accuracy(net, task.test.X, task.test.y),
        source=task.source.provenance,
    )
    write_json(out / "pretrain_manifest.json", manifest)
    return path


def _write_runs_csv(path: Path, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["method", "rho", "seed", "train_acc_noisy", "train_acc_clean", "val_acc_noisy", "test_acc",
            "epochs_run", "best_epoch", "hessian_distance"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            w.writerow(["" if r.get(c) is None else r.get(c) for c in cols])


def cmd_finetune(cfg: ExperimentConfig, out: Path, checkpoint, jobs: int = 1) -> dict:
    init = _load(checkpoint or cfg.checkpoint, "checkpoint")
    task = ex.build_task(cfg)
    method = cfg.trainer.method
    args = [(cfg, init, task, s, method, None, cfg.measure.enabled) for s in cfg.seeds]
    results = ex.map_seeds(jobs, args)
    for r in results:
        d = out / f"seed_{r.seed}"
        save_checkpoint(d / "model.json", r.network, {"command": "finetune", "method": method, "seed": r.seed})
        r.trace.write_csv(d / "trace.csv")
        if r.bounds is not None:
            r.bounds.write(d)
    records = [r.record for r in results]
    report = _header(cfg, "finetune", jobs)
    report.update(
        runs=records,
        summary={key: ex.summarize([r[key] for r in records])
                 for key in ("train_acc_noisy", "train_acc_clean", "val_acc_noisy", "test_acc")},
        bounds={str(r.seed): r.bounds.to_dict() for r in results if r.bounds is not None},
    )
    write_json(out / "report.json", report)
    _write_runs_csv(out / "runs.csv", records)
    return report


def cmd_measure(cfg: ExperimentConfig, out: Path, checkpoint, init_path, jobs: int = 1):
    net = _load(checkpoint, "checkpoint").network
    init = _load(init_path or cfg.checkpoint, "init").network
    if net.dims != init.dims:
        raise ConfigError(f"checkpoint dims {net.dims} differ from init dims {init.dims}")
    task = ex.build_task(cfg)
    seed = cfg.seeds[0]
    F = ex.generating_confusion(cfg)
    tr_noisy, _ = ex.noisy_splits(task, F, seed)
    F_used = ex.reweight_confusion(cfg, F, task.train.y, tr_noisy.y)
    report = ex.measure_report(cfg, net, init, task.train, task.test, F=F_used, jobs=jobs,
                               prior_data=(tr_noisy.X, tr_noisy.y))
    report.metadata["seed"] = seed
    report.write(out)
    write_json(out / "measure_manifest.json", _header(cfg, "measure", jobs))
    return report


def cmd_stability(cfg: ExperimentConfig, out: Path, checkpoint, jobs: int = 1):
    net = _load(checkpoint or cfg.checkpoint, "checkpoint").network
    task = ex.build_task(cfg)
    seed = cfg.seeds[0]
    curve, heat = ex.stability_outputs(cfg, net, task, seed=seed)
    curve.write_csv(out / "stability.csv")
    heat.write_csv(out / "heatmap.csv")
    summary = _header(cfg, "stability", jobs)
    summary.update(
        seed=seed,
        relative_rss=stability.relative_rss(curve),
        half_factor=curve.half,
        normalization=curve.normalization,
        nonfinite_draws=curve.nonfinite,
        heatmap_threshold=heat.threshold,
        heatmap_selection=heat.selection,
        heatmap_counts=heat.counts,
        heatmap_diagonal_minimum_classes=heat.diagonal_minimum_classes(),
    )
    write_json(out / "stability.json", summary)
    return summary


def cmd_sweep(cfg: ExperimentConfig, out: Path, checkpoint, jobs: int = 1) -> Path:
    rates = list(cfg.noise.rates)
    rows = []
    if rates:
        init = _load(checkpoint or cfg.checkpoint, "checkpoint")
        task = ex.build_task(cfg)
        for rho in rates:
            for method in cfg.trainer.methods:
                try:
                    results = ex.map_seeds(jobs, [(cfg, init, task, s, method, rho, False) for s in cfg.seeds])
                    rows.extend((method, rho, r.seed, r.record["test_acc"], "ok") for r in results)
                except HessfineError as exc:
                    rows.extend((method, rho, s, "", f"{type(exc).__name__}: {exc}") for s in cfg.seeds)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "rho", "seed", "test_acc", "status"])
        w.writerows(rows)
    write_json(out / "sweep_manifest.json", _header(cfg, "sweep", jobs))
    return path


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hessfine", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed-override", type=int, help="run this single seed instead of the config's list")
        p.add_argument("--out", help="output directory (default: config 'output')")
        p.add_argument("--jobs", type=int, help="worker count (default: $HESSFINE_JOBS or 1)")
        p.add_argument("--timing", action="store_true", help="record wall-clock seconds (outputs stop being byte-stable)")
        return p

    common(sub.add_parser("pretrain", help="train the source model and write a checkpoint"))
    p = common(sub.add_parser("finetune", help="fine-tune on noisy labels for every seed"))
    p.add_argument("--checkpoint", help="pretrained checkpoint")
    p = common(sub.add_parser("measure", help="generalization measures for a fine-tuned model"))
    p.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint")
    p.add_argument("--init", help="pretrained checkpoint the distances are measured from")
    p = common(sub.add_parser("stability", help="noise-stability curve and label-trace heatmap"))
    p.add_argument("--checkpoint", help="model to perturb")
    p = common(sub.add_parser("sweep", help="test accuracy over noise rates and methods"))
    p.add_argument("--checkpoint", help="pretrained checkpoint")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg, out = _resolve(args)
    jobs = _jobs(args)
    start = time.perf_counter()
    if args.command == "pretrain":
        cmd_pretrain(cfg, out, jobs)
    elif args.command == "finetune":
        cmd_finetune(cfg, out, args.checkpoint, jobs)
    elif args.command == "measure":
        cmd_measure(cfg, out, args.checkpoint, args.init, jobs)
    elif args.command == "stability":
        cmd_stability(cfg, out, args.checkpoint, jobs)
    elif args.command == "sweep":
        cmd_sweep(cfg, out, args.checkpoint, jobs)
    if args.timing:
        write_json(out / "timing.json", {"command": args.command, "wall_clock_seconds": time.perf_counter() - start})
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"hessfine: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapacityError as exc:
        print(f"hessfine: capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except NumericError as exc:
        print(f"hessfine: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"hessfine: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
