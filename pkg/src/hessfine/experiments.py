"""Pipelines shared by the command line and the acceptance suite."""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data, measures, noise, stability, train
from .config import ExperimentConfig
from .errors import ConfigError
from .hessian import hessian_lipschitz_G
from .net import Checkpoint, LossKind, LossSpec, accuracy

TRAIN_NOISE_STREAM = 11
VAL_NOISE_STREAM = 12


@dataclass(frozen=True)
class Task:
    train: data.Dataset
    val: data.Dataset
    test: data.Dataset
    source: data.Dataset


def build_task(cfg: ExperimentConfig) -> Task:
    t = cfg.task
    if t.generator == "csv":
        full = data.load_csv(t.csv, t.label_column, k=t.k)
        source = data.load_csv(t.source_csv, t.label_column, k=t.k)
    else:
        full = data.gaussian_blobs(t.k, t.d, t.n_train + t.n_val + t.n_test, t.spread, t.center_scale, seed=t.seed)
        source = data.related_task(full.provenance, t.source_perturbation, seed=t.source_seed, n=t.source_n)
    total = t.n_train + t.n_val + t.n_test
    tr, va, te = data.split(full, (t.n_train / total, t.n_val / total, t.n_test / total), seed=t.seed)
    if va is None or te is None:
        raise ConfigError("validation and test splits must be nonempty")
    return Task(tr, va, te, source)


def architecture(cfg: ExperimentConfig):
    a = cfg.architecture
    return [int(d) for d in a.dims], a.activations(), LossSpec(a.loss)


def pretrain_checkpoint(cfg: ExperimentConfig, task: Task | None = None, seed: int | None = None) -> Checkpoint:
    task = task or build_task(cfg)
    dims, acts, spec = architecture(cfg)
    tc = cfg.pretrain if seed is None else dataclasses.replace(cfg.pretrain, seed=seed)
    return train.pretrain(task.source, dims, acts, tc, spec)


def generating_confusion(cfg: ExperimentConfig, rho: float | None = None) -> noise.ConfusionMatrix:
    if cfg.noise.source == "csv":
        return noise.read_confusion_csv(cfg.noise.csv)
    return noise.uniform_confusion(cfg.task.k, cfg.noise.rho if rho is None else rho)


def noisy_splits(task: Task, F: noise.ConfusionMatrix, seed: int):
    """Training and validation sets with labels redrawn from ``F``; the test set stays clean."""
    ytr = noise.apply_noise(task.train.y, F, seed=[int(seed), TRAIN_NOISE_STREAM])
    yva = noise.apply_noise(task.val.y, F, seed=[int(seed), VAL_NOISE_STREAM])
    return task.train.with_labels(ytr, noise_seed=int(seed)), task.val.with_labels(yva, noise_seed=int(seed))


def reweight_confusion(cfg: ExperimentConfig, F: noise.ConfusionMatrix, clean, noisy) -> noise.ConfusionMatrix:
    if cfg.noise.source == "estimate":
        return noise.estimate_confusion(clean, noisy, cfg.task.k)
    return F


def run_method(method: str, init, train_set, val, test, F, cfg: ExperimentConfig, seed: int):
    tc = dataclasses.replace(cfg.train, seed=int(seed), early_stopping=method in cfg.trainer.early_stopping)
    if method == "alg1":
        return train.algorithm1(init, train_set, F, tc, val=val, test=test)
    if method in ("alg1-noproj", "reweight-only"):
        return train.algorithm1(init, train_set, F, tc, val=val, test=test, project=False)
    if method == "project-only":
        return train.finetune_project(init, train_set, tc, val=val, test=test)
    if method == "vanilla":
        return train.finetune_vanilla(init, train_set, tc, val=val, test=test)
    if method == "l2sp":
        return train.finetune_l2sp(init, train_set, tc, cfg.trainer.l2sp, val=val, test=test)
    if method == "labelsmooth":
        return train.finetune_labelsmooth(init, train_set, tc, cfg.trainer.label_smoothing, val=val, test=test)
    if method == "mixup":
        return train.finetune_mixup(init, train_set, tc, cfg.trainer.mixup, val=val, test=test)
    raise ConfigError(f"unknown trainer method {method!r}")


def measure_report(cfg: ExperimentConfig, net, init, train_set, test, F=None, jobs: int = 1, prior_data=None):
    """Bound report with the Hessian maxima taken under the configured bounded loss."""
    m = cfg.measure
    kind = LossKind(m.loss)
    report = measures.bound_report(
        net, init, train_set, test, C=m.C, F=F, kl_sigma=m.kl_sigma, eval_cap=m.eval_cap,
        kind=kind, jobs=jobs, method=m.method, prior_data=prior_data,
    )
    report.metadata["hessian_lipschitz_G"] = hessian_lipschitz_G(net, train_set.X, kind)
    return report


@dataclass
class SeedResult:
    seed: int
    method: str
    rho: float
    network: object
    trace: train.TrainTrace
    record: dict
    bounds: object = None


def finetune_seed(cfg: ExperimentConfig, init: Checkpoint, task: Task, seed: int, method: str,
                  rho: float | None = None, with_bounds: bool = False) -> SeedResult:
    rho = cfg.noise.rho if rho is None else rho
    F = generating_confusion(cfg, rho)
    tr_noisy, va_noisy = noisy_splits(task, F, seed)
    F_used = reweight_confusion(cfg, F, task.train.y, tr_noisy.y)
    net, trace = run_method(method, init, tr_noisy, va_noisy, task.test, F_used, cfg, seed)
    record = {
        "seed": int(seed),
        "method": method,
        "rho": float(rho),
        "train_acc_noisy": accuracy(net, tr_noisy.X, tr_noisy.y),
        "train_acc_clean": accuracy(net, task.train.X, task.train.y),
        "val_acc_noisy": accuracy(net, va_noisy.X, va_noisy.y),
        "test_acc": accuracy(net, task.test.X, task.test.y),
        "epochs_run": trace.epochs[-1],
        "best_epoch": trace.best_epoch,
        "final_distances": trace.distances[-1],
    }
    bounds = None
    if with_bounds:
        # Hessian maxima use clean labels; n and the margin use the noisy training set
        bounds = measure_report(cfg, net, init, task.train, task.test, F=F_used, prior_data=(tr_noisy.X, tr_noisy.y))
        record["hessian_distance"] = bounds.hessian_distance_total
    return SeedResult(int(seed), method, float(rho), net, trace, record, bounds)


def _seed_job(args):
    return finetune_seed(*args)


def map_seeds(jobs: int, arglist):
    """Run ``finetune_seed`` over argument tuples; results come back in input order."""
    if jobs <= 1 or len(arglist) <= 1:
        return [finetune_seed(*a) for a in arglist]
    with ProcessPoolExecutor(max_workers=min(jobs, len(arglist))) as pool:
        return list(pool.map(_seed_job, arglist))


def summarize(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {"mean": math.nan, "std": math.nan, "count": 0}
    return {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if v.size > 1 else 0.0, "count": int(v.size)}


def stability_outputs(cfg: ExperimentConfig, net, task: Task, seed: int = 0):
    """Stability curve on a capped clean training subsample plus the label-trace heatmap."""
    m = cfg.measure
    X, y = measures.eval_set(task.train, cap=m.eval_cap, seed=seed)
    curve = stability.stability_curve(net, X, y, sigmas=m.sigmas, N=m.draws, seed=seed, half=m.half)
    heat = stability.trace_heatmap(net, task.train.X, task.train.y, tau=m.heatmap_tau, m=m.heatmap_per_class, seed=seed)
    return curve, heat
