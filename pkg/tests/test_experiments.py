"""Pipeline-level checks on the blobs-5 reference task."""

import dataclasses

import numpy as np
import pytest

from hessfine import experiments as ex
from hessfine.config import ExperimentConfig, config_from_dict
from hessfine.errors import ConfigError

SEEDS = range(10)


@pytest.fixture(scope="module")
def setup():
    cfg = ExperimentConfig().validate()
    task = ex.build_task(cfg)
    return cfg, task, ex.pretrain_checkpoint(cfg, task, seed=0)


def test_task_shapes(setup):
    cfg, task, ckpt = setup
    assert (len(task.train), len(task.val), len(task.test)) == (1000, 250, 250)
    assert ckpt.network.dims == (20, 32, 32, 5)


@pytest.mark.slow
def test_clean_vanilla_beats_ninety_percent(setup):
    cfg, task, ckpt = setup
    acc = [ex.finetune_seed(cfg, ckpt, task, s, "vanilla", rho=0.0).record["test_acc"] for s in SEEDS]
    assert np.mean(acc) > 0.90


@pytest.mark.slow
def test_alg1_degrades_with_noise_rate(setup):
    cfg, task, ckpt = setup
    acc = {rho: [ex.finetune_seed(cfg, ckpt, task, s, "alg1", rho=rho).record["test_acc"] for s in SEEDS]
           for rho in (0.4, 0.6)}
    assert sum(a > b for a, b in zip(acc[0.4], acc[0.6])) >= 8


def test_alg1_identity_matches_vanilla_records(setup):
    cfg, task, ckpt = setup
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, alphas=[float("inf")] * 3, epochs=5),
                              trainer=dataclasses.replace(cfg.trainer, early_stopping=[]))
    a = ex.finetune_seed(cfg, ckpt, task, 3, "alg1", rho=0.0).record
    b = ex.finetune_seed(cfg, ckpt, task, 3, "vanilla", rho=0.0).record
    assert {k: v for k, v in a.items() if k != "method"} == {k: v for k, v in b.items() if k != "method"}


def test_map_seeds_order_and_parallel_equality(setup):
    cfg, task, ckpt = setup
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=2))
    args = [(cfg, ckpt, task, s, "alg1", None, False) for s in (2, 0, 1)]
    serial = ex.map_seeds(1, args)
    parallel = ex.map_seeds(3, args)
    assert [r.seed for r in parallel] == [2, 0, 1]
    for r, q in zip(serial, parallel):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(r.network.weights, q.network.weights))


def test_config_rejects_bad_documents():
    with pytest.raises(ConfigError, match="task.bogus"):
        config_from_dict({"schema_version": 1, "task": {"bogus": 1}})
    with pytest.raises(ConfigError, match="schema_version"):
        config_from_dict({"task": {}})
    with pytest.raises(ConfigError, match="does not match"):
        config_from_dict({"schema_version": 1, "architecture": {"dims": [3, 4, 5]}})
    with pytest.raises(ConfigError, match="unknown trainer method"):
        config_from_dict({"schema_version": 1, "trainer": {"method": "sam"}})
    cfg = config_from_dict({"schema_version": 1, "train": {"epochs": 3}})
    assert cfg.train.lr == 1e-2 and cfg.pretrain.epochs == 30
