from __future__ import annotations

import json

import pytest
from pydantic import ValidationError

from fedbuff_ma import SimConfig
from fedbuff_ma.config import TUNED_HYPERPARAMETERS, ExperimentSpec, reference_config


def test_defaults_describe_the_reference_quadratic_setup():
    cfg = SimConfig()
    assert (cfg.population, cfg.K, cfg.cohort, cfg.horizon) == (1000, 100, 50, 500)
    assert cfg.delay.kind == "half-normal" and cfg.delay.scale == 5.0
    assert cfg.task.dim == 100 and cfg.optimizer == "fedavgm" and cfg.beta == 0.9


def test_sample_rate_sets_count():
    assert SimConfig(population=200, sample_rate=0.25, cohort=10).K == 50


@pytest.mark.parametrize(
    "kw",
    [
        {"cohort": 200},
        {"sample_count": 2000},
        {"method": "ma-full", "beta": -0.5},
        {"method": "ma-light", "optimizer": "fedavg"},
        {"dp": {"clip_bound": 1.0, "noise_multiplier": 1.0, "one_hot_noise": 2.0}, "staleness_exponent": 1.0},
        {"method": "nope"},
        {"server_lr": 0.0},
        {"unknown_field": 1},
    ],
)
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValidationError):
        SimConfig(**kw)


def test_hash_is_content_based():
    a = SimConfig(seed=1)
    b = SimConfig.model_validate(json.loads(a.canonical_json()))
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != SimConfig(seed=2).content_hash()


def test_expand_uses_aliases_and_paths():
    spec = ExperimentSpec(axes={"beta": [0.0, 0.9], "p": [1.0], "task.heterogeneity": [0.1, 0.2], "seed": [0, 1]})
    runs = spec.expand()
    assert spec.size() == len(runs) == 8
    axes, cfg = runs[-1]
    assert axes == {"beta": 0.9, "p": 1.0, "task.heterogeneity": 0.2, "seed": 1}
    assert cfg.beta == 0.9 and cfg.staleness_exponent == 1.0 and cfg.task.heterogeneity == 0.2 and cfg.seed == 1
    assert len({c.content_hash() for _, c in runs}) == 8


def test_expand_validates_each_point():
    spec = ExperimentSpec(axes={"C": [10, 500]})
    with pytest.raises(ValidationError):
        spec.expand()


def test_reference_config_takes_tuned_step_unless_overridden():
    cfg = reference_config(method="ma-full", beta=0.9)
    tuned = TUNED_HYPERPARAMETERS[("ma-full", 0.9)]
    assert cfg.server_lr == tuned["server_lr"] and cfg.staleness_exponent == tuned["staleness_exponent"]
    assert cfg.task.curvature_min == 0.003 and cfg.cohort == 50
    assert reference_config(method="ma-full", beta=0.9, server_lr=3.0).server_lr == 3.0
    assert reference_config(method="weight-prediction").server_lr == 14.0
    assert reference_config(task={"dim": 7}).task.heterogeneity == 0.3
