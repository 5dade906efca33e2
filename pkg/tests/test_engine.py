from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedbuff_ma import SimConfig, run
from fedbuff_ma.engine import ArrivalProcess, PendingUpdate, simulate_staleness, substream, weight_prediction_client
from fedbuff_ma.errors import CausalityViolation
from fedbuff_ma.tasks import make_quadratic_task


def small(**kw) -> SimConfig:
    base = dict(population=60, sample_count=12, cohort=6, horizon=40, server_lr=1.0, task={"dim": 5})
    base.update(kw)
    return SimConfig(**base)


def test_substreams_are_independent_and_stable():
    a = substream(3, "delays").random(4)
    np.testing.assert_array_equal(a, substream(3, "delays").random(4))
    assert not np.allclose(a, substream(3, "shuffle").random(4))
    assert not np.allclose(a, substream(4, "delays").random(4))


def test_same_seed_same_metrics():
    cfg = small(method="ma-full", staleness_exponent=1.0, seed=5)
    a, b = run(cfg), run(cfg)
    assert a.metrics == b.metrics
    np.testing.assert_array_equal(a.theta, b.theta)
    assert run(small(method="ma-full", staleness_exponent=1.0, seed=6)).metrics != a.metrics


@pytest.mark.parametrize("method", ["fedbuff-momentum", "ma-full", "ma-light", "weight-prediction", "sync"])
def test_every_method_completes(method):
    res = run(small(method=method, staleness_exponent=0.0 if method == "sync" else 0.5))
    assert not res.diverged
    assert len(res.metrics) == 40
    assert [m["iteration"] for m in res.metrics] == list(range(1, 41))
    assert res.summary["final_excess_loss"] < res.metrics[0]["excess_loss"]


def test_arrival_conservation():
    res = run(small(tau_max=3, delay={"kind": "uniform", "scale": 8.0}))
    s = res.summary
    assert s["enqueued"] == s["accepted"] + s["dropped_stale"] + s["dropped_surplus"] + s["pending_at_end"]
    assert s["accepted"] == 40 * 6
    assert s["dropped_stale"] > 0
    assert all(m["max_staleness"] <= 3 for m in res.metrics)
    assert sum(m["drops"] for m in res.metrics) == s["dropped_stale"]


def test_w_rows_reflect_buffer():
    res = run(small(staleness_exponent=1.0))
    w = res.staleness.dense()
    assert np.all(np.triu(w, 1) == 0)
    # Every row carries C down-scaled arrivals, each weighted at most 1/C.
    assert np.all(w.sum(axis=1) <= 1 + 1e-12)
    assert np.all(w.sum(axis=1) >= 1 / (1 + 20) - 1e-12)


def test_simulate_staleness_matches_training_run():
    for method in ("fedbuff-momentum", "ma-light"):
        cfg = small(method=method, staleness_exponent=0.7, seed=9)
        np.testing.assert_array_equal(simulate_staleness(cfg).dense(), run(cfg).staleness.dense())


def test_sync_has_zero_staleness_and_discards_stragglers():
    res = run(small(method="sync"))
    w = res.staleness.dense()
    np.testing.assert_allclose(w, np.eye(40), atol=1e-15)
    assert res.summary["dropped_surplus"] == 40 * 6
    assert all(m["mean_staleness"] == 0 for m in res.metrics)


def test_poisson_sampling_resamples_when_starved():
    res = run(small(sampling="poisson", sample_count=6, cohort=6, population=60))
    assert len(res.metrics) == 40
    assert res.summary["resampled_iterations"] > 0


def test_private_run_records_noisy_w():
    dp = {"clip_bound": 1.0, "noise_multiplier": 0.01, "one_hot_noise": 0.05}
    res = run(small(method="ma-full", dp=dp))
    assert not res.diverged
    assert res.summary["dp_sensitivity"] == pytest.approx(np.sqrt(1 + res.summary["dp_gamma"] ** 2))
    w = res.staleness.dense()
    assert np.any(np.triu(w, 1) == 0) and np.any(w[np.tril_indices(40, -1)] < 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_not_raised():
    res = run(small(server_lr=1e5, beta=0.0, horizon=200, task={"dim": 5, "heterogeneity": 1.0}))
    assert res.diverged
    assert res.summary["diverged"] and res.summary["iterations"] < 200


def test_light_consistency_tracked():
    res = run(small(method="ma-light", staleness_exponent=1.0, retain_history=True))
    assert res.summary["light_consistency_max"] <= 1e-8
    assert all("u" in m and "v" in m for m in res.metrics)


def test_causality_guards():
    proc = ArrivalProcess(small(), 0)
    proc.now = 5
    with pytest.raises(CausalityViolation):
        proc.enqueue(PendingUpdate(0, 1, 3, None))
    with pytest.raises(CausalityViolation):
        PendingUpdate(0, 1, -1, None)
    with pytest.raises(CausalityViolation):
        proc.admit(PendingUpdate(0, 7, 9, None), 6)


def test_weight_prediction_extrapolates():
    task = make_quadratic_task(3, 4, 0.0, np.random.default_rng(0))
    theta = np.ones(3)
    step = np.full(3, 0.1)
    got = weight_prediction_client(theta, 2, step, task, 0, 0.1, 1)
    want = task.local_updates(np.array([0]), theta - 0.2, 0.1, 1)[0]
    np.testing.assert_allclose(got, want)


def test_fedadam_second_moments_nonnegative():
    res = run(small(optimizer="fedadam", server_lr=0.05), keep_second_moments=True)
    assert len(res.second_moments) == 40
    assert all(np.all(v >= 0) for v in res.second_moments)


@settings(max_examples=15, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    tau_max=st.integers(0, 6),
    kind=st.sampled_from(["half-normal", "uniform", "exponential"]),
)
def test_staleness_never_exceeds_bound(seed, tau_max, kind):
    cfg = small(seed=seed, tau_max=tau_max, horizon=25, delay={"kind": kind, "scale": 4.0})
    w = simulate_staleness(cfg).dense()
    t_idx, s_idx = np.nonzero(w)
    assert np.all(t_idx - s_idx <= tau_max)
    assert np.all(t_idx >= s_idx)
