import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from primlearn.monitor import (
    ABNORMAL, NORMAL, MonitorConfig, MonitorState, StreamMonitor, abnormal_points, classify_execution,
    exceedance_probability, is_abnormal_point, posterior_trace, simulate_bernoulli_stream,
)
from primlearn.simulator import ExecutionTrace
from primlearn.special import beta_sf

from conftest import reference_model


def test_config_invariants():
    cfg = MonitorConfig()
    assert (cfg.alpha, cfg.beta, cfg.P) == (1.0, 999.0, 0.999)
    c = MonitorConfig.from_prior(0.99, 500)
    assert (c.alpha, c.beta) == (pytest.approx(5.0), pytest.approx(495.0))
    with pytest.raises(ValueError):
        MonitorConfig(alpha=999.0, beta=1.0)
    with pytest.raises(ValueError):
        MonitorConfig(alpha=2.0, beta=999.0)
    with pytest.raises(ValueError):
        MonitorConfig(window=0.0)
    assert MonitorConfig.from_dict(cfg.to_dict()) == cfg


def test_prior_tail_closed_form():
    cfg = MonitorConfig()
    assert exceedance_probability(0, 0, cfg) == pytest.approx(0.999 ** 999, abs=1e-12)


def test_normals_lower_the_tail():
    cfg = MonitorConfig()
    prior = exceedance_probability(0, 0, cfg)
    assert exceedance_probability(0, 100, cfg) < prior


def test_point_membership(prims):
    model = reference_model(prims[0])
    tau = 0.8
    mu, var = model.at(tau)
    assert not is_abnormal_point(tau, mu, model, 0.999)
    far = mu.copy()
    far[2] += 10 * math.sqrt(var[2])
    for P in (0.9, 0.99, 0.999, 0.9999):
        assert is_abnormal_point(tau, far, model, P)


def test_point_membership_rate(prims):
    rng = np.random.default_rng(0)
    model = reference_model(prims[1])
    tau = rng.uniform(0, 2, 100_000)
    mu, var = model.at(tau)
    x = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
    for P in (0.99, 0.999):
        assert abs(abnormal_points(model, tau, x, P).mean() - (1 - P)) <= 0.005


def test_window_eviction_is_strict():
    st_ = MonitorState(MonitorConfig(window=1.0))
    st_.update(0.0, True)
    st_.update(1.0, False)
    assert (st_.n_abnormal, st_.n_normal) == (1, 1)
    st_.update(1.0 + 1e-9, False)
    assert (st_.n_abnormal, st_.n_normal) == (0, 2)
    with pytest.raises(ValueError):
        st_.update(0.5, False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 0.3), st.booleans()), min_size=1, max_size=80))
def test_sequential_equals_batch(steps):
    cfg = MonitorConfig(window=1.0)
    state = MonitorState(cfg)
    t = 0.0
    hist = []
    for dt, ab in steps:
        t += dt
        p = state.update(t, ab)
        hist.append((t, ab))
        live = [a for s, a in hist if s >= t - cfg.window]
        n_ab = sum(live)
        assert p == beta_sf(1 - cfg.P, cfg.alpha + n_ab, cfg.beta + len(live) - n_ab)
        assert state.n_total == len(live)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 60), st.integers(0, 200))
def test_monotone_in_counts(n_ab, n_norm):
    cfg = MonitorConfig()
    p = exceedance_probability(n_ab, n_norm, cfg)
    assert exceedance_probability(n_ab + 1, n_norm, cfg) >= p
    assert exceedance_probability(n_ab, n_norm + 1, cfg) <= p


def _trace(model, offset_sigma=0.0, dim=0, start=0.0):
    tau = np.arange(0.0, 2.0 + 1e-9, 0.02)
    mu, var = model.at(tau)
    x = mu.copy()
    sel = tau >= start
    x[sel, dim] += offset_sigma * np.sqrt(var[sel, dim])
    return ExecutionTrace(model.primitive_id, (0, model.primitive_id, 0), tau, x, t_start=10.0)


def test_classify_reference_and_offset(prims):
    model = reference_model(prims[2])
    clean = _trace(model)
    for method in ("naive", "beta"):
        assert classify_execution(clean, model, MonitorConfig(), method) == NORMAL
    bad = _trace(model, offset_sigma=10.0, start=1.5)
    for method in ("naive", "beta"):
        assert classify_execution(bad, model, MonitorConfig(), method) == ABNORMAL
    with pytest.raises(ValueError):
        classify_execution(clean, model, MonitorConfig(), "oracle")


def test_beta_tolerates_isolated_exits(prims):
    model = reference_model(prims[2])
    tr = _trace(model)
    x = tr.states.copy()
    x[[10, 60], 0] += 10 * math.sqrt(model.var[0, 0])
    tr = ExecutionTrace(tr.primitive_id, tr.triplet, tr.times, x)
    assert classify_execution(tr, model, MonitorConfig(), "naive") == ABNORMAL
    assert classify_execution(tr, model, MonitorConfig(), "beta") == NORMAL
    flags, probs = posterior_trace(tr, model, MonitorConfig())
    assert flags.sum() == 2 and probs.max() < 0.999


def test_stream_monitor(prims):
    model = reference_model(prims[3])
    good = _trace(model).records()
    mon = StreamMonitor({3: model})
    out = list(mon.run(good))
    assert len(out) == len(good) and not mon.flagged
    assert set(out[0]) == {"t", "p_failure_rate_exceeds", "flagged"}
    mon = StreamMonitor({3: model})
    list(mon.run(_trace(model, offset_sigma=10.0, start=1.0).records()))
    assert mon.flagged


def test_threshold_needs_five_exits_in_fifty():
    cfg = MonitorConfig()
    vals = [exceedance_probability(k, 50 - k, cfg) for k in range(7)]
    assert vals[4] < cfg.flag_threshold < vals[5]
    assert np.all(np.diff(vals) > 0)


def test_bernoulli_false_alarm_rate():
    cfg = MonitorConfig()
    rng = np.random.default_rng(0)
    flags = [simulate_bernoulli_stream(1 - cfg.P, cfg, 100.0, 50.0, rng) is not None for _ in range(100)]
    assert np.mean(flags) < 0.05


def test_bernoulli_high_rate_detected_at_high_observation_rate():
    # with 10 expected exits per window the posterior crosses the threshold quickly
    cfg = MonitorConfig()
    rng = np.random.default_rng(1)
    times = [simulate_bernoulli_stream(10 * (1 - cfg.P), cfg, 2 * cfg.window, 1000.0, rng) for _ in range(50)]
    assert np.mean([t is not None for t in times]) > 0.95
