from dataclasses import replace

import numpy as np
import pytest

from primlearn.lattice import Plan, State, concatenate
from primlearn.simulator import (
    Diverged, ExecutionTrace, FaultSpec, NotEnoughTriplets, SimConfig, augment_triplet, collect_triplets,
    execute, run_triplet, select_triplets,
)

ZERO = (0.0, 0.0, 0.0)
QUIET = SimConfig(process_noise_std=0.0, obs_noise_std=(0.0,) * 6, bias=ZERO, drag=0.0)


def rest_plan(prims, n=3, seed=0):
    rng = np.random.default_rng(seed)
    rest = [p.id for p in prims if p.family == "rest_rest"]
    return Plan(0.0, State(ZERO, ZERO), tuple(int(i) for i in rng.choice(rest, n)))


def mixed_plan(prims):
    # rest -> moving along +x, keep moving, stop
    ramp = next(p for p in prims if p.family == "rest_moving" and p.x_F.position == (1.0, 0.0, 0.0))
    cruise = next(p for p in prims if p.family == "moving_moving" and p.x_F.position == (1.0, 0.0, 0.0))
    stop = next(p for p in prims if p.family == "moving_rest" and p.x_I.velocity == ramp.x_F.velocity
                and p.x_F.position == (1.0, 0.0, 0.0))
    return Plan(0.0, State(ZERO, ZERO), (ramp.id, cruise.id, cruise.id, stop.id))


def test_zero_noise_tracks_reference(prims):
    for plan in (rest_plan(prims), mixed_plan(prims)):
        ex = execute(plan, prims, QUIET)
        ref = ex.reference
        p_ref = np.column_stack([np.interp(ex.log[:, 0], ref[:, 0], ref[:, c]) for c in (1, 2, 3)])
        # sample-point comparison avoids interpolation error of the reference itself
        on_grid = np.isin(np.round(ex.log[:, 0] / 0.02, 6) % 1, [0.0])
        err = np.linalg.norm(ex.log[on_grid, 1:4] - p_ref[on_grid], axis=1)
        assert err.max() <= 1e-3


def test_bias_steady_state(prims):
    b = np.array([0.3, -0.12, 0.06])
    cfg = replace(QUIET, bias=tuple(b))
    pid = prims[0].id
    plan = Plan(0.0, State(ZERO, ZERO), (pid,) * 4)
    ex = execute(plan, prims, cfg)
    # tail of the last (rest) segment after transients decay: offset b / Kp
    end = ex.log[-1]
    target = np.asarray(concatenate(plan, prims)[-1, 1:4])
    np.testing.assert_allclose(end[1:4] - target, b / cfg.kp, atol=2e-3)


def test_zero_control_drifts_linearly(prims):
    # u_max = 0 clamps every command, leaving a free double integrator
    cfg = replace(QUIET, u_max=0.0)
    cruise = next(p for p in prims if p.family == "moving_moving" and p.x_F.position == (1.0, 0.0, 0.0))
    v0 = np.asarray(cruise.x_I.velocity)
    ex = execute(Plan(0.0, State(ZERO, cruise.x_I.velocity), (cruise.id,)), prims, cfg)
    t = ex.log[:, 0]
    np.testing.assert_allclose(ex.log[:, 1:4], np.outer(t, v0), atol=1e-12)
    np.testing.assert_allclose(ex.log[:, 4:7], np.broadcast_to(v0, (len(t), 3)), atol=1e-15)


def test_determinism_and_seed_dependence(prims):
    plan = rest_plan(prims, 2, seed=4)
    cfg = SimConfig(seed=3)
    a, b = execute(plan, prims, cfg), execute(plan, prims, cfg)
    np.testing.assert_array_equal(a.observations, b.observations)
    np.testing.assert_array_equal(a.obs_times, b.obs_times)
    c = execute(plan, prims, cfg, seed=4)
    assert not np.array_equal(a.observations, c.observations)


def test_resolved_bias_is_run_level():
    a, b = SimConfig(seed=1), SimConfig(seed=2)
    np.testing.assert_array_equal(a.resolved_bias(), SimConfig(seed=1).resolved_bias())
    assert not np.array_equal(a.resolved_bias(), b.resolved_bias())
    assert np.all(np.abs(a.resolved_bias()) < 0.5)
    np.testing.assert_array_equal(SimConfig(bias=(1, 2, 3)).resolved_bias(), [1, 2, 3])


def test_slicing_and_jitter(prims):
    plan = mixed_plan(prims)
    cfg = SimConfig(seed=0)
    ex = execute(plan, prims, cfg)
    period = 1.0 / cfg.obs_rate
    assert len(ex.traces) == len(plan.primitive_ids)
    spacing = np.diff(ex.obs_times)
    assert spacing.min() >= period * (1 - 2 * cfg.obs_jitter) - 1e-12
    assert spacing.max() <= period * (1 + 2 * cfg.obs_jitter) + 1e-12
    assert np.std(spacing) > 0
    for tr, pid in zip(ex.traces, plan.primitive_ids):
        t_F = prims[pid].t_F
        assert tr.primitive_id == pid
        assert tr.times[0] >= 0 and tr.times[0] <= period * (1 + cfg.obs_jitter)
        assert tr.times[-1] <= t_F and tr.times[-1] >= t_F - period * (1 + cfg.obs_jitter)
    total = sum(len(tr.times) for tr in ex.traces)
    assert total == len(ex.obs_times)


def test_traces_in_primitive_frame(prims):
    ex = execute(mixed_plan(prims), prims, SimConfig(seed=1))
    for tr in ex.traces:
        err = tr.states[:, :3] - prims[tr.primitive_id].state_at(tr.times)[:, :3]
        assert np.abs(err).max() < 0.3


def test_divergence_detected(prims):
    cfg = replace(QUIET, kp=-50.0, kd=0.0, divergence_limit=1.0)
    with pytest.raises(Diverged):
        execute(rest_plan(prims, 2), prims, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(obs_rate=1000.0)
    with pytest.raises(ValueError):
        SimConfig(process_noise_std=-1.0)
    with pytest.raises(ValueError):
        FaultSpec("meteor", 1.0)
    with pytest.raises(ValueError):
        FaultSpec("extra_bias", 1.0, onset=-1.0)
    cfg = SimConfig(seed=5, bias=(0.1, 0.2, 0.3))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
    f = FaultSpec("gust", 2.0, 0.5, 1.0, (0, 1, 0))
    assert FaultSpec.from_dict(f.to_dict()) == f


def test_augment_triplet(prims):
    rr = [p.id for p in prims if p.family == "rest_rest"]
    ids, mid = augment_triplet((rr[0], rr[1], rr[2]), prims)
    assert ids == [rr[0], rr[1], rr[2]] and mid == 1
    cruise = next(p for p in prims if p.family == "moving_moving")
    trip = select_triplets(cruise.id, 1, prims, 0)[0]
    ids, mid = augment_triplet(trip, prims)
    assert ids[mid] == cruise.id and list(ids[mid - 1:mid + 2]) == list(trip)
    assert prims[ids[0]].x_I.velocity == ZERO and prims[ids[-1]].x_F.velocity == ZERO
    plan = Plan(0.0, State(ZERO, ZERO), tuple(ids))
    traj = concatenate(plan, prims)
    np.testing.assert_allclose(traj[-1, 4:7], 0.0, atol=1e-12)


def test_select_triplets(prims):
    cruise = next(p for p in prims if p.family == "moving_moving")
    with pytest.raises(NotEnoughTriplets):
        select_triplets(cruise.id, 20, prims, 0)
    trips = select_triplets(cruise.id, 20, prims, 0, allow_repeats=True)
    assert len(trips) == 20 and len(set(trips)) == 4
    a = select_triplets(0, 20, prims, 0)
    assert len(set(a)) == 20 and a == select_triplets(0, 20, prims, 0)
    assert select_triplets(0, 0, prims, 0) == []


def test_collect_and_slice_range(prims):
    cfg = SimConfig(seed=2)
    data = collect_triplets([0, 60], 3, cfg, prims)
    period = 1.0 / cfg.obs_rate
    for pid, trs in data.items():
        assert len(trs) == 3
        for tr in trs:
            assert tr.primitive_id == pid and tr.triplet[1] == pid
            assert tr.times[0] <= period * (1 + cfg.obs_jitter)
            assert tr.times[-1] >= prims[pid].t_F - period * (1 + cfg.obs_jitter)
    again = collect_triplets([0, 60], 3, cfg, prims)
    np.testing.assert_array_equal(again[60][2].states, data[60][2].states)


def test_trace_records_round_trip(prims):
    tr = run_triplet(select_triplets(0, 1, prims, 0)[0], prims, SimConfig(), [0, 0, 0])
    recs = tr.records()
    assert set(recs[0]) == {"t", "tau", "primitive_id", "triplet", "state"}
    back = ExecutionTrace.from_records(recs)
    np.testing.assert_array_equal(back.states, tr.states)
    np.testing.assert_allclose(back.t_start, tr.t_start)


def test_fault_effect(prims):
    """An extra-bias fault of 5 model sigmas drives the exit rate far above 1 - P."""
    from primlearn.execution_model import train_primitive
    from primlearn.monitor import abnormal_points

    cfg = SimConfig(seed=0)
    pid = 0
    trips = select_triplets(pid, 8, prims, 0)
    traces = [run_triplet(t, prims, cfg, [0, pid, j]) for j, t in enumerate(trips)]
    model, _ = train_primitive(prims[pid], traces[:6], n_starts=1)
    sigma_x = float(np.mean(np.sqrt(model.var[:, 0])))
    fault = FaultSpec("extra_bias", 5 * cfg.kp * sigma_x)
    P = 0.999
    for j, t in enumerate(trips[6:]):
        tr = run_triplet(t, prims, cfg, [0, pid, j, 9], [fault], fault_relative_to_middle=True)
        assert abnormal_points(model, tr.times, tr.states, P).mean() > 10 * (1 - P)
