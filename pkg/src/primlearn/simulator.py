"""Closed-loop execution of lattice plans on a noisy double integrator.

A PD tracking controller with acceleration feedforward follows the
concatenated reference.  Unmodelled effects (constant wind bias, linear
drag, process noise) make executions deviate systematically from the
reference, which is what the execution models are meant to learn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .lattice import (
    CTRL, POS, VEL, MotionPrimitive, Plan, State, concatenate, segment_offsets,
    valid_triplets,
)

FAULT_KINDS = ("extra_bias", "noise_scale", "gain_loss", "gust")


class Diverged(RuntimeError):
    """Tracking error exceeded the divergence limit."""


class NotEnoughTriplets(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt_sim: float = 0.005
    obs_rate: float = 50.0
    kp: float = 6.0
    kd: float = 5.0
    process_noise_std: float = 0.3
    obs_noise_std: tuple[float, ...] = (0.01, 0.01, 0.01, 0.03, 0.03, 0.03)
    # constant disturbance (wind) shared by every execution of a run; None draws
    # it once from N(0, bias_std^2) per axis using the run seed
    bias: tuple[float, float, float] | None = None
    bias_std: float = 0.1
    drag: float = 0.3
    u_max: float = 5.0
    obs_jitter: float = 0.1
    divergence_limit: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "obs_noise_std", tuple(float(s) for s in self.obs_noise_std))
        if self.bias is not None:
            object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))
        if self.dt_sim <= 0 or self.obs_rate <= 0:
            raise ValueError("dt_sim and obs_rate must be positive")
        if self.obs_rate * self.dt_sim > 1 + 1e-12:
            raise ValueError("observation rate cannot exceed the simulation rate")
        if len(self.obs_noise_std) != 6:
            raise ValueError("obs_noise_std needs one entry per state dimension")
        if min(self.obs_noise_std) < 0 or self.process_noise_std < 0 or self.bias_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0 <= self.obs_jitter < 0.5:
            raise ValueError("obs_jitter must lie in [0, 0.5)")

    def resolved_bias(self) -> np.ndarray:
        if self.bias is not None:
            return np.asarray(self.bias, dtype=float)
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0xB1A5]))
        return self.bias_std * rng.standard_normal(3)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        d = dict(d)
        for k in ("obs_noise_std", "bias"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class FaultSpec:
    kind: str
    magnitude: float
    onset: float = 0.0
    duration: float = math.inf
    direction: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.onset < 0 or not math.isfinite(self.magnitude):
            raise ValueError("fault onset must be >= 0 and magnitude finite")
        object.__setattr__(self, "direction", tuple(float(c) for c in self.direction))

    def active(self, t_rel: np.ndarray) -> np.ndarray:
        return (t_rel >= self.onset) & (t_rel < self.onset + self.duration)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "magnitude": self.magnitude, "onset": self.onset,
                "duration": None if math.isinf(self.duration) else self.duration,
                "direction": list(self.direction)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FaultSpec":
        dur = d.get("duration")
        return cls(d["kind"], float(d["magnitude"]), float(d.get("onset", 0.0)),
                   math.inf if dur is None else float(dur), tuple(d.get("direction", (1, 0, 0))))


@dataclass(frozen=True, eq=False)
class ExecutionTrace:
    """Observations of one primitive inside an executed plan.

    ``times`` are re-zeroed at the primitive start and ``states`` are in the
    primitive frame (the primitive's start node is the origin).
    """

    primitive_id: int
    triplet: tuple[int, int, int]
    times: np.ndarray  # (K,)
    states: np.ndarray  # (K, 6)
    t_start: float = 0.0
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    label: str = "normal"

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.states, dtype=float).reshape(len(t), 6)
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("trace times must be strictly increasing")
        if not np.all(np.isfinite(x)):
            raise ValueError("trace observations must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "triplet", tuple(int(i) for i in self.triplet))
        object.__setattr__(self, "offset", tuple(float(c) for c in self.offset))

    def covers(self, t_F: float, fraction: float = 0.9) -> bool:
        return len(self.times) >= 2 and (self.times[-1] - self.times[0]) >= fraction * t_F

    def records(self) -> list[dict]:
        return [
            {"t": self.t_start + float(tau), "tau": float(tau), "primitive_id": self.primitive_id,
             "triplet": list(self.triplet), "state": [float(v) for v in x]}
            for tau, x in zip(self.times, self.states)
        ]

    @classmethod
    def from_records(cls, records: Sequence[Mapping], label: str = "normal") -> "ExecutionTrace":
        if not records:
            raise ValueError("empty trace")
        r0 = records[0]
        tau = np.array([r["tau"] for r in records])
        return cls(int(r0["primitive_id"]), tuple(r0["triplet"]), tau,
                   np.array([r["state"] for r in records]), float(r0["t"]) - float(r0["tau"]),
                   label=label)


@dataclass(frozen=True, eq=False)
class Execution:
    traces: list[ExecutionTrace]
    log: np.ndarray  # (K, 7) rows of [t, px, py, pz, vx, vy, vz]
    reference: np.ndarray  # concatenated plan reference, (R, 10)
    obs_times: np.ndarray
    observations: np.ndarray


def _hermite_reference(ref: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Position, velocity and control of a sampled reference at arbitrary times.

    Cubic Hermite on (position, velocity) is exact for cubic segments and the
    control, linear in time, is interpolated linearly.
    """
    times = ref[:, 0]
    k = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
    t0 = times[k]
    h = times[k + 1] - t0
    s = np.clip((t - t0) / h, 0.0, 1.0)[:, None]
    p0, p1 = ref[k][:, POS], ref[k + 1][:, POS]
    v0, v1 = ref[k][:, VEL], ref[k + 1][:, VEL]
    hh = h[:, None]
    s2, s3 = s * s, s * s * s
    pos = (2 * s3 - 3 * s2 + 1) * p0 + (s3 - 2 * s2 + s) * hh * v0 + (-2 * s3 + 3 * s2) * p1 + (s3 - s2) * hh * v1
    vel = ((6 * s2 - 6 * s) * p0 + (3 * s2 - 4 * s + 1) * hh * v0 + (-6 * s2 + 6 * s) * p1 + (3 * s2 - 2 * s) * hh * v1) / hh
    u = ref[k][:, CTRL] * (1 - s) + ref[k + 1][:, CTRL] * s
    return pos, vel, u


def _plan_reference(plan: Plan, segs, primitives, t: np.ndarray):
    """Reference position, velocity and control of a plan, evaluated per segment."""
    pos = np.empty((len(t), 3))
    vel = np.empty((len(t), 3))
    u = np.empty((len(t), 3))
    if not segs:
        pos[:] = plan.x_I.position
        vel[:] = plan.x_I.velocity
        u[:] = 0.0
        return pos, vel, u
    starts = np.array([t0 for t0, _ in segs])
    seg_idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(segs) - 1)
    for n, (t0, off) in enumerate(segs):
        sel = seg_idx == n
        if not np.any(sel):
            continue
        ref = primitives[plan.primitive_ids[n]].reference
        ps, vs, us = _hermite_reference(ref, t[sel] - t0)
        pos[sel] = ps + off
        vel[sel] = vs
        u[sel] = us
    return pos, vel, u


def execute(plan: Plan, primitives, config: SimConfig, faults: Iterable[FaultSpec] = (),
            seed=None, triplet: tuple[int, int, int] | None = None, label: str = "normal") -> Execution:
    """Simulate the plan and slice the observations per primitive.

    ``seed`` defaults to ``config.seed``; it may also be a sequence of ints,
    which is hashed through ``numpy.random.SeedSequence``.
    """
    faults = list(faults)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed if seed is None else seed))
    ref = concatenate(plan, primitives)
    t_S = plan.t_S
    t_G = float(ref[-1, 0])
    n_steps = int(round((t_G - t_S) / config.dt_sim))
    sim_t = t_S + config.dt_sim * np.arange(n_steps + 1)
    segs = segment_offsets(plan, primitives)
    p_ref, v_ref, _ = _plan_reference(plan, segs, primitives, sim_t)
    # feedforward held over each step at its midpoint value (exact mean of a linear control)
    _, _, u_ff = _plan_reference(plan, segs, primitives, sim_t[:-1] + 0.5 * config.dt_sim)

    bias = config.resolved_bias()
    w = config.process_noise_std * rng.standard_normal((n_steps, 3))

    t_rel = sim_t[:-1] - t_S
    extra = np.zeros((n_steps, 3))
    noise_gain = np.ones(n_steps)
    gain = np.ones(n_steps)
    for f in faults:
        on = f.active(t_rel)
        d = np.asarray(f.direction)
        if f.kind == "extra_bias":
            extra[on] += f.magnitude * d
        elif f.kind == "gust":
            phase = np.clip((t_rel - f.onset) / (f.duration if math.isfinite(f.duration) else 1.0), 0, 1)
            extra[on] += (f.magnitude * np.sin(math.pi * phase[on]))[:, None] * d
        elif f.kind == "noise_scale":
            noise_gain[on] *= f.magnitude
        elif f.kind == "gain_loss":
            gain[on] *= max(0.0, 1.0 - f.magnitude)
    w = w * noise_gain[:, None]

    p = np.array(plan.x_I.position, dtype=float)
    v = np.array(plan.x_I.velocity, dtype=float)
    log = np.empty((n_steps + 1, 7))
    log[0] = (sim_t[0], *p, *v)
    dt = config.dt_sim
    kp, kd, drag, umax = config.kp, config.kd, config.drag, config.u_max
    limit = config.divergence_limit
    for k in range(n_steps):
        g = gain[k]
        u_cmd = u_ff[k] + g * kp * (p_ref[k] - p) + g * kd * (v_ref[k] - v)
        np.clip(u_cmd, -umax, umax, out=u_cmd)
        a = u_cmd + bias + extra[k] + w[k] - drag * v
        # exact update for acceleration held constant over the step
        p = p + v * dt + (0.5 * dt * dt) * a
        v = v + a * dt
        log[k + 1, 0] = sim_t[k + 1]
        log[k + 1, 1:4] = p
        log[k + 1, 4:7] = v
        if np.max(np.abs(p - p_ref[k + 1])) > limit:
            raise Diverged(f"tracking error exceeded {limit} m at t={sim_t[k + 1]:.3f}")

    # jittered observation times so traces are never aligned
    period = 1.0 / config.obs_rate
    n_obs = int(math.floor((t_G - t_S) / period + 1e-9)) + 1
    obs_t = t_S + period * np.arange(n_obs) + config.obs_jitter * period * rng.uniform(-1, 1, n_obs)
    obs_t = obs_t[(obs_t >= t_S) & (obs_t <= t_G)]
    obs_x = np.column_stack([np.interp(obs_t, log[:, 0], log[:, c]) for c in range(1, 7)])
    obs_x = obs_x + rng.standard_normal(obs_x.shape) * np.asarray(config.obs_noise_std)

    traces = []
    for n, (t0, off) in enumerate(segs):
        prim = primitives[plan.primitive_ids[n]]
        t1 = t0 + prim.t_F
        last = n == len(segs) - 1
        sel = (obs_t >= t0) & ((obs_t <= t1) if last else (obs_t < t1))
        states = obs_x[sel].copy()
        states[:, :3] -= off
        trip = triplet if triplet is not None else (-1, prim.id, -1)
        traces.append(ExecutionTrace(prim.id, trip, obs_t[sel] - t0, states, t0, tuple(off), label))
    return Execution(traces, log, ref, obs_t, obs_x)


def ramp_in(velocity, primitives: Sequence[MotionPrimitive]) -> int | None:
    """Rest-to-moving primitive that ends with ``velocity`` (None when already at rest)."""
    if not any(velocity):
        return None
    for prim in primitives:
        if not any(prim.x_I.velocity) and prim.x_F.velocity == tuple(velocity):
            return prim.id
    raise NotEnoughTriplets(f"no ramp primitive reaches velocity {velocity} from rest")


def ramp_out(velocity, primitives: Sequence[MotionPrimitive]) -> int | None:
    if not any(velocity):
        return None
    for prim in primitives:
        if prim.x_I.velocity == tuple(velocity) and not any(prim.x_F.velocity):
            return prim.id
    raise NotEnoughTriplets(f"no ramp primitive stops from velocity {velocity}")


def augment_triplet(triplet: tuple[int, int, int], primitives: Sequence[MotionPrimitive]) -> tuple[list[int], int]:
    """Plan ids that start and end at rest around the triplet, and the index of the middle primitive."""
    a_p, a_i, a_n = triplet
    pre = ramp_in(primitives[a_p].x_I.velocity, primitives)
    post = ramp_out(primitives[a_n].x_F.velocity, primitives)
    ids = ([pre] if pre is not None else []) + [a_p, a_i, a_n] + ([post] if post is not None else [])
    return ids, (1 if pre is not None else 0) + 1


def select_triplets(primitive_id: int, count: int, primitives: Sequence[MotionPrimitive], seed: int,
                    allow_repeats: bool = False) -> list[tuple[int, int, int]]:
    """Seeded shuffle of the valid triplets of one primitive.

    With ``allow_repeats`` a primitive with fewer valid triplets than
    ``count`` cycles through its shuffled triplets; each repeat is still a
    separate execution with its own noise.
    """
    trips = valid_triplets(primitive_id, primitives)
    if count > len(trips) and not allow_repeats:
        raise NotEnoughTriplets(
            f"primitive {primitive_id} has {len(trips)} valid triplets, {count} requested"
        )
    if count == 0:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([seed, primitive_id, 7919]))
    order = rng.permutation(len(trips))
    return [trips[order[j % len(trips)]] for j in range(count)]


def execution_seed(master_seed: int, primitive_id: int, index: int, salt: int = 0) -> list[int]:
    return [int(master_seed), int(primitive_id), int(index), int(salt)]


def run_triplet(triplet, primitives, config: SimConfig, seed, faults: Iterable[FaultSpec] = (),
                label: str = "normal", fault_relative_to_middle: bool = False) -> ExecutionTrace:
    """Execute one augmented triplet from rest and return the middle primitive's trace.

    With ``fault_relative_to_middle`` fault onsets are measured from the
    start of the middle primitive instead of the plan start.
    """
    ids, mid = augment_triplet(tuple(triplet), primitives)
    plan = Plan(0.0, State((0.0, 0.0, 0.0)), tuple(ids))
    faults = list(faults)
    if fault_relative_to_middle and faults:
        t_mid = sum(primitives[i].t_F for i in ids[:mid])
        faults = [replace(f, onset=f.onset + t_mid) for f in faults]
    ex = execute(plan, primitives, config, faults, seed=seed, triplet=tuple(triplet), label=label)
    return ex.traces[mid]


def collect_triplets(primitive_ids: Sequence[int], triplets_per_primitive: int, config: SimConfig,
                     primitives: Sequence[MotionPrimitive], allow_repeats: bool = False,
                     jobs: int = 1) -> dict[int, list[ExecutionTrace]]:
    """Execute ``triplets_per_primitive`` triplets for each primitive, in selection order."""
    work = []
    for pid in primitive_ids:
        for j, trip in enumerate(select_triplets(pid, triplets_per_primitive, primitives,
                                                 config.seed, allow_repeats)):
            work.append((pid, j, trip))
    seeds = [execution_seed(config.seed, pid, j) for pid, j, _ in work]
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            traces = list(pool.map(run_triplet, [w[2] for w in work], [primitives] * len(work),
                                   [config] * len(work), seeds, chunksize=8))
    else:
        traces = [run_triplet(trip, primitives, config, s) for (_, _, trip), s in zip(work, seeds)]
    out: dict[int, list[ExecutionTrace]] = {pid: [] for pid in primitive_ids}
    for (pid, _, _), tr in zip(work, traces):
        out[pid].append(tr)
    return out
