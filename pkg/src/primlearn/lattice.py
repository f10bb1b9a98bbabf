"""State lattice, motion primitives and plan concatenation.

The robot is a 3D double integrator: state = (position, velocity), control =
acceleration.  Primitives are per-axis cubic boundary-value trajectories of
fixed duration that start at the origin and end on the lattice.

Reference trajectories are stored as ``(K, 10)`` arrays with columns
``[t, px, py, pz, vx, vy, vz, ux, uy, uz]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

T_COL = 0
POS = slice(1, 4)
VEL = slice(4, 7)
CTRL = slice(7, 10)
STATE = slice(1, 7)

FAMILIES = ("rest_rest", "rest_moving", "moving_rest", "moving_moving")


class LatticeError(ValueError):
    pass


class InfeasiblePrimitive(LatticeError):
    """A sampled reference state or control violates the configured bounds."""


class DegeneratePrimitive(LatticeError):
    """Zero-length primitive (start and end states coincide)."""


class IncompatiblePlan(LatticeError):
    """Consecutive primitives do not share the junction velocity."""


@dataclass(frozen=True)
class State:
    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        object.__setattr__(self, "velocity", tuple(float(x) for x in self.velocity))
        if len(self.position) != 3 or len(self.velocity) != 3:
            raise ValueError("position and velocity must be 3-vectors")
        if not all(math.isfinite(x) for x in self.position + self.velocity):
            raise ValueError("state components must be finite")

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "State":
        return cls(tuple(x[:3]), tuple(x[3:6]))

    def as_array(self) -> np.ndarray:
        return np.array(self.position + self.velocity)

    def within(self, p_max: float, v_max: float) -> bool:
        return (all(abs(p) <= p_max for p in self.position)
                and all(abs(v) <= v_max for v in self.velocity))


@dataclass(frozen=True)
class LatticeConfig:
    position_resolution: float = 1.0
    nominal_speed: float = 1.0
    v_max: float = 2.0
    u_max: float = 5.0
    primitive_duration: float = 2.0
    dt_ref: float = 0.02
    time_weight: float = 1.0
    # None means the full set {0} U {p/|p|: p in {-1,0,1}^3 \ 0}
    velocity_directions: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self):
        if self.position_resolution <= 0:
            raise ValueError("position_resolution must be positive")
        if self.primitive_duration <= 0 or self.dt_ref <= 0:
            raise ValueError("durations must be positive")
        steps = self.primitive_duration / self.dt_ref
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("primitive_duration must be a multiple of dt_ref")
        if self.velocity_directions is not None:
            object.__setattr__(
                self, "velocity_directions",
                tuple(tuple(float(c) for c in v) for v in self.velocity_directions),
            )

    def directions(self) -> tuple[tuple[float, float, float], ...]:
        if self.velocity_directions is not None:
            return self.velocity_directions
        return default_velocity_directions(self.nominal_speed)

    def to_dict(self) -> dict:
        d = {
            "position_resolution": self.position_resolution,
            "nominal_speed": self.nominal_speed,
            "v_max": self.v_max,
            "u_max": self.u_max,
            "primitive_duration": self.primitive_duration,
            "dt_ref": self.dt_ref,
            "time_weight": self.time_weight,
            "velocity_directions": None if self.velocity_directions is None
            else [list(v) for v in self.velocity_directions],
        }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatticeConfig":
        d = dict(d)
        vd = d.pop("velocity_directions", None)
        if vd is not None:
            d["velocity_directions"] = tuple(tuple(v) for v in vd)
        return cls(**d)


def _unit_velocity(p: tuple[int, int, int], speed: float) -> tuple[float, float, float]:
    norm = math.sqrt(sum(c * c for c in p))
    return tuple(speed * c / norm for c in p)


def lattice_offsets() -> list[tuple[int, int, int]]:
    return [p for p in itertools.product((-1, 0, 1), repeat=3) if p != (0, 0, 0)]


def default_velocity_directions(speed: float = 1.0) -> tuple[tuple[float, float, float], ...]:
    return ((0.0, 0.0, 0.0),) + tuple(_unit_velocity(p, speed) for p in lattice_offsets())


def boundary_set(config: LatticeConfig) -> list[tuple[tuple[int, int, int], tuple[float, float, float]]]:
    """Pairs (lattice offset p, velocity along p) whose velocity is allowed by the config."""
    allowed = {tuple(v) for v in config.directions()}
    out = []
    for p in lattice_offsets():
        v = _unit_velocity(p, config.nominal_speed)
        if v in allowed:
            out.append((p, v))
    return out


@dataclass(frozen=True, eq=False)
class MotionPrimitive:
    id: int
    x_I: State
    x_F: State
    t_F: float
    dt_ref: float
    reference: np.ndarray = field(repr=False)
    cost: float
    family: str = ""

    @property
    def displacement(self) -> np.ndarray:
        return np.asarray(self.x_F.position)

    def state_at(self, tau) -> np.ndarray:
        """Reference state(s) at time(s) ``tau``, linearly interpolated and clamped."""
        tau = np.asarray(tau, dtype=float)
        ref = self.reference
        idx = np.clip(tau / self.dt_ref, 0.0, len(ref) - 1.0)
        lo = np.minimum(np.floor(idx).astype(int), len(ref) - 2)
        w = (idx - lo)[..., None]
        return ref[lo, STATE] * (1.0 - w) + ref[lo + 1, STATE] * w


def cubic_coefficients(p0, v0, p1, v1, T):
    """Per-axis coefficients c0..c3 of the cubic matching position and velocity at 0 and T."""
    p0, v0, p1, v1 = (np.asarray(a, dtype=float) for a in (p0, v0, p1, v1))
    dp = p1 - p0
    c2 = (3.0 * dp - (2.0 * v0 + v1) * T) / T ** 2
    c3 = (-2.0 * dp + (v0 + v1) * T) / T ** 3
    return np.stack([p0, v0, c2, c3])


def sample_cubic(coeffs: np.ndarray, times: np.ndarray) -> np.ndarray:
    c0, c1, c2, c3 = coeffs
    t = times[:, None]
    pos = c0 + c1 * t + c2 * t ** 2 + c3 * t ** 3
    vel = c1 + 2.0 * c2 * t + 3.0 * c3 * t ** 2
    acc = 2.0 * c2 + 6.0 * c3 * t
    return np.hstack([times[:, None], pos, vel, acc])


def trajectory_cost(reference: np.ndarray, time_weight: float) -> float:
    """Trapezoidal integral of |u|^2 + time_weight over the reference samples."""
    u = reference[:, CTRL]
    integrand = np.sum(u * u, axis=1) + time_weight
    return float(np.trapezoid(integrand, reference[:, T_COL]))


def generate_primitive(x_I: State, x_F: State, config: LatticeConfig,
                       primitive_id: int = -1, family: str = "") -> MotionPrimitive:
    if any(x_I.position):
        raise LatticeError("primitives start at the origin")
    res = config.position_resolution
    grid = np.asarray(x_F.position) / res
    if not np.allclose(grid, np.round(grid), atol=1e-9):
        raise LatticeError("x_F is not on the lattice")
    allowed = {tuple(v) for v in config.directions()} | {(0.0, 0.0, 0.0)}
    for v in (x_I.velocity, x_F.velocity):
        if tuple(v) not in allowed:
            raise LatticeError(f"boundary velocity {v} not in velocity_directions")
    if x_I == x_F:
        raise DegeneratePrimitive("start and end states coincide")

    T = config.primitive_duration
    n = int(round(T / config.dt_ref))
    times = np.linspace(0.0, T, n + 1)
    coeffs = cubic_coefficients(x_I.position, x_I.velocity, x_F.position, x_F.velocity, T)
    ref = sample_cubic(coeffs, times)
    # pin the end points exactly
    ref[0, STATE] = x_I.as_array()
    ref[-1, STATE] = x_F.as_array()

    tol = 1e-12
    if np.any(np.abs(ref[:, CTRL]) > config.u_max + tol):
        raise InfeasiblePrimitive(f"control bound exceeded for {x_I} -> {x_F}")
    if np.any(np.abs(ref[:, VEL]) > config.v_max + tol):
        raise InfeasiblePrimitive(f"velocity bound exceeded for {x_I} -> {x_F}")
    ref.setflags(write=False)
    return MotionPrimitive(
        id=primitive_id, x_I=x_I, x_F=x_F, t_F=T, dt_ref=config.dt_ref,
        reference=ref, cost=trajectory_cost(ref, config.time_weight), family=family,
    )


def enumerate_boundary_pairs(config: LatticeConfig) -> list[tuple[str, tuple, State, State]]:
    """(family, lattice offset, x_I, x_F) for every primitive of the four families, in id order."""
    zero = (0.0, 0.0, 0.0)
    res = config.position_resolution
    pairs = boundary_set(config)
    out = []
    for family in FAMILIES:
        start_moving = family.startswith("moving")
        end_moving = family.endswith("_moving")
        for p, v in sorted(pairs):
            pos = tuple(res * c for c in p)
            x_I = State(zero, v if start_moving else zero)
            x_F = State(pos, v if end_moving else zero)
            out.append((family, p, x_I, x_F))
    return out


def generate_primitive_set(config: LatticeConfig) -> list[MotionPrimitive]:
    return [
        generate_primitive(x_I, x_F, config, primitive_id=i, family=family)
        for i, (family, _, x_I, x_F) in enumerate(enumerate_boundary_pairs(config))
    ]


@dataclass(frozen=True)
class Plan:
    t_S: float
    x_I: State
    primitive_ids: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "primitive_ids", tuple(int(i) for i in self.primitive_ids))

    def end_time(self, primitives: Mapping[int, MotionPrimitive] | Sequence[MotionPrimitive]) -> float:
        return self.t_S + sum(primitives[i].t_F for i in self.primitive_ids)

    def cost(self, primitives) -> float:
        return float(sum(primitives[i].cost for i in self.primitive_ids))


def segment_offsets(plan: Plan, primitives) -> list[tuple[float, np.ndarray]]:
    """Start time and world position offset of every primitive in the plan."""
    t = plan.t_S
    offset = np.asarray(plan.x_I.position, dtype=float)
    vel = plan.x_I.velocity
    out = []
    for n, pid in enumerate(plan.primitive_ids):
        prim = primitives[pid]
        if prim.x_I.velocity != vel:
            raise IncompatiblePlan(
                f"primitive {pid} at position {n} starts with velocity {prim.x_I.velocity}, "
                f"expected {vel}"
            )
        out.append((t, offset.copy()))
        t += prim.t_F
        offset = offset + prim.displacement
        vel = prim.x_F.velocity
    return out


def concatenate(plan: Plan, primitives) -> np.ndarray:
    """World-frame reference trajectory of a plan, one row per sample.

    Junction samples are shared: the first sample of each segment after the
    first is dropped, so the row at a junction carries the preceding
    primitive's end state and control.
    """
    offsets = segment_offsets(plan, primitives)
    if not offsets:
        row = np.zeros((1, 10))
        row[0, T_COL] = plan.t_S
        row[0, STATE] = plan.x_I.as_array()
        return row
    parts = []
    for n, (t0, off) in enumerate(offsets):
        seg = primitives[plan.primitive_ids[n]].reference.copy()
        seg[:, T_COL] += t0
        seg[:, POS] += off
        parts.append(seg if n == 0 else seg[1:])
    return np.vstack(parts)


def velocity_key(v: Iterable[float]) -> tuple[float, float, float]:
    return tuple(float(c) for c in v)


def index_by_start_velocity(primitives: Sequence[MotionPrimitive]) -> dict[tuple, list[int]]:
    out: dict[tuple, list[int]] = {}
    for prim in primitives:
        out.setdefault(prim.x_I.velocity, []).append(prim.id)
    return out


def index_by_end_velocity(primitives: Sequence[MotionPrimitive]) -> dict[tuple, list[int]]:
    out: dict[tuple, list[int]] = {}
    for prim in primitives:
        out.setdefault(prim.x_F.velocity, []).append(prim.id)
    return out


def valid_triplets(a_i: int, primitives: Sequence[MotionPrimitive]) -> list[tuple[int, int, int]]:
    """All (a_p, a_i, a_n) such that the three primitives form a velocity-continuous plan."""
    prim = primitives[a_i]
    preds = index_by_end_velocity(primitives).get(prim.x_I.velocity, [])
    succs = index_by_start_velocity(primitives).get(prim.x_F.velocity, [])
    return [(p, a_i, n) for p in preds for n in succs]


def primitives_to_dict(primitives: Sequence[MotionPrimitive], config: LatticeConfig) -> dict:
    return {
        "config": config.to_dict(),
        "primitives": [
            {
                "id": p.id,
                "family": p.family,
                "x_I": list(p.x_I.position + p.x_I.velocity),
                "x_F": list(p.x_F.position + p.x_F.velocity),
                "t_F": p.t_F,
                "dt_ref": p.dt_ref,
                "reference": p.reference.tolist(),
                "cost": p.cost,
            }
            for p in primitives
        ],
    }


def primitives_from_dict(doc: Mapping) -> tuple[list[MotionPrimitive], LatticeConfig]:
    config = LatticeConfig.from_dict(doc["config"])
    prims = []
    for rec in doc["primitives"]:
        ref = np.asarray(rec["reference"], dtype=float)
        ref.setflags(write=False)
        prims.append(MotionPrimitive(
            id=int(rec["id"]),
            x_I=State.from_array(rec["x_I"]),
            x_F=State.from_array(rec["x_F"]),
            t_F=float(rec["t_F"]),
            dt_ref=float(rec["dt_ref"]),
            reference=ref,
            cost=float(rec["cost"]),
            family=rec.get("family", ""),
        ))
    prims.sort(key=lambda p: p.id)
    if [p.id for p in prims] != list(range(len(prims))):
        raise LatticeError("primitive ids must be contiguous from 0")
    return prims, config
