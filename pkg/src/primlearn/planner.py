"""A* search over the state lattice with time-indexed sphere obstacles."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .lattice import (
    POS, STATE, LatticeConfig, LatticeError, MotionPrimitive, Plan, State,
    index_by_start_velocity,
)
from .margins import MarginProvider, ZERO_MARGIN


class NoPlan(Exception):
    """The reachable part of the time-expanded lattice holds no collision-free path to the goal."""


class InvalidStart(LatticeError):
    pass


class InvalidGoal(LatticeError):
    pass


@dataclass(frozen=True)
class SphereObstacle:
    radius: float
    keyframes: np.ndarray  # (K, 4) rows of [t, x, y, z]

    def __post_init__(self):
        kf = np.atleast_2d(np.asarray(self.keyframes, dtype=float))
        if kf.ndim != 2 or kf.shape[1] != 4 or len(kf) == 0:
            raise ValueError("keyframes must be a non-empty (K, 4) array")
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")
        if np.any(np.diff(kf[:, 0]) <= 0):
            raise ValueError("keyframe times must be strictly increasing")
        object.__setattr__(self, "keyframes", kf)

    def center_at(self, t) -> np.ndarray:
        """Piecewise-linear center, clamped to the first/last keyframe outside their span."""
        t = np.asarray(t, dtype=float)
        kf = self.keyframes
        return np.stack([np.interp(t, kf[:, 0], kf[:, k]) for k in (1, 2, 3)], axis=-1)

    @property
    def max_speed(self) -> float:
        kf = self.keyframes
        if len(kf) < 2:
            return 0.0
        seg = np.linalg.norm(np.diff(kf[:, 1:], axis=0), axis=1) / np.diff(kf[:, 0])
        return float(seg.max())


@dataclass(frozen=True)
class OccupancyWorld:
    bounds_min: tuple[float, float, float]
    bounds_max: tuple[float, float, float]
    obstacles: tuple[SphereObstacle, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "bounds_min", tuple(float(x) for x in self.bounds_min))
        object.__setattr__(self, "bounds_max", tuple(float(x) for x in self.bounds_max))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    def contains(self, positions) -> np.ndarray:
        p = np.asarray(positions, dtype=float)
        return np.all((p >= np.asarray(self.bounds_min)) & (p <= np.asarray(self.bounds_max)), axis=-1)

    def centers_at(self, t) -> np.ndarray:
        """Obstacle centers, shape ``t.shape + (M, 3)``."""
        t = np.asarray(t, dtype=float)
        if not self.obstacles:
            return np.zeros(t.shape + (0, 3))
        return np.stack([ob.center_at(t) for ob in self.obstacles], axis=-2)

    @property
    def radii(self) -> np.ndarray:
        return np.array([ob.radius for ob in self.obstacles])

    @property
    def static_after(self) -> float:
        """Time after which every obstacle is stationary (-inf for a static world)."""
        t = -math.inf
        for ob in self.obstacles:
            kf = ob.keyframes
            moving = np.any(np.diff(kf[:, 1:], axis=0) != 0, axis=1)
            if np.any(moving):
                t = max(t, float(kf[1:][moving, 0].max()))
        return t

    @property
    def max_obstacle_speed(self) -> float:
        return max((ob.max_speed for ob in self.obstacles), default=0.0)

    def to_dict(self) -> dict:
        return {
            "bounds": {"min": list(self.bounds_min), "max": list(self.bounds_max)},
            "obstacles": [
                {"radius": ob.radius, "keyframes": ob.keyframes.tolist()} for ob in self.obstacles
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "OccupancyWorld":
        return cls(
            bounds_min=tuple(d["bounds"]["min"]),
            bounds_max=tuple(d["bounds"]["max"]),
            obstacles=tuple(
                SphereObstacle(float(o["radius"]), np.asarray(o["keyframes"], dtype=float))
                for o in d.get("obstacles", [])
            ),
        )


def point_ellipsoid_distance(y, semi_axes, iters: int = 100) -> np.ndarray:
    """Euclidean distance from points ``y`` (relative to the center) to a solid
    axis-aligned ellipsoid. Zero semi-axes (flat or point ellipsoids) are allowed.

    The closest boundary point is x_d = e_d^2 y_d / (s + e_d^2) where s >= 0
    solves sum_d (e_d y_d / (s + e_d^2))^2 = 1; s is found by bisection.
    """
    y = np.abs(np.asarray(y, dtype=float))
    e = np.broadcast_to(np.asarray(semi_axes, dtype=float), y.shape)
    e2 = e * e
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(e2 > 0, y * y / np.where(e2 > 0, e2, 1.0), np.where(y > 0, np.inf, 0.0))
    inside = q.sum(axis=-1) <= 1.0

    ey = e * y
    f0 = np.sum(np.where(e2 > 0, (ey / np.where(e2 > 0, e2, 1.0)) ** 2, 0.0), axis=-1)
    lo = np.zeros(y.shape[:-1])
    hi = np.linalg.norm(ey, axis=-1)
    need = (~inside) & (f0 > 1.0)
    if np.any(need):
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            den = mid[..., None] + e2
            f = np.sum((ey / np.where(den > 0, den, 1.0)) ** 2, axis=-1)
            go_up = f > 1.0
            lo = np.where(need & go_up, mid, lo)
            hi = np.where(need & ~go_up, mid, hi)
    s = np.where(need, hi, 0.0)
    den = s[..., None] + e2
    x = np.where(den > 0, e2 * y / np.where(den > 0, den, 1.0), 0.0)
    d = np.linalg.norm(y - x, axis=-1)
    return np.where(inside, 0.0, d)


def _hits(positions, semi_axes, centers, radii) -> np.ndarray:
    """Boolean ``(N, M)``: ellipsoid n intersects sphere m (closed sets, conservative)."""
    rel = centers - positions[:, None, :]
    dist = np.linalg.norm(rel, axis=-1)
    emax = semi_axes.max(axis=-1)[:, None]
    emin = semi_axes.min(axis=-1)[:, None]
    r = radii[None, :]
    sure_free = dist > emax + r + 1e-9
    sure_hit = dist <= emin + r
    out = sure_hit.copy()
    todo = ~(sure_free | sure_hit)
    if np.any(todo):
        n_idx, m_idx = np.nonzero(todo)
        d = point_ellipsoid_distance(rel[n_idx, m_idx], semi_axes[n_idx])
        out[n_idx, m_idx] = d <= radii[m_idx] * (1.0 + 1e-12) + 1e-9
    return out


def collision_free(t: float, state, world: OccupancyWorld, margin_center, margin_semi_axes,
                   robot_radius: float = 0.0, extra_margin=(0.0, 0.0, 0.0)) -> bool:
    """Whether the inflated robot region at time ``t`` misses every obstacle.

    The region is the axis-aligned ellipsoid centered at the robot position
    plus the margin's center offset, with semi-axes margin + robot radius +
    extra margin along each axis.
    """
    if not world.obstacles:
        return True
    pos = np.asarray(state.position if isinstance(state, State) else state[:3], dtype=float)
    center = pos + np.asarray(margin_center, dtype=float)
    semi = np.asarray(margin_semi_axes, dtype=float) + robot_radius + np.asarray(extra_margin, dtype=float)
    centers = world.centers_at(np.asarray([t]))
    return not bool(_hits(center[None, :], semi[None, :], centers, world.radii).any())


def trajectory_collision_free(times, positions, world: OccupancyWorld, margin_center, margin_semi_axes,
                              robot_radius: float = 0.0, extra_margin=(0.0, 0.0, 0.0)) -> bool:
    if not world.obstacles:
        return True
    centers = np.asarray(positions, dtype=float) + margin_center
    semi = np.asarray(margin_semi_axes, dtype=float) + robot_radius + np.asarray(extra_margin, dtype=float)
    semi = np.broadcast_to(semi, centers.shape)
    obs = world.centers_at(np.asarray(times, dtype=float))
    return not bool(_hits(centers, semi, obs, world.radii).any())


@dataclass(frozen=True)
class PlanningProblem:
    x_S: State
    x_G: State
    world: OccupancyWorld
    t_S: float = 0.0
    margin: MarginProvider = ZERO_MARGIN
    robot_radius: float = 0.0
    extra_margin: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PlanResult:
    plan: Plan
    cost: float
    t_G: float
    expanded: int = 0

    def to_dict(self) -> dict:
        return {
            "t_S": self.plan.t_S,
            "x_I": list(self.plan.x_I.position + self.plan.x_I.velocity),
            "primitive_ids": list(self.plan.primitive_ids),
            "cost": self.cost,
            "t_G": self.t_G,
        }


class LatticePlanner:
    """Holds the precomputed search tables for one primitive set.

    ``plan`` is reentrant; the planner itself is never mutated after
    construction.
    """

    def __init__(self, primitives: Sequence[MotionPrimitive], config: LatticeConfig):
        self.primitives = list(primitives)
        self.config = config
        res = config.position_resolution
        self._succ = index_by_start_velocity(self.primitives)
        self._grid_step = {
            p.id: tuple(int(round(c / res)) for c in p.x_F.position) for p in self.primitives
        }
        self._offsets = {p.id: np.asarray(p.x_F.position) for p in self.primitives}
        if self.primitives:
            self.min_cost_rate = min(p.cost / p.t_F for p in self.primitives)
            max_speed = max(np.linalg.norm(p.displacement) / p.t_F for p in self.primitives)
        else:
            self.min_cost_rate, max_speed = 0.0, 1.0
        # never slower than the true top average speed, so the bound stays admissible
        self.heuristic_speed = max(config.nominal_speed, max_speed)

    def heuristic(self, state, goal) -> float:
        pos = np.asarray(state.position if isinstance(state, State) else state, dtype=float)
        gpos = np.asarray(goal.position if isinstance(goal, State) else goal, dtype=float)
        return float(np.linalg.norm(gpos - pos)) / self.heuristic_speed * self.min_cost_rate

    def _check_node(self, x: State, world: OccupancyWorld, exc) -> tuple[int, int, int]:
        res = self.config.position_resolution
        g = np.asarray(x.position) / res
        if not np.allclose(g, np.round(g), atol=1e-9):
            raise exc(f"{x} is off the lattice")
        allowed = {tuple(v) for v in self.config.directions()} | {(0.0, 0.0, 0.0)}
        if x.velocity not in allowed:
            raise exc(f"{x} has a velocity that is not on the lattice")
        if not world.contains(np.asarray(x.position)):
            raise exc(f"{x} is outside the world bounds")
        return tuple(int(round(c)) for c in g)

    def segment_free(self, prim: MotionPrimitive, t0: float, offset: np.ndarray,
                     problem: PlanningProblem) -> bool:
        ref = prim.reference
        pos = ref[:, POS] + offset
        if not np.all(problem.world.contains(pos)):
            return False
        world = problem.world
        if not world.obstacles:
            return True
        tau = ref[:, 0]
        center_off, semi = problem.margin.ellipsoid(prim.id, tau)
        # cover motion between samples: half a step of relative travel
        slack = 0.5 * prim.dt_ref * (self.config.v_max + world.max_obstacle_speed)
        return trajectory_collision_free(
            t0 + tau, pos, world, center_off, semi + slack,
            problem.robot_radius, problem.extra_margin,
        )

    def plan(self, problem: PlanningProblem, max_expansions: int | None = None) -> PlanResult:
        world = problem.world
        start = self._check_node(problem.x_S, world, InvalidStart)
        goal = self._check_node(problem.x_G, world, InvalidGoal)
        t_S = float(problem.t_S)
        base = Plan(t_S, problem.x_S, ())
        if start == goal and problem.x_S.velocity == problem.x_G.velocity:
            return PlanResult(base, 0.0, t_S)

        res = self.config.position_resolution
        dt = self.config.dt_ref
        static_after = world.static_after
        goal_pos = np.asarray(goal, dtype=float) * res
        goal_vel = problem.x_G.velocity

        def key(cell, vel, t):
            if t >= static_after:
                return (cell, vel, None)
            return (cell, vel, int(round((t - t_S) / dt)))

        def h(cell):
            return float(np.linalg.norm(goal_pos - np.asarray(cell, dtype=float) * res)) \
                / self.heuristic_speed * self.min_cost_rate

        counter = itertools.count()
        start_key = key(start, problem.x_S.velocity, t_S)
        # entry: (f, h, seq, g, key, cell, vel, t)
        heap = [(h(start), h(start), next(counter), 0.0, start_key, start, problem.x_S.velocity, t_S)]
        best_g = {start_key: 0.0}
        parent: dict = {start_key: None}
        closed = set()
        expanded = 0
        while heap:
            f, _, _, g, k, cell, vel, t = heapq.heappop(heap)
            if k in closed:
                continue
            closed.add(k)
            if cell == goal and vel == goal_vel:
                ids = []
                cur = k
                while parent[cur] is not None:
                    cur, pid = parent[cur]
                    ids.append(pid)
                ids.reverse()
                plan = Plan(t_S, problem.x_S, tuple(ids))
                return PlanResult(plan, g, plan.end_time(self.primitives), expanded)
            expanded += 1
            if max_expansions is not None and expanded > max_expansions:
                break
            offset = np.asarray(cell, dtype=float) * res
            for pid in self._succ.get(vel, ()):
                prim = self.primitives[pid]
                step = self._grid_step[pid]
                ncell = (cell[0] + step[0], cell[1] + step[1], cell[2] + step[2])
                nt = t + prim.t_F
                nvel = prim.x_F.velocity
                nk = key(ncell, nvel, nt)
                if nk in closed:
                    continue
                ng = g + prim.cost
                if ng >= best_g.get(nk, math.inf):
                    continue
                if not self.segment_free(prim, t, offset, problem):
                    continue
                best_g[nk] = ng
                parent[nk] = (k, pid)
                hn = h(ncell)
                heapq.heappush(heap, (ng + hn, hn, next(counter), ng, nk, ncell, nvel, nt))
        raise NoPlan("search exhausted without reaching the goal")


def plan(problem: PlanningProblem, primitives: Sequence[MotionPrimitive], config: LatticeConfig) -> PlanResult:
    return LatticePlanner(primitives, config).plan(problem)
