import heapq
import itertools
import math

import numpy as np
import pytest

from primlearn.lattice import LatticeConfig, State, concatenate
from primlearn.margins import MarginProvider, MarginTable, constant_margin
from primlearn.planner import (
    InvalidGoal, InvalidStart, LatticePlanner, NoPlan, OccupancyWorld, PlanningProblem, SphereObstacle,
    collision_free, plan, point_ellipsoid_distance,
)

ZERO = (0.0, 0.0, 0.0)


@pytest.fixture(scope="module")
def planner(prims, config):
    return LatticePlanner(prims, config)


def at(x, y, z=0.0, v=ZERO):
    return State((float(x), float(y), float(z)), v)


def flat_world(obstacles=()):
    return OccupancyWorld((0, 0, 0), (4, 4, 0), tuple(obstacles))


def dijkstra(planner, problem, horizon=40.0):
    """Uniform-cost search over (cell, velocity, arrival time) with the planner's edge test."""
    res = planner.config.position_resolution
    start = (tuple(int(round(c / res)) for c in problem.x_S.position), problem.x_S.velocity, 0)
    goal = (tuple(int(round(c / res)) for c in problem.x_G.position), problem.x_G.velocity)
    dist = {start: 0.0}
    heap = [(0.0, 0, start)]
    seq = itertools.count(1)
    while heap:
        d, _, node = heapq.heappop(heap)
        if d > dist[node]:
            continue
        cell, vel, k = node
        if (cell, vel) == goal:
            return d
        t = problem.t_S + k * planner.config.dt_ref
        if t > horizon:
            continue
        off = np.asarray(cell, float) * res
        for prim in planner.primitives:
            if prim.x_I.velocity != vel:
                continue
            if not planner.segment_free(prim, t, off, problem):
                continue
            step = tuple(int(round(c / res)) for c in prim.x_F.position)
            nxt = (tuple(a + b for a, b in zip(cell, step)), prim.x_F.velocity,
                   k + int(round(prim.t_F / planner.config.dt_ref)))
            nd = d + prim.cost
            if nd < dist.get(nxt, math.inf):
                dist[nxt] = nd
                heapq.heappush(heap, (nd, next(seq), nxt))
    return None


def random_instance(rng, dynamic):
    obstacles = []
    for _ in range(int(rng.integers(1, 4))):
        c0 = np.append(rng.uniform(0.5, 3.5, 2), 0.0)
        r = float(rng.uniform(0.3, 0.7))
        if dynamic and rng.random() < 0.6:
            c1 = np.append(rng.uniform(0.5, 3.5, 2), 0.0)
            kf = np.array([[0.0, *c0], [float(rng.uniform(2, 8)), *c1]])
        else:
            kf = np.array([[0.0, *c0]])
        obstacles.append(SphereObstacle(r, kf))
    world = flat_world(obstacles)
    cells = [(x, y) for x in range(5) for y in range(5)]
    while True:
        s, g = rng.choice(len(cells), 2, replace=False)
        xs, xg = at(*cells[s]), at(*cells[g])
        if collision_free(0.0, xs, world, ZERO, ZERO):
            return PlanningProblem(xs, xg, world)


def test_goal_at_start(planner):
    r = planner.plan(PlanningProblem(at(1, 1), at(1, 1), flat_world()))
    assert r.plan.primitive_ids == () and r.cost == 0.0


def test_one_step_plus_x(planner, prims):
    r = planner.plan(PlanningProblem(at(0, 0), at(1, 0), flat_world()))
    assert len(r.plan.primitive_ids) == 1
    p = prims[r.plan.primitive_ids[0]]
    assert p.family == "rest_rest" and p.x_F.position == (1.0, 0.0, 0.0)
    assert r.t_G == pytest.approx(p.t_F)


def test_invalid_endpoints(planner):
    with pytest.raises(InvalidStart):
        planner.plan(PlanningProblem(at(0.5, 0), at(1, 0), flat_world()))
    with pytest.raises(InvalidGoal):
        planner.plan(PlanningProblem(at(0, 0), at(9, 0), flat_world()))


def test_heuristic_formula(planner):
    assert planner.heuristic(at(1, 2), at(1, 2)) == 0.0
    h = planner.heuristic(at(0, 0), at(3, 0))
    assert h == pytest.approx(3 * planner.min_cost_rate / planner.config.nominal_speed)


def test_wall_gap_matches_dijkstra(planner):
    # wall along x = 2 with a gap at y = 4
    wall = [SphereObstacle(0.45, np.array([[0.0, 2.0, y, 0.0]])) for y in range(4)]
    problem = PlanningProblem(at(0, 0), at(4, 0), flat_world(wall))
    r = planner.plan(problem)
    assert r.cost == dijkstra(planner, problem)
    traj = concatenate(r.plan, planner.primitives)
    assert traj[:, 2].max() > 3.0  # went through the gap


@pytest.mark.parametrize("seed", range(25))
def test_optimal_against_dijkstra(planner, seed):
    rng = np.random.default_rng(seed)
    problem = random_instance(rng, dynamic=seed % 2 == 1)
    oracle = dijkstra(planner, problem)
    if oracle is None:
        with pytest.raises(NoPlan):
            planner.plan(problem)
        return
    r = planner.plan(problem)
    assert r.cost == oracle
    assert planner.heuristic(problem.x_S, problem.x_G) <= oracle


def test_heuristic_admissible_on_50_instances(planner):
    rng = np.random.default_rng(100)
    checked = 0
    while checked < 50:
        problem = random_instance(rng, dynamic=False)
        oracle = dijkstra(planner, problem)
        if oracle is None:
            continue
        assert planner.heuristic(problem.x_S, problem.x_G) <= oracle + 1e-12
        checked += 1


def test_deterministic(planner):
    rng = np.random.default_rng(3)
    problem = random_instance(rng, dynamic=True)
    a, b = planner.plan(problem), planner.plan(problem)
    assert a.plan == b.plan and a.cost == b.cost


def test_point_ellipsoid_distance_sphere_case(rng):
    y = rng.normal(size=(200, 3)) * 3
    r = 1.3
    d = point_ellipsoid_distance(y, np.full(3, r))
    np.testing.assert_allclose(d, np.maximum(np.linalg.norm(y, axis=1) - r, 0.0), atol=1e-12)


def test_boundary_contact_counts_as_collision():
    world = flat_world([SphereObstacle(0.5, np.array([[0.0, 2.0, 2.0, 0.0]]))])
    assert not collision_free(0.0, at(2.5, 2.0), world, ZERO, ZERO)
    assert collision_free(0.0, at(2.5 + 1e-6, 2.0), world, ZERO, ZERO)
    assert collision_free(0.0, at(0, 0), flat_world(), ZERO, (5, 5, 5))


def _surface(semi, n=60):
    u, v = np.meshgrid(np.linspace(0, 2 * np.pi, n), np.linspace(0, np.pi, n // 2))
    pts = np.stack([np.cos(u) * np.sin(v), np.sin(u) * np.sin(v), np.cos(v)], axis=-1).reshape(-1, 3)
    return pts * semi


def test_collision_conservative_against_surface_sampling():
    rng = np.random.default_rng(0)
    disagreements = 0
    for _ in range(1000):
        semi = rng.uniform(0.05, 1.5, 3)
        center = rng.uniform(-2, 2, 3)
        r = float(rng.uniform(0.05, 1.0))
        world = OccupancyWorld((-10,) * 3, (10,) * 3, (SphereObstacle(r, np.array([[0.0, *center]])),))
        free = collision_free(0.0, State(ZERO, ZERO), world, ZERO, semi)
        hit = np.min(np.linalg.norm(_surface(semi) - center, axis=1)) <= r
        inside = np.sum((center / semi) ** 2) <= 1
        if free and (hit or inside):
            disagreements += 1
    assert disagreements == 0


def test_safety_monotonicity_random_pairs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        world = OccupancyWorld((-10,) * 3, (10,) * 3, (
            SphereObstacle(float(rng.uniform(0.1, 1)), np.array([[0.0, *rng.uniform(-2, 2, 3)]])),))
        pos = rng.uniform(-1, 1, 3)
        c = rng.normal(0, 0.2, 3)
        small = rng.uniform(0, 1, 3)
        grow = rng.uniform(0, 0.5, 3) * (rng.random(3) < 0.7)
        rr, extra = float(rng.uniform(0, 0.2)), rng.uniform(0, 0.1, 3)
        big_free = collision_free(0.0, pos, world, c, small + grow, rr + 0.05 * rng.random(), extra + grow)
        small_free = collision_free(0.0, pos, world, c, small, rr, extra)
        assert not (big_free and not small_free)


def test_larger_margin_never_cheaper(planner):
    rng = np.random.default_rng(8)
    for _ in range(5):
        problem = random_instance(rng, dynamic=False)
        costs = []
        for r in (0.0, 0.15, 0.3):
            p = PlanningProblem(problem.x_S, problem.x_G, problem.world,
                                margin=constant_margin((r, r, r)))
            try:
                costs.append(planner.plan(p).cost)
            except NoPlan:
                costs.append(math.inf)
        assert costs == sorted(costs)


def test_time_varying_margin_provider(planner, prims):
    table = MarginTable(np.array([0.0, 2.0]), np.zeros((2, 3)), np.array([[0.0] * 3, [0.4] * 3]))
    prov = MarginProvider("TimeVaryingSphere", 0.99, {}, table)
    c, s = prov.ellipsoid(7, np.array([0.0, 1.0, 2.0]))
    np.testing.assert_allclose(s[:, 0], [0.0, 0.2, 0.4])
    np.testing.assert_allclose(prov.inflated(0.1).ellipsoid(7, 1.0)[1], 0.3)


def test_dynamic_obstacle_blocks_then_clears(planner):
    # obstacle sits on the direct path until t = 6 then leaves; waiting is not possible,
    # so the plan must detour while it is present
    kf = np.array([[0.0, 1.0, 0.0, 0.0], [6.0, 1.0, 0.0, 0.0], [7.0, 1.0, 3.0, 0.0]])
    world = flat_world([SphereObstacle(0.4, kf)])
    r = planner.plan(PlanningProblem(at(0, 0), at(2, 0), world))
    traj = concatenate(r.plan, planner.primitives)
    centers = world.centers_at(traj[:, 0])[:, 0, :]
    assert np.min(np.linalg.norm(traj[:, 1:4] - centers, axis=1)) > 0.4
    assert r.cost == dijkstra(planner, PlanningProblem(at(0, 0), at(2, 0), world))


def test_world_round_trip():
    w = flat_world([SphereObstacle(0.5, np.array([[0.0, 1, 1, 0], [3.0, 2, 1, 0]]))])
    back = OccupancyWorld.from_dict(w.to_dict())
    assert back.to_dict() == w.to_dict()
    assert w.static_after == 3.0 and w.max_obstacle_speed == pytest.approx(1 / 3)
    np.testing.assert_allclose(w.centers_at(np.array([1.5, 10.0]))[:, 0], [[1.5, 1, 0], [2, 1, 0]])


def test_module_plan_wrapper(prims, config):
    r = plan(PlanningProblem(at(0, 0), at(2, 2), flat_world()), prims, config)
    assert r.plan.end_time(prims) == r.t_G
    assert r.to_dict()["primitive_ids"] == list(r.plan.primitive_ids)
