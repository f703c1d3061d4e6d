import heapq
import json

import numpy as np
import pytest

from carpal.planner import (
    MotionPrimitive,
    PlannerConfig,
    VehicleSpecs,
    braking_trajectory,
    plan,
    plan_ensemble,
)
from carpal.scene import (
    EgoState,
    NoiseParams,
    Obstacle,
    RoadCorridor,
    Scene,
    ValidationError,
    distance_transform,
    rasterize,
)
from carpal.trajectory import Trajectory
from carpal.utility import UtilityField, build_utility_field, trajectory_utility, utility_stats


def open_scene(obstacles=(), ego_xy=(2.0, 0.0), goal_xy=(16.0, 0.0), speed=2.5,
               heading=0.0, bounds=(-2.0, -7.0, 20.0, 7.0)):
    return Scene(bounds=np.array(bounds), obstacles=tuple(obstacles),
                 ego=EgoState(np.array(ego_xy), heading, speed),
                 goal=np.array(goal_xy),
                 road_corridor=RoadCorridor(np.array([[0.0, 0.0], [16.0, 0.0]]), 5.0))


def flat_field(scene, resolution=0.25):
    """Utility field with no intention structure (alpha 0)."""
    line = Trajectory(np.column_stack([[0.1, 0.2], [0.0, 1.0], [0.0, 0.0]]), 0.1)
    return build_utility_field(scene, [line], alpha=0.0, resolution=resolution)


def dijkstra_grid_length(scene, resolution, radius, start, goal):
    """8-connected Dijkstra oracle on the inflated occupancy grid; meters."""
    dist_field = distance_transform(rasterize(scene, resolution))
    free = dist_field.values >= radius
    nx, ny = free.shape

    def cell(p):
        return (int((p[0] - scene.bounds[0]) / resolution),
                int((p[1] - scene.bounds[1]) / resolution))

    si, sj = cell(start)
    gi, gj = cell(goal)
    dist = {(si, sj): 0.0}
    heap = [(0.0, (si, sj))]
    moves = [(di, dj, resolution * np.hypot(di, dj))
             for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]
    while heap:
        d, (i, j) = heapq.heappop(heap)
        if (i, j) == (gi, gj):
            return d
        if d > dist[(i, j)]:
            continue
        for di, dj, w in moves:
            ni, nj = i + di, j + dj
            if 0 <= ni < nx and 0 <= nj < ny and free[ni, nj]:
                nd = d + w
                if nd < dist.get((ni, nj), np.inf):
                    dist[(ni, nj)] = nd
                    heapq.heappush(heap, (nd, (ni, nj)))
    return np.inf


def path_length(traj):
    return float(np.sum(np.linalg.norm(np.diff(traj.xy, axis=0), axis=1)))


def test_primitive_validation():
    with pytest.raises(ValidationError):
        MotionPrimitive(curvature=0.1, arc_length=0.0)
    with pytest.raises(ValidationError):
        VehicleSpecs(speed=1.0, kappa_max=0.0)


def test_plan_straight_goal_near_euclidean():
    scene = open_scene()
    cfg = PlannerConfig(w_u=0.0)
    res = plan(scene, flat_field(scene), VehicleSpecs(speed=2.5), cfg=cfg)
    assert res.status == "found"
    euclid = np.linalg.norm(scene.goal - scene.ego.position)
    # with w_u = 0 the cost is the geometric path length
    assert res.cost <= 1.02 * euclid + 1e-9
    assert res.cost >= euclid - cfg.goal_tol_xy - 1e-9
    # the trajectory is the 3-second window of the path at ego speed
    assert path_length(res.trajectory) <= 2.5 * 3.0 + 1e-9


def test_plan_through_gap():
    wall = [Obstacle("polygon", vertices=np.array([[8.0, -6.5], [9.0, -6.5],
                                                   [9.0, -1.0], [8.0, -1.0]])),
            Obstacle("polygon", vertices=np.array([[8.0, 1.0], [9.0, 1.0],
                                                   [9.0, 6.5], [8.0, 6.5]]))]
    scene = open_scene(wall)
    res = plan(scene, flat_field(scene), VehicleSpecs(speed=2.5),
               cfg=PlannerConfig(w_u=0.0), t_steps=120)
    assert res.status == "found"
    # every crossing of the wall band must pass through the gap
    xy = res.trajectory.xy
    in_band = (xy[:, 0] > 8.0) & (xy[:, 0] < 9.0)
    assert in_band.any()
    assert np.all(np.abs(xy[in_band, 1]) < 1.0)


def test_plan_start_at_goal():
    scene = open_scene(ego_xy=(16.0, 0.1), goal_xy=(16.0, 0.0))
    res = plan(scene, flat_field(scene), VehicleSpecs(speed=2.5))
    assert res.status == "found"
    assert np.allclose(res.trajectory.xy, [16.0, 0.1], atol=1e-9)


def test_plan_no_path_when_goal_sealed():
    # the sealed region also covers every walked-back degraded goal
    box = [Obstacle("polygon", vertices=np.array([[9.5, -2.0], [18.5, -2.0],
                                                  [18.5, 2.0], [9.5, 2.0]]))]
    scene = open_scene(box, goal_xy=(16.0, 0.0))
    res = plan(scene, flat_field(scene), VehicleSpecs(speed=2.5))
    assert res.status == "no_path"
    assert res.trajectory is None


def test_plan_degrades_goal_when_phantom_sits_on_it():
    # a small obstacle right at the goal: the planner walks the goal back
    # along the approach direction instead of giving up
    blob = [Obstacle("circle", center=[16.2, 0.1], radius=0.3)]
    scene = open_scene(blob, goal_xy=(16.0, 0.0))
    res = plan(scene, flat_field(scene), VehicleSpecs(speed=2.5), t_steps=120)
    assert res.status == "found"
    end = res.trajectory.xy[-1]
    assert end[0] < 16.0  # stopped short of the blocked goal
    assert scene.min_clearance(res.trajectory.xy) >= 0.8 - 0.3


def test_plan_matches_dijkstra_oracle_on_free_maps():
    rng = np.random.default_rng(3)
    cfg = PlannerConfig(w_u=0.0)
    for _ in range(4):
        goal = (rng.uniform(12, 17), rng.uniform(-3, 3))
        heading = float(np.arctan2(goal[1] - 0.0, goal[0] - 2.0))
        scene = open_scene(ego_xy=(2.0, 0.0), goal_xy=goal, heading=heading)
        res = plan(scene, flat_field(scene), VehicleSpecs(speed=2.5), cfg=cfg)
        assert res.status == "found"
        oracle = dijkstra_grid_length(scene, cfg.resolution, 0.8,
                                      scene.ego.position, scene.goal)
        assert res.cost <= 1.05 * oracle + 1e-9


def test_plan_respects_curvature_and_collision():
    obstacles = [Obstacle("circle", center=[9.0, 0.0], radius=1.2)]
    scene = open_scene(obstacles)
    specs = VehicleSpecs(speed=2.5)
    field = build_utility_field(
        scene, [Trajectory(np.column_stack([[0.1, 0.2], [6.0, 12.0], [0.0, 0.0]]), 0.1)],
        alpha=0.1, resolution=0.25)
    res = plan(scene, field, specs)
    assert res.status == "found"
    # collision-free against the exact scene geometry, up to the sampling slack
    assert scene.min_clearance(res.trajectory.xy) >= specs.radius - 0.25
    # curvature bound: heading change between consecutive resampled points
    xy = res.trajectory.xy
    seg = np.diff(xy, axis=0)
    lens = np.linalg.norm(seg, axis=1)
    keep = lens > 1e-6
    headings = np.unwrap(np.arctan2(seg[keep, 1], seg[keep, 0]))
    dth = np.abs(np.diff(headings))
    ds = 0.5 * (lens[keep][1:] + lens[keep][:-1])
    assert np.all(dth <= specs.kappa_max * ds + 0.12)


def test_plan_cost_at_least_euclidean():
    rng = np.random.default_rng(11)
    for i in range(3):
        obstacles = [Obstacle("circle", center=[rng.uniform(6, 12), rng.uniform(-2, 2)],
                              radius=rng.uniform(0.4, 1.0))]
        scene = open_scene(obstacles)
        res = plan(scene, flat_field(scene), VehicleSpecs(speed=2.5))
        if res.status != "found":
            continue
        euclid = np.linalg.norm(scene.goal - scene.ego.position)
        assert res.cost >= euclid - PlannerConfig().goal_tol_xy - 1e-9


def test_braking_trajectory_stops():
    scene = open_scene(speed=3.0)
    traj = braking_trajectory(scene, t_steps=30, dt=0.1, a_brake=3.0)
    assert len(traj) == 30
    seg = np.linalg.norm(np.diff(traj.xy, axis=0), axis=1)
    assert seg[0] > seg[-1]
    assert seg[-1] < 1e-9  # stopped well before 3 s
    total = np.linalg.norm(traj.xy[-1] - scene.ego.position)
    assert abs(total - 3.0**2 / (2 * 3.0)) < 1e-6


def sample_lines(scene, n=6):
    out = []
    ego = scene.ego.position
    for k in range(n):
        drift = (k - n / 2) * 0.15
        xs = np.linspace(ego[0] + 0.3, ego[0] + 7.5, 30)
        ys = np.linspace(ego[1], ego[1] + drift, 30)
        out.append(Trajectory(np.column_stack([0.1 * np.arange(1, 31), xs, ys]), 0.1))
    return out


def test_plan_ensemble_zero_noise_identical():
    scene = open_scene([Obstacle("circle", center=[9.0, 0.6], radius=0.8)])
    samples = sample_lines(scene)
    quiet = NoiseParams(p_add=0.0, p_remove=0.0, goal_sigma=0.0, p_goal=0.0)
    results = plan_ensemble(scene, samples, VehicleSpecs(speed=2.5), quiet, m=4, seed=9)
    assert all(r.status == "found" for r in results)
    ref = results[0].trajectory.points
    for r in results[1:]:
        assert np.array_equal(r.trajectory.points, ref)
    field = build_utility_field(scene, samples, alpha=0.1, resolution=0.25)
    stats = utility_stats(field, samples, [r.trajectory for r in results])
    assert stats.var_p == 0.0


def test_plan_ensemble_deterministic():
    scene = open_scene([Obstacle("circle", center=[10.0, -0.5], radius=0.7)])
    samples = sample_lines(scene)
    noise = NoiseParams()
    a = plan_ensemble(scene, samples, VehicleSpecs(speed=2.5), noise, m=3, seed=4)
    b = plan_ensemble(scene, samples, VehicleSpecs(speed=2.5), noise, m=3, seed=4)
    for ra, rb in zip(a, b):
        assert ra.status == rb.status
        assert np.array_equal(ra.trajectory.points, rb.trajectory.points)


def test_plan_ensemble_noise_creates_variance():
    rng = np.random.default_rng(0)
    noise = NoiseParams(p_add=0.004, p_remove=0.3, goal_sigma=1.0, p_goal=0.5)
    positive = 0
    trials = 25
    for t in range(trials):
        cx = rng.uniform(7, 12)
        cy = rng.uniform(-1.5, 1.5)
        scene = open_scene([Obstacle("circle", center=[cx, cy], radius=0.8)])
        samples = sample_lines(scene)
        results = plan_ensemble(scene, samples, VehicleSpecs(speed=2.5), noise,
                                m=6, seed=100 + t)
        field = build_utility_field(scene, samples, alpha=0.1, resolution=0.25)
        stats = utility_stats(field, samples, [r.trajectory for r in results])
        if stats.var_p > 0:
            positive += 1
    assert positive / trials >= 0.9


def test_plan_ensemble_every_plan_collision_free_in_its_scene():
    # plans are checked against the perturbed scene they were planned in, which
    # plan_ensemble does not expose; emulate it by planning with zero noise
    scene = open_scene([Obstacle("circle", center=[9.5, 0.2], radius=1.0)])
    samples = sample_lines(scene)
    quiet = NoiseParams(p_add=0.0, p_remove=0.0, goal_sigma=0.0, p_goal=0.0)
    results = plan_ensemble(scene, samples, VehicleSpecs(speed=2.5), quiet, m=3, seed=2)
    for r in results:
        assert r.status == "found" and not r.fallback
        assert scene.min_clearance(r.trajectory.xy) >= 0.8 - 0.25
