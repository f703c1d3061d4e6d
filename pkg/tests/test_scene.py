import json

import numpy as np
import pytest

from carpal.scene import (
    FREE_SPACE_DISTANCE,
    EgoState,
    NoiseParams,
    Obstacle,
    OccupancyGrid,
    RoadCorridor,
    Scene,
    Scenario,
    ScenarioConfig,
    ValidationError,
    distance_transform,
    generate_scenario,
    inject_perception_noise,
    rasterize,
)


def simple_scene(obstacles=(), bounds=(-5, -5, 5, 5)):
    return Scene(bounds=np.array(bounds), obstacles=tuple(obstacles),
                 ego=EgoState(np.array([0.0, 0.0]), 0.0, 1.0),
                 goal=np.array([4.0, 0.0]),
                 road_corridor=RoadCorridor(np.array([[0.0, 0.0], [4.0, 0.0]]), 3.0))


def brute_force_distance(cells, resolution):
    """O(n^2) scan: distance from every cell to the nearest occupied cell."""
    nx, ny = cells.shape
    occ = np.argwhere(cells)
    out = np.full((nx, ny), FREE_SPACE_DISTANCE)
    if occ.size == 0:
        return out
    for i in range(nx):
        for j in range(ny):
            d2 = (occ[:, 0] - i) ** 2 + (occ[:, 1] - j) ** 2
            out[i, j] = np.sqrt(d2.min()) * resolution
    return out


def test_scene_invariants():
    with pytest.raises(ValidationError):
        Obstacle("circle", center=[0, 0], radius=0.0)
    with pytest.raises(ValidationError):
        Obstacle("polygon", vertices=[[0, 0], [1, 0], [1, 1]][::-1])  # clockwise
    with pytest.raises(ValidationError):
        simple_scene([Obstacle("circle", center=[10, 0], radius=1.0)])
    with pytest.raises(ValidationError):
        EgoState(np.zeros(2), 0.0, speed=-1.0)


def test_generate_scenario_deterministic():
    cfg = ScenarioConfig()
    a = generate_scenario(cfg, seed=7)
    b = generate_scenario(cfg, seed=7)
    assert json.dumps(a.to_jsonable(), sort_keys=True) == json.dumps(b.to_jsonable(), sort_keys=True)
    c = generate_scenario(cfg, seed=8)
    assert json.dumps(a.to_jsonable()) != json.dumps(c.to_jsonable())


def test_generate_scenario_no_obstacles_is_collision_free():
    cfg = ScenarioConfig(expected_obstacles=0.0, curbs=False)
    scn = generate_scenario(cfg, seed=3)
    assert len(scn.scene.obstacles) == 0
    assert scn.scene.min_clearance(scn.future.xy) == FREE_SPACE_DISTANCE


def test_generate_scenario_config_validation():
    with pytest.raises(ValidationError):
        ScenarioConfig(dt=0.0)
    with pytest.raises(ValidationError):
        ScenarioConfig(t_future=1)
    with pytest.raises(ValidationError):
        ScenarioConfig(corridor_half_width=(0.0, 1.0))


def test_risky_drivers_get_closer_to_obstacles():
    base = dict(expected_obstacles=3.0, on_path_fraction=1.0)
    dists = {}
    for p_risk in (0.0, 1.0):
        cfg = ScenarioConfig(p_risk=p_risk, **base)
        vals = []
        for seed in range(100):
            scn = generate_scenario(cfg, seed=seed)
            circles = [o for o in scn.scene.obstacles if o.shape == "circle"]
            if not circles:
                continue
            d = min(float(o.distance(scn.future.xy).min()) for o in circles)
            vals.append(d)
        dists[p_risk] = np.array(vals)
    assert dists[1.0].mean() < dists[0.0].mean() - 0.3
    # risky drivers actually breach the attentive clearance
    assert (dists[1.0] < 1.0).mean() > (dists[0.0] < 1.0).mean()


def test_attentive_driver_keeps_clearance():
    cfg = ScenarioConfig(p_risk=0.0)
    ok = 0
    n = 500
    for seed in range(n):
        scn = generate_scenario(cfg, seed=seed)
        if scn.scene.min_clearance(scn.future.xy) >= cfg.safety_clearance:
            ok += 1
    assert ok / n >= 0.95, f"only {ok}/{n} attentive runs kept clearance"


def test_rasterize_empty_scene():
    grid = rasterize(simple_scene(), resolution=0.5)
    assert not grid.cells.any()


def test_rasterize_circle_cell_count():
    ob = Obstacle("circle", center=[0.0, 0.0], radius=1.0)
    grid = rasterize(simple_scene([ob]), resolution=0.1)
    count = int(grid.cells.sum())
    expected = np.pi / 0.01
    assert abs(count - expected) <= 0.10 * expected


def test_rasterize_validation():
    with pytest.raises(ValidationError):
        rasterize(simple_scene(), resolution=0.0)


def test_distance_transform_all_free_and_all_occupied():
    grid = OccupancyGrid(origin=np.zeros(2), resolution=1.0, cells=np.zeros((4, 4), dtype=bool))
    field = distance_transform(grid)
    assert np.all(field.values == FREE_SPACE_DISTANCE)
    full = OccupancyGrid(origin=np.zeros(2), resolution=1.0, cells=np.ones((4, 4), dtype=bool))
    assert np.all(distance_transform(full).values == 0.0)


def test_distance_transform_three_four_five():
    cells = np.zeros((10, 10), dtype=bool)
    cells[2, 3] = True
    field = distance_transform(OccupancyGrid(origin=np.zeros(2), resolution=1.0, cells=cells))
    assert abs(field.values[5, 7] - 5.0) < 1e-12  # offset (3, 4)
    assert field.values[2, 3] == 0.0


def test_distance_transform_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(15):
        nx, ny = rng.integers(2, 33, size=2)
        cells = rng.random((nx, ny)) < rng.uniform(0.02, 0.3)
        res = float(rng.uniform(0.05, 1.5))
        grid = OccupancyGrid(origin=np.zeros(2), resolution=res, cells=cells)
        got = distance_transform(grid).values
        want = brute_force_distance(cells, res)
        assert np.allclose(got, want, atol=1e-9)


def test_distance_transform_monotone_under_added_obstacle():
    scene = simple_scene([Obstacle("circle", center=[2.0, 2.0], radius=0.8)])
    more = simple_scene([Obstacle("circle", center=[2.0, 2.0], radius=0.8),
                         Obstacle("circle", center=[-2.0, -1.0], radius=0.6)])
    d_before = distance_transform(rasterize(scene, 0.25)).values
    d_after = distance_transform(rasterize(more, 0.25)).values
    assert np.all(d_after <= d_before + 1e-12)


def test_inject_noise_zero_params_is_identity():
    scn = generate_scenario(ScenarioConfig(), seed=5).scene
    params = NoiseParams(p_add=0.0, p_remove=0.0, goal_sigma=0.0, p_goal=0.0)
    noisy = inject_perception_noise(scn, params, seed=3)
    assert json.dumps(noisy.to_jsonable(), sort_keys=True) == json.dumps(scn.to_jsonable(), sort_keys=True)


def test_inject_noise_remove_all():
    scn = generate_scenario(ScenarioConfig(expected_obstacles=3.0), seed=6).scene
    noisy = inject_perception_noise(scn, NoiseParams(p_add=0.0, p_remove=1.0, p_goal=0.0), seed=1)
    assert len(noisy.obstacles) == 0


def test_inject_noise_validation():
    with pytest.raises(ValidationError):
        NoiseParams(p_remove=1.5)
    with pytest.raises(ValidationError):
        NoiseParams(p_goal=-0.1)


def test_inject_noise_poisson_rate():
    scn = simple_scene()
    p_add = 0.02  # area 100 -> lambda = 2
    lam = p_add * 100.0
    counts = []
    for seed in range(1000):
        noisy = inject_perception_noise(scn, NoiseParams(p_add=p_add, p_remove=0.0, p_goal=0.0), seed)
        counts.append(len(noisy.obstacles))
    mean = np.mean(counts)
    sigma = np.sqrt(lam / 1000)
    assert abs(mean - lam) < 3 * sigma


def test_noise_determinism():
    scn = generate_scenario(ScenarioConfig(), seed=9).scene
    params = NoiseParams()
    a = inject_perception_noise(scn, params, seed=4)
    b = inject_perception_noise(scn, params, seed=4)
    assert json.dumps(a.to_jsonable(), sort_keys=True) == json.dumps(b.to_jsonable(), sort_keys=True)


def test_scenario_json_round_trip(tmp_path):
    scn = generate_scenario(ScenarioConfig(), seed=12)
    path = tmp_path / "scn.json"
    scn.save(path)
    back = Scenario.load(path)
    assert json.dumps(back.to_jsonable(), sort_keys=True) == json.dumps(scn.to_jsonable(), sort_keys=True)
    with pytest.raises(ValidationError):
        Scenario.from_jsonable({"schema_version": 99})
