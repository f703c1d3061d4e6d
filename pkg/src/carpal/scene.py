"""Synthetic top-down world model and scenario generation.

Scenes hold obstacles (circles, convex polygons), the ego state, a goal, and a
road corridor. Scenarios add a simulated driver history and observed future,
produced by a pure-pursuit driver that either avoids obstacles (attentive) or
ignores them (risky). Occupancy grids and exact Euclidean distance fields are
the discrete geometry consumed by the utility and planning layers; a noise
injector perturbs scenes the way an imperfect perception stack would.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace, asdict

import numpy as np
from scipy import ndimage

from .trajectory import Trajectory

# Distance reported when a scene has no obstacles at all; large but finite so
# downstream sigmoid arithmetic stays total.
FREE_SPACE_DISTANCE = 1e9

SCHEMA_VERSION = 1


class ValidationError(ValueError):
    pass


def seeded_rng(seed: int, *tags: str) -> np.random.Generator:
    """Deterministic generator derived from a master seed and string tags."""
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(t.encode()) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def wrap_angle(a):
    """Normalize to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = -((-a + np.pi) % (2.0 * np.pi) - np.pi)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Geometry


@dataclass(frozen=True)
class Obstacle:
    """Circle (center, radius) or convex CCW polygon (vertices)."""

    shape: str  # "circle" | "polygon"
    center: np.ndarray = None
    radius: float = 0.0
    vertices: np.ndarray = None
    kind: str = "static"  # "static" | "augmented"

    def __post_init__(self):
        if self.shape == "circle":
            c = np.asarray(self.center, dtype=float).reshape(2)
            if self.radius <= 0:
                raise ValidationError("circle radius must be positive")
            object.__setattr__(self, "center", c)
        elif self.shape == "polygon":
            v = np.asarray(self.vertices, dtype=float)
            if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
                raise ValidationError("polygon needs >= 3 (x, y) vertices")
            area2 = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
            if area2 <= 0:
                raise ValidationError("polygon vertices must wind counter-clockwise")
            object.__setattr__(self, "vertices", v)
        else:
            raise ValidationError(f"unknown obstacle shape {self.shape!r}")
        if self.kind not in ("static", "augmented"):
            raise ValidationError(f"unknown obstacle kind {self.kind!r}")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Boolean mask: which of the (N, 2) points lie inside the obstacle."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.shape == "circle":
            d2 = np.sum((pts - self.center) ** 2, axis=1)
            return d2 <= self.radius * self.radius
        inside = np.ones(pts.shape[0], dtype=bool)
        v = self.vertices
        for i in range(v.shape[0]):
            a, b = v[i], v[(i + 1) % v.shape[0]]
            cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
            inside &= cross >= 0
        return inside

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Euclidean distance from each point to the obstacle (0 inside)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.shape == "circle":
            d = np.linalg.norm(pts - self.center, axis=1) - self.radius
            return np.maximum(d, 0.0)
        v = self.vertices
        dmin = np.full(pts.shape[0], np.inf)
        for i in range(v.shape[0]):
            a, b = v[i], v[(i + 1) % v.shape[0]]
            ab = b - a
            tt = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
            proj = a + tt[:, None] * ab
            dmin = np.minimum(dmin, np.linalg.norm(pts - proj, axis=1))
        dmin[self.contains(pts)] = 0.0
        return dmin

    def bbox(self) -> np.ndarray:
        if self.shape == "circle":
            return np.array([self.center[0] - self.radius, self.center[1] - self.radius,
                             self.center[0] + self.radius, self.center[1] + self.radius])
        v = self.vertices
        return np.array([v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max()])

    def to_jsonable(self) -> dict:
        if self.shape == "circle":
            return {"shape": "circle", "center": self.center.tolist(),
                    "radius": self.radius, "kind": self.kind}
        return {"shape": "polygon", "vertices": self.vertices.tolist(), "kind": self.kind}

    @staticmethod
    def from_jsonable(obj: dict) -> "Obstacle":
        if obj["shape"] == "circle":
            return Obstacle("circle", center=np.asarray(obj["center"]),
                            radius=float(obj["radius"]), kind=obj.get("kind", "static"))
        return Obstacle("polygon", vertices=np.asarray(obj["vertices"]),
                        kind=obj.get("kind", "static"))


@dataclass(frozen=True)
class EgoState:
    position: np.ndarray
    heading: float
    speed: float
    yaw_rate: float = 0.0
    accel_cmd: float = 0.0
    steer_cmd: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(2)
        if self.speed < 0:
            raise ValidationError("speed must be nonnegative")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def to_jsonable(self) -> dict:
        return {"position": self.position.tolist(), "heading": self.heading,
                "speed": self.speed, "yaw_rate": self.yaw_rate,
                "accel_cmd": self.accel_cmd, "steer_cmd": self.steer_cmd}

    @staticmethod
    def from_jsonable(obj: dict) -> "EgoState":
        return EgoState(np.asarray(obj["position"]), obj["heading"], obj["speed"],
                        obj.get("yaw_rate", 0.0), obj.get("accel_cmd", 0.0),
                        obj.get("steer_cmd", 0.0))


@dataclass(frozen=True)
class RoadCorridor:
    centerline: np.ndarray  # (K, 2) polyline
    half_width: float

    def __post_init__(self):
        c = np.asarray(self.centerline, dtype=float)
        if c.ndim != 2 or c.shape[0] < 2 or c.shape[1] != 2:
            raise ValidationError("centerline needs >= 2 (x, y) points")
        if self.half_width <= 0:
            raise ValidationError("corridor half-width must be positive")
        object.__setattr__(self, "centerline", c)

    @property
    def end_heading(self) -> float:
        d = self.centerline[-1] - self.centerline[-2]
        return float(np.arctan2(d[1], d[0]))


@dataclass(frozen=True)
class Scene:
    bounds: np.ndarray  # (xmin, ymin, xmax, ymax)
    obstacles: tuple
    ego: EgoState
    goal: np.ndarray
    road_corridor: RoadCorridor
    seed: int = 0

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float).reshape(4)
        if not (b[2] > b[0] and b[3] > b[1]):
            raise ValidationError("bounds must have positive extent")
        g = np.asarray(self.goal, dtype=float).reshape(2)
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "goal", g)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if not _inside_bounds(b, self.ego.position):
            raise ValidationError("ego position outside scene bounds")
        if not _inside_bounds(b, g):
            raise ValidationError("goal outside scene bounds")
        for ob in self.obstacles:
            bb = ob.bbox()
            if bb[0] < b[0] or bb[1] < b[1] or bb[2] > b[2] or bb[3] > b[3]:
                raise ValidationError("obstacle extends outside scene bounds")

    def occupied(self, pts: np.ndarray) -> np.ndarray:
        """Mask of points inside any obstacle."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        mask = np.zeros(pts.shape[0], dtype=bool)
        for ob in self.obstacles:
            mask |= ob.contains(pts)
        return mask

    def clearance(self, pts: np.ndarray) -> np.ndarray:
        """Exact distance from each point to the nearest obstacle."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if not self.obstacles:
            return np.full(pts.shape[0], FREE_SPACE_DISTANCE)
        d = np.full(pts.shape[0], np.inf)
        for ob in self.obstacles:
            d = np.minimum(d, ob.distance(pts))
        return d

    def min_clearance(self, pts: np.ndarray) -> float:
        return float(np.min(self.clearance(pts)))

    def to_jsonable(self) -> dict:
        return {
            "bounds": self.bounds.tolist(),
            "obstacles": [ob.to_jsonable() for ob in self.obstacles],
            "ego": self.ego.to_jsonable(),
            "goal": self.goal.tolist(),
            "road_corridor": {"centerline": self.road_corridor.centerline.tolist(),
                              "half_width": self.road_corridor.half_width},
            "seed": self.seed,
        }

    @staticmethod
    def from_jsonable(obj: dict) -> "Scene":
        return Scene(
            bounds=np.asarray(obj["bounds"]),
            obstacles=tuple(Obstacle.from_jsonable(o) for o in obj["obstacles"]),
            ego=EgoState.from_jsonable(obj["ego"]),
            goal=np.asarray(obj["goal"]),
            road_corridor=RoadCorridor(np.asarray(obj["road_corridor"]["centerline"]),
                                       obj["road_corridor"]["half_width"]),
            seed=int(obj.get("seed", 0)),
        )


def _inside_bounds(b: np.ndarray, p: np.ndarray) -> bool:
    return bool(b[0] <= p[0] <= b[2] and b[1] <= p[1] <= b[3])


# ---------------------------------------------------------------------------
# Grids


@dataclass(frozen=True)
class OccupancyGrid:
    origin: np.ndarray  # world position of the (0, 0) cell corner
    resolution: float
    cells: np.ndarray  # (nx, ny) bool; cells[ix, iy] centered at origin + (ix+.5, iy+.5)*res

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValidationError("resolution must be positive")
        c = np.asarray(self.cells, dtype=bool)
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise ValidationError("grid must be at least 1x1")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))
        object.__setattr__(self, "cells", c)

    @property
    def shape(self) -> tuple:
        return self.cells.shape

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.cells.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.resolution
        return xs, ys

    def index_of(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Clamped cell indices of the (N, 2) points."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ix = np.clip(((pts[:, 0] - self.origin[0]) / self.resolution).astype(int),
                     0, self.cells.shape[0] - 1)
        iy = np.clip(((pts[:, 1] - self.origin[1]) / self.resolution).astype(int),
                     0, self.cells.shape[1] - 1)
        return ix, iy


@dataclass(frozen=True)
class DistanceField:
    origin: np.ndarray
    resolution: float
    values: np.ndarray  # meters to nearest occupied cell; 0 on occupied cells

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def nearest(self, pts: np.ndarray) -> np.ndarray:
        """Distance at the cell containing each point (no interpolation)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        ix = np.clip(((pts[:, 0] - self.origin[0]) / self.resolution).astype(int),
                     0, self.values.shape[0] - 1)
        iy = np.clip(((pts[:, 1] - self.origin[1]) / self.resolution).astype(int),
                     0, self.values.shape[1] - 1)
        return self.values[ix, iy]


def rasterize(scene: Scene, resolution: float) -> OccupancyGrid:
    """Occupancy grid over the scene bounds; a cell is occupied iff its center is inside an obstacle."""
    if resolution <= 0:
        raise ValidationError("resolution must be positive")
    b = scene.bounds
    nx = max(1, int(np.ceil((b[2] - b[0]) / resolution)))
    ny = max(1, int(np.ceil((b[3] - b[1]) / resolution)))
    cells = np.zeros((nx, ny), dtype=bool)
    xs = b[0] + (np.arange(nx) + 0.5) * resolution
    ys = b[1] + (np.arange(ny) + 0.5) * resolution
    for ob in scene.obstacles:
        bb = ob.bbox()
        i0 = max(0, int((bb[0] - b[0]) / resolution) - 1)
        i1 = min(nx, int(np.ceil((bb[2] - b[0]) / resolution)) + 1)
        j0 = max(0, int((bb[1] - b[1]) / resolution) - 1)
        j1 = min(ny, int(np.ceil((bb[3] - b[1]) / resolution)) + 1)
        if i0 >= i1 or j0 >= j1:
            continue
        gx, gy = np.meshgrid(xs[i0:i1], ys[j0:j1], indexing="ij")
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        cells[i0:i1, j0:j1] |= ob.contains(pts).reshape(i1 - i0, j1 - j0)
    return OccupancyGrid(origin=b[:2], resolution=resolution, cells=cells)


def distance_transform(grid: OccupancyGrid) -> DistanceField:
    """Exact Euclidean distance (meters) from every cell to the nearest occupied cell."""
    occ = grid.cells
    if not occ.any():
        values = np.full(occ.shape, FREE_SPACE_DISTANCE)
    else:
        # exact EDT in cell units, then scaled; occupied cells come out 0
        values = ndimage.distance_transform_edt(~occ) * grid.resolution
    return DistanceField(origin=grid.origin, resolution=grid.resolution, values=values)


# ---------------------------------------------------------------------------
# Perception noise


@dataclass(frozen=True)
class NoiseParams:
    p_add: float = 0.003       # expected added obstacles per square meter
    p_remove: float = 0.15     # independent removal probability per obstacle
    added_radius: tuple = (0.3, 0.6)
    goal_sigma: float = 1.5    # std of goal jitter, meters
    p_goal: float = 0.5        # probability the goal is jittered at all

    def __post_init__(self):
        for name in ("p_remove", "p_goal"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1]")
        if self.p_add < 0:
            raise ValidationError("p_add must be nonnegative")

    def to_jsonable(self) -> dict:
        return {"p_add": self.p_add, "p_remove": self.p_remove,
                "added_radius": list(self.added_radius),
                "goal_sigma": self.goal_sigma, "p_goal": self.p_goal}

    @staticmethod
    def from_jsonable(obj: dict) -> "NoiseParams":
        return NoiseParams(obj["p_add"], obj["p_remove"], tuple(obj["added_radius"]),
                           obj["goal_sigma"], obj["p_goal"])


def inject_perception_noise(scene: Scene, params: NoiseParams, seed: int) -> Scene:
    """Simulated perception faults: dropped obstacles, phantom obstacles, goal drift."""
    rng = seeded_rng(seed, "percept")
    kept = [ob for ob in scene.obstacles if rng.random() >= params.p_remove]

    b = scene.bounds
    area = (b[2] - b[0]) * (b[3] - b[1])
    n_add = rng.poisson(params.p_add * area)
    for _ in range(n_add):
        r = rng.uniform(*params.added_radius)
        cx = rng.uniform(b[0] + r, b[2] - r)
        cy = rng.uniform(b[1] + r, b[3] - r)
        kept.append(Obstacle("circle", center=np.array([cx, cy]), radius=r, kind="augmented"))

    goal = scene.goal
    if rng.random() < params.p_goal:
        shift = rng.normal(0.0, params.goal_sigma, size=2)
        goal = np.clip(goal + shift, b[:2] + 1e-6, b[2:] - 1e-6)

    return replace(scene, obstacles=tuple(kept), goal=goal)


# ---------------------------------------------------------------------------
# Scenario generation


@dataclass(frozen=True)
class ScenarioConfig:
    dt: float = 0.1
    t_past: int = 20            # past samples (2 s)
    t_future: int = 30          # future samples (3 s)
    corridor_length: tuple = (15.0, 21.0)
    corridor_half_width: tuple = (4.5, 5.5)
    margin: float = 4.0         # world margin beyond the corridor, meters
    expected_obstacles: float = 1.4
    max_obstacles: int = 4
    obstacle_radius: tuple = (0.5, 1.0)
    on_path_fraction: float = 0.45
    on_path_offset: float = 0.6
    off_path_offset: tuple = (2.0, 3.6)
    target_speed: tuple = (1.8, 2.9)
    waypoint_sigma: float = 0.5  # std of the pursued-waypoint noise, meters
    risky_waypoint_sigma: float = 2.2  # scattered aim of inattentive drivers
    p_risk: float = 0.3          # probability the driver ignores obstacles
    steer_jitter: float = 0.025  # per-step curvature noise, 1/m
    lookahead: float = 5.0       # pure-pursuit lookahead, meters
    safety_clearance: float = 1.0  # clearance attentive drivers are expected to keep
    avoid_gain: float = 3.0
    avoid_influence: float = 5.0
    curbs: bool = True
    curb_thickness: float = 0.4
    a_max: float = 2.0
    kappa_max: float = 0.25      # 1/turning radius, 1/m
    wheelbase: float = 2.7

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        if self.t_past < 2 or self.t_future < 2:
            raise ValidationError("horizons must be at least 2 samples")
        if min(self.corridor_half_width) <= 0:
            raise ValidationError("corridor half-width must be positive")
        if min(self.corridor_length) <= 0:
            raise ValidationError("corridor length must be positive")

    def to_jsonable(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @staticmethod
    def from_jsonable(obj: dict) -> "ScenarioConfig":
        kwargs = dict(obj)
        for k, v in kwargs.items():
            if isinstance(v, list):
                kwargs[k] = tuple(v)
        return ScenarioConfig(**kwargs)


@dataclass(frozen=True)
class Scenario:
    scene: Scene
    past: Trajectory      # T_p samples, t in [-(T_p-1)*dt, 0]
    future: Trajectory    # tau_a: T_f samples, t in [dt, T_f*dt]
    risky: bool
    seed: int
    scenario_id: str = ""
    augmented: str = ""   # "", "scale", or "obstacle"

    def to_jsonable(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "id": self.scenario_id,
            "seed": self.seed,
            "risky": self.risky,
            "augmented": self.augmented,
            "scene": self.scene.to_jsonable(),
            "past": self.past.to_jsonable(),
            "future": self.future.to_jsonable(),
        }

    @staticmethod
    def from_jsonable(obj: dict) -> "Scenario":
        version = obj.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported scenario schema_version {version!r}")
        return Scenario(
            scene=Scene.from_jsonable(obj["scene"]),
            past=Trajectory.from_jsonable(obj["past"]),
            future=Trajectory.from_jsonable(obj["future"]),
            risky=bool(obj["risky"]),
            seed=int(obj["seed"]),
            scenario_id=obj.get("id", ""),
            augmented=obj.get("augmented", ""),
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_jsonable(), f, indent=1, sort_keys=True)
            f.write("\n")

    @staticmethod
    def load(path) -> "Scenario":
        with open(path) as f:
            return Scenario.from_jsonable(json.load(f))


def _sample_obstacles(cfg: ScenarioConfig, rng: np.random.Generator,
                      length: float, half_width: float, goal: np.ndarray) -> list:
    obstacles = []
    if cfg.expected_obstacles <= 0:
        return obstacles
    count = min(int(rng.poisson(cfg.expected_obstacles)), cfg.max_obstacles)
    for _ in range(count):
        for _attempt in range(20):
            s = rng.uniform(0.3 * length, 0.85 * length)
            if rng.random() < cfg.on_path_fraction:
                lat = rng.uniform(-cfg.on_path_offset, cfg.on_path_offset)
            else:
                lat = rng.choice([-1.0, 1.0]) * rng.uniform(*cfg.off_path_offset)
            r = rng.uniform(*cfg.obstacle_radius)
            c = np.array([s, lat])
            if abs(lat) + r > half_width - 0.3:
                continue  # keep a drivable strip along the curb
            if np.linalg.norm(c) < 3.0 + r or np.linalg.norm(c - goal) < 2.0 + r:
                continue
            if any(np.linalg.norm(c - o.center) < r + o.radius + 1.6 for o in obstacles):
                continue
            obstacles.append(Obstacle("circle", center=c, radius=r))
            break
    return obstacles


def _curb_obstacles(length: float, half_width: float, thickness: float) -> list:
    lo, hi = -2.0, length + 2.0
    top = Obstacle("polygon", vertices=np.array([
        [lo, half_width], [hi, half_width],
        [hi, half_width + thickness], [lo, half_width + thickness]]))
    bot = Obstacle("polygon", vertices=np.array([
        [lo, -half_width - thickness], [hi, -half_width - thickness],
        [hi, -half_width], [lo, -half_width]]))
    return [top, bot]


def _avoidance_curvature(pos: np.ndarray, heading: float, obstacles, gain: float,
                         influence: float, probe: float = 0.0) -> float:
    """Steer-away term: repulsion from obstacle boundaries ahead of the vehicle.

    With probe > 0 the repulsion is evaluated at a point that far ahead along
    the current heading, anticipating obstacles before they are reached.
    """
    kappa = 0.0
    pos = pos + probe * np.array([np.cos(heading), np.sin(heading)])
    p = pos[None, :]
    for ob in obstacles:
        d = float(ob.distance(p)[0])
        if d >= influence:
            continue
        if ob.shape == "circle":
            closest = ob.center
        else:
            v = ob.vertices
            best, closest = np.inf, v[0]
            for i in range(v.shape[0]):
                a, b = v[i], v[(i + 1) % v.shape[0]]
                ab = b - a
                tt = np.clip(np.dot(pos - a, ab) / np.dot(ab, ab), 0.0, 1.0)
                proj = a + tt * ab
                dd = np.linalg.norm(pos - proj)
                if dd < best:
                    best, closest = dd, proj
        bear = wrap_angle(np.arctan2(closest[1] - pos[1], closest[0] - pos[0]) - heading)
        if abs(bear) > 0.6 * np.pi:
            continue  # already behind
        push = gain * (1.0 / max(d, 0.3) - 1.0 / influence)
        side = 1.0 if bear >= 0.0 else -1.0  # dead-ahead breaks to the right
        kappa += -side * push * max(np.cos(0.5 * bear), 0.5)
    return kappa


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Simulate one drive; deterministic for a fixed (config, seed)."""
    rng = seeded_rng(seed, "scenario")
    length = rng.uniform(*config.corridor_length)
    half_width = rng.uniform(*config.corridor_half_width)
    m = config.margin
    bounds = np.array([-m, -half_width - m, length + m, half_width + m])

    goal = np.array([length, np.clip(rng.normal(0.0, 0.5), -(half_width - 2.0), half_width - 2.0)])
    obstacles = _sample_obstacles(config, rng, length, half_width, goal)
    if config.curbs:
        obstacles.extend(_curb_obstacles(length, half_width, config.curb_thickness))

    corridor = RoadCorridor(np.array([[0.0, 0.0], [length, 0.0]]), half_width)
    risky = bool(rng.random() < config.p_risk)
    target_speed = rng.uniform(*config.target_speed)

    wp_sigma = config.risky_waypoint_sigma if risky else config.waypoint_sigma
    wp_margin = 1.2 if risky else 1.8

    def draw_waypoint(sigma):
        wp = goal + rng.normal(0.0, sigma, size=2)
        wp[1] = np.clip(wp[1], -(half_width - wp_margin), half_width - wp_margin)
        return wp

    waypoint = draw_waypoint(wp_sigma)
    # attentive drivers drift their aim a little over time; an inattentive
    # driver's skewed aim persists, so their arc is readable from the state
    redraw_every = int(rng.integers(15, 26)) if not risky else 10_000

    pos = np.array([0.0, np.clip(rng.normal(0.0, 0.5), -1.5, 1.5)])
    heading = float(np.clip(rng.normal(0.0, 0.12), -0.35, 0.35))
    speed = target_speed * rng.uniform(0.7, 1.0)

    n_steps = config.t_past + config.t_future
    states = np.zeros((n_steps, 2))
    kappa_cmd, accel = 0.0, 0.0
    kappa_hist = np.zeros(n_steps)
    accel_hist = np.zeros(n_steps)
    for i in range(n_steps):
        states[i] = pos
        if i > 0 and i % redraw_every == 0:
            waypoint = draw_waypoint(0.35)
        to_wp = waypoint - pos
        dist_wp = np.linalg.norm(to_wp)
        ld = max(1.0, min(config.lookahead, dist_wp))
        alpha = wrap_angle(np.arctan2(to_wp[1], to_wp[0]) - heading)
        kappa_pp = 2.0 * np.sin(alpha) / ld
        kappa_av = 0.0
        near_clear = np.inf
        if not risky and obstacles:
            kappa_av = _avoidance_curvature(pos, heading, obstacles,
                                            config.avoid_gain, config.avoid_influence)
            kappa_av += _avoidance_curvature(pos, heading, obstacles,
                                             0.7 * config.avoid_gain,
                                             config.avoid_influence,
                                             probe=min(1.2 * speed, 3.5))
            fwd = np.array([np.cos(heading), np.sin(heading)])
            probes = pos[None, :] + np.outer([0.0, 0.6, 1.2, 1.8], speed * fwd)
            near_clear = min(float(ob.distance(probes).min()) for ob in obstacles)
        if near_clear < 2.5:
            kappa_pp *= max(0.15, near_clear / 2.5)  # avoidance outranks goal pursuit up close
        kappa_cmd = float(np.clip(kappa_pp + kappa_av + rng.normal(0.0, config.steer_jitter),
                                  -config.kappa_max, config.kappa_max))
        v_target = target_speed if dist_wp > 2.0 else target_speed * dist_wp / 2.0
        if near_clear < 2.0:
            v_target *= max(0.35, near_clear / 2.0)  # attentive drivers slow near obstacles
        accel = float(np.clip(1.5 * (v_target - speed), -config.a_max, config.a_max))
        kappa_hist[i] = kappa_cmd
        accel_hist[i] = accel
        heading = wrap_angle(heading + kappa_cmd * speed * config.dt)
        speed = max(0.1, speed + accel * config.dt)
        pos = pos + speed * config.dt * np.array([np.cos(heading), np.sin(heading)])

    t0 = config.t_past - 1  # index of the decision instant
    yaw_rate = kappa_hist[t0] * speed if t0 > 0 else 0.0
    # heading at t0: recompute by replaying index arithmetic (heading evolved after t0 too)
    dirs = np.diff(states, axis=0)
    heading_t0 = float(np.arctan2(dirs[t0][1], dirs[t0][0])) if t0 < n_steps - 1 else heading
    speed_t0 = float(np.linalg.norm(dirs[t0]) / config.dt) if t0 < n_steps - 1 else speed
    ego = EgoState(position=states[t0], heading=heading_t0, speed=speed_t0,
                   yaw_rate=float(yaw_rate), accel_cmd=float(accel_hist[t0]),
                   steer_cmd=float(np.arctan(kappa_hist[t0] * config.wheelbase)))

    scene = Scene(bounds=bounds, obstacles=tuple(obstacles), ego=ego, goal=goal,
                  road_corridor=corridor, seed=seed)

    dt = config.dt
    past_ts = dt * (np.arange(config.t_past) - t0)
    past = Trajectory(np.column_stack([past_ts, states[: config.t_past]]), dt)
    fut_ts = dt * np.arange(1, config.t_future + 1)
    future = Trajectory(np.column_stack([fut_ts, states[config.t_past:]]), dt)

    return Scenario(scene=scene, past=past, future=future, risky=risky, seed=seed,
                    scenario_id=f"scn-{seed:08d}")
