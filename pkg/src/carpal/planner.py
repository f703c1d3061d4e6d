"""Hybrid A* backup planner and the noisy plan ensemble.

Search runs over continuous (x, y, heading) states bucketed into grid cells
and heading bins, expanded with constant-curvature motion primitives. Edge
cost is arc length scaled up where the utility field is poor, so plans trade
path length against safety and driver-intention alignment. The ensemble
perturbs the scene with perception noise before each search, and failed
searches degrade to a braking trajectory so the downstream statistics always
see m plans.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _sparse_dijkstra

from .scene import (
    DistanceField,
    NoiseParams,
    Scene,
    ValidationError,
    distance_transform,
    inject_perception_noise,
    rasterize,
)
from .trajectory import Trajectory
from .utility import (IntentionModel, UtilityField, build_utility_field,
                      intention_density, safety_utility)


@dataclass(frozen=True)
class VehicleSpecs:
    speed: float            # resampling speed, m/s (the ego speed)
    kappa_max: float = 0.25  # 1 / turning radius
    radius: float = 0.8      # obstacle inflation radius, m

    def __post_init__(self):
        if self.kappa_max <= 0 or self.radius <= 0:
            raise ValidationError("vehicle specs must be positive")


@dataclass(frozen=True)
class PlannerConfig:
    resolution: float = 0.35      # planning grid, m; full-lock arcs advance one heading bin
    heading_bins: int = 36
    arc_factor: float = 2.0       # primitive arc length = factor * resolution
    n_max: int = 200_000          # expansion budget
    goal_tol_xy: float = 0.5
    goal_tol_heading: float = np.pi / 6.0
    w_u: float = 5.0              # utility weight in the edge cost
    a_brake: float = 3.0          # fallback braking deceleration, m/s^2
    heuristic_margin: float = 1.09  # grid-vs-continuum slack in the 2-D heuristic


@dataclass(frozen=True)
class MotionPrimitive:
    curvature: float
    arc_length: float

    def __post_init__(self):
        if self.arc_length <= 0:
            raise ValidationError("arc length must be positive")


@dataclass(frozen=True)
class PlannerState:
    x: float
    y: float
    heading: float

    def key(self, origin, resolution, heading_bins):
        ix = int((self.x - origin[0]) / resolution)
        iy = int((self.y - origin[1]) / resolution)
        ib = int(((self.heading + np.pi) / (2 * np.pi / heading_bins))) % heading_bins
        return (ix, iy, ib)


@dataclass
class PlanResult:
    trajectory: Trajectory  # None when no plan was found
    cost: float
    expanded_nodes: int
    status: str             # "found" | "no_path" | "budget_exhausted"
    fallback: bool = False  # braking trajectory substituted by the ensemble


def _advance(x, y, th, kappa, L):
    """Endpoint of a constant-curvature arc (vectorized over kappa)."""
    kappa = np.asarray(kappa, dtype=float)
    th2 = th + kappa * L
    straight = np.abs(kappa) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        nx = np.where(straight, x + L * np.cos(th), x + (np.sin(th2) - np.sin(th)) / kappa)
        ny = np.where(straight, y + L * np.sin(th), y - (np.cos(th2) - np.cos(th)) / kappa)
    return nx, ny, th2


def _heuristic_map(field: UtilityField, dist_values: np.ndarray, specs: VehicleSpecs,
                   cfg: PlannerConfig, goal_cell: tuple, start_cell: tuple = None,
                   escape_clear: float = None, escape_range: float = 0.0) -> np.ndarray:
    """Cost-to-goal lower bound per cell: weighted 8-connected Dijkstra from the goal.

    Edges take the smaller endpoint multiplier, which under-estimates the
    hybrid cost; the margin divides out the 8-connected-grid overshoot. Cells
    near the start honor the escape clearance so a start inside the inflation
    band stays connected.
    """
    nx, ny = field.safety.shape
    free = dist_values >= max(specs.radius - field.resolution, 0.0)
    gi, gj = goal_cell
    free[gi, gj] = True
    if start_cell is not None and escape_clear is not None and escape_clear < specs.radius:
        si, sj = start_cell
        rad = int(np.ceil(escape_range / field.resolution)) + 1
        ii, jj = np.meshgrid(np.arange(max(0, si - rad), min(nx, si + rad + 1)),
                             np.arange(max(0, sj - rad), min(ny, sj + rad + 1)),
                             indexing="ij")
        near = ((ii - si) ** 2 + (jj - sj) ** 2) * field.resolution ** 2 <= escape_range ** 2
        loose = dist_values[ii, jj] >= escape_clear
        free[ii, jj] |= near & loose
    mult = 1.0 + cfg.w_u * np.maximum(field.r_max - field.combined, 0.0)

    idx = np.arange(nx * ny).reshape(nx, ny)
    freeflat = free.ravel()
    rows, cols, weights = [], [], []
    step = field.resolution / cfg.heuristic_margin
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        length = step * np.hypot(di, dj)
        src_i = slice(0, nx - di) if di >= 0 else slice(-di, nx)
        src_j = slice(0, ny - dj) if dj >= 0 else slice(-dj, ny)
        dst_i = slice(di, nx) if di >= 0 else slice(0, nx + di)
        dst_j = slice(dj, ny) if dj >= 0 else slice(0, ny + dj)
        a = idx[src_i, src_j].ravel()
        bidx = idx[dst_i, dst_j].ravel()
        ok = freeflat[a] & freeflat[bidx]
        w = length * np.minimum(mult[src_i, src_j].ravel(), mult[dst_i, dst_j].ravel())
        rows.append(a[ok])
        cols.append(bidx[ok])
        weights.append(w[ok])
    graph = csr_matrix((np.concatenate(weights),
                        (np.concatenate(rows), np.concatenate(cols))),
                       shape=(nx * ny, nx * ny))
    dist = _sparse_dijkstra(graph, directed=False, indices=[gi * ny + gj])[0]
    return dist.reshape(nx, ny)


def _resample(polyline: np.ndarray, speed: float, t_steps: int, dt: float) -> Trajectory:
    """March along the polyline at constant speed; hold the endpoint after arrival."""
    seg = np.linalg.norm(np.diff(polyline, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    ts = dt * np.arange(1, t_steps + 1)
    want = np.minimum(np.maximum(speed, 0.0) * ts, total)
    if total <= 1e-12:
        xy = np.tile(polyline[0], (t_steps, 1))
    else:
        xy = np.column_stack([np.interp(want, s, polyline[:, 0]),
                              np.interp(want, s, polyline[:, 1])])
    return Trajectory(np.column_stack([ts, xy]), dt)


def braking_trajectory(scene: Scene, t_steps: int = 30, dt: float = 0.1,
                       a_brake: float = 3.0) -> Trajectory:
    """Straight-line decelerating stop from the current ego state."""
    ego = scene.ego
    ts = dt * np.arange(1, t_steps + 1)
    v = np.maximum(ego.speed - a_brake * ts, 0.0)
    stop_t = ego.speed / a_brake if a_brake > 0 else np.inf
    dist = np.where(ts < stop_t, ego.speed * ts - 0.5 * a_brake * ts**2,
                    ego.speed**2 / (2 * a_brake) if np.isfinite(stop_t) else ego.speed * ts)
    xy = ego.position + np.outer(dist, [np.cos(ego.heading), np.sin(ego.heading)])
    return Trajectory(np.column_stack([ts, xy]), dt)


def plan(scene: Scene, field: UtilityField, specs: VehicleSpecs,
         cfg: PlannerConfig = PlannerConfig(), dist_field: DistanceField = None,
         goal_heading: float = None, t_steps: int = 30, dt: float = 0.1) -> PlanResult:
    """Hybrid A* from the ego pose to the scene goal over the utility field."""
    if dist_field is None:
        dist_field = distance_transform(rasterize(scene, field.resolution))
    dv = dist_field.values
    origin = dist_field.origin
    res = dist_field.resolution
    nx, ny = dv.shape
    if field.safety.shape != dv.shape or abs(field.resolution - res) > 1e-12:
        raise ValidationError("utility field and distance field grids must match")
    ego = scene.ego
    goal = scene.goal
    if goal_heading is None:
        goal_heading = scene.road_corridor.end_heading

    def cell(x, y):
        i = int((x - origin[0]) / res)
        j = int((y - origin[1]) / res)
        return min(max(i, 0), nx - 1), min(max(j, 0), ny - 1)

    start = PlannerState(float(ego.position[0]), float(ego.position[1]), float(ego.heading))
    si, sj = cell(start.x, start.y)
    # escape semantics: within a short range of the start the required clearance
    # never exceeds what the start pose already has, so a vehicle inside the
    # inflation band (but not inside an obstacle) can still plan its way out
    dv_start = float(dv[si, sj])
    if dv_start < 0.1:
        return PlanResult(None, np.inf, 0, "no_path")
    escape_clear = min(specs.radius, max(dv_start - 0.05, 0.12))
    escape_range = 1.6

    # reachability at full inflation: the search can only land where a goal
    # cell is grid-connected to the start's free component
    free_check = dv >= specs.radius
    rad_cells = int(np.ceil(escape_range / res)) + 1
    ei0, ei1 = max(0, si - rad_cells), min(nx, si + rad_cells + 1)
    ej0, ej1 = max(0, sj - rad_cells), min(ny, sj + rad_cells + 1)
    eii, ejj = np.meshgrid(np.arange(ei0, ei1), np.arange(ej0, ej1), indexing="ij")
    near_start = ((eii - si) ** 2 + (ejj - sj) ** 2) * res * res <= escape_range ** 2
    free_check[eii, ejj] |= near_start & (dv[eii, ejj] >= escape_clear)
    labels, _ = ndimage.label(free_check, structure=np.ones((3, 3)))
    start_component = labels[si, sj]

    def goal_disc_free(g):
        """Any landing cell inside tolerance, clear and connected to the start?"""
        pad = int(np.ceil(cfg.goal_tol_xy / res)) + 1
        gi0, gj0 = cell(g[0], g[1])
        i0, i1 = max(0, gi0 - pad), min(nx, gi0 + pad + 1)
        j0, j1 = max(0, gj0 - pad), min(ny, gj0 + pad + 1)
        if i0 >= i1 or j0 >= j1:
            return False
        ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
        cx = origin[0] + (ii + 0.5) * res
        cy = origin[1] + (jj + 0.5) * res
        near = (cx - g[0]) ** 2 + (cy - g[1]) ** 2 <= cfg.goal_tol_xy ** 2
        return bool(np.any(near & (dv[ii, jj] >= specs.radius)
                    & (labels[ii, jj] == start_component)))

    if goal_heading is None:
        goal_heading = scene.road_corridor.end_heading
    # a blocked goal in the believed map degrades to the nearest feasible
    # point walked back along the approach direction, like a real backup
    # planner that must still get as close as it can
    if not goal_disc_free(goal):
        gdir = np.array([np.cos(goal_heading), np.sin(goal_heading)])
        for k in range(1, 15):
            g2 = goal - 0.6 * k * gdir
            if not _inside(origin, res, nx, ny, g2):
                continue
            if goal_disc_free(g2):
                goal = g2
                break
        else:
            return PlanResult(None, np.inf, 0, "no_path")

    # trivial plan: already at the goal
    if (np.hypot(start.x - goal[0], start.y - goal[1]) <= cfg.goal_tol_xy
            and abs(_angdiff(start.heading, goal_heading)) <= cfg.goal_tol_heading):
        traj = _resample(np.array([[start.x, start.y], [start.x, start.y]]),
                         specs.speed, t_steps, dt)
        return PlanResult(traj, 0.0, 0, "found")

    h2d = _heuristic_map(field, dv, specs, cfg, cell(goal[0], goal[1]),
                         start_cell=(si, sj), escape_clear=escape_clear,
                         escape_range=escape_range)
    if not np.isfinite(h2d[si, sj]):
        # no 2-D route from start to goal even ignoring heading: hopeless
        return PlanResult(None, np.inf, 0, "no_path")

    arc = cfg.arc_factor * res
    kappas = np.array([-specs.kappa_max, -specs.kappa_max / 2, 0.0,
                       specs.kappa_max / 2, specs.kappa_max])
    n_prim = len(kappas)

    from math import atan2, cos, hypot, pi, sin

    r_grid = field.combined
    r_max = field.r_max
    ox, oy = float(origin[0]), float(origin[1])
    sx, sy = start.x, start.y
    gx, gy = float(goal[0]), float(goal[1])
    gdx, gdy = cos(goal_heading), sin(goal_heading)
    w_u = cfg.w_u
    kappa_max = specs.kappa_max
    radius = specs.radius
    tol_xy, tol_th = cfg.goal_tol_xy, cfg.goal_tol_heading
    bin_w = 2.0 * pi / cfg.heading_bins
    two_pi = 2.0 * pi
    kappa_list = [float(k) for k in kappas]

    def goal_shot(x, y, th, lateral=0.0):
        """Pure-pursuit rollout onto a goal approach line.

        Marches short constant-curvature steps tracking a point ahead on the
        line through the (possibly laterally offset) goal, which lands aligned
        when geometry allows. Returns (polyline, final heading, cost) or None.
        """
        tx = gx - lateral * gdy
        ty = gy + lateral * gdx
        step = 0.5 * arc
        pts = [(x, y)]
        cx, cy, cth = x, y, th
        prev_d = hypot(gx - cx, gy - cy)
        worse = 0
        cost = 0.0
        for _ in range(int(2.2 * prev_d / step) + 30):
            rel = (tx - cx) * gdx + (ty - cy) * gdy
            lookahead = 1.2 if rel < 2.2 else (0.55 * rel if rel < 4.5 else 2.5)
            back = rel - lookahead if rel > lookahead else 0.0
            ax, ay = tx - back * gdx, ty - back * gdy
            bear = (atan2(ay - cy, ax - cx) - cth + pi) % two_pi - pi
            dist_aim = hypot(ax - cx, ay - cy)
            kap = 2.0 * sin(bear) / (dist_aim if dist_aim > step else step)
            if kap > kappa_max:
                kap = kappa_max
            elif kap < -kappa_max:
                kap = -kappa_max
            cth = cth + kap * step
            cx += step * cos(cth - 0.5 * kap * step)
            cy += step * sin(cth - 0.5 * kap * step)
            i = int((cx - ox) / res)
            j = int((cy - oy) / res)
            if i < 0 or i >= nx or j < 0 or j >= ny:
                return None
            d_c = dv[i, j]
            if d_c < radius and (d_c < escape_clear
                                 or (cx - sx) ** 2 + (cy - sy) ** 2 > escape_range ** 2):
                return None
            gap = r_max - r_grid[i, j]
            cost += step * (1.0 + w_u * gap) if gap > 0 else step
            pts.append((cx, cy))
            d = hypot(gx - cx, gy - cy)
            if d <= 0.5 * tol_xy:
                break
            # crossing the goal plane counts as arrival when inside tolerance
            if (gx - cx) * gdx + (gy - cy) * gdy <= 0.02:
                if d > 0.92 * tol_xy:
                    return None
                break
            worse = worse + 1 if d >= prev_d else 0
            if worse >= 6:
                return None
            prev_d = d
        else:
            return None
        cth = (cth + pi) % two_pi - pi
        if abs((cth - goal_heading + pi) % two_pi - pi) > tol_th:
            return None
        return np.asarray(pts), float(cth), cost

    h2d_list = h2d  # cost-to-goal lower bounds, indexed [i, j]

    def heuristic(x, y, th):
        eu = hypot(gx - x, gy - y)
        i = int((x - ox) / res)
        j = int((y - oy) / res)
        if 0 <= i < nx and 0 <= j < ny:
            h = h2d_list[i, j]
            if h == h:  # not nan
                dist_bound = h if h > eu and h < 1e17 else eu
            else:
                dist_bound = eu
        else:
            dist_bound = eu
        deficit = abs((th - goal_heading + pi) % two_pi - pi) - tol_th
        if deficit > 0:
            turn_bound = deficit / kappa_max
            return dist_bound if dist_bound > turn_bound else turn_bound
        return dist_bound

    # node store: parallel lists addressed by index
    xs, ys, ths = [start.x], [start.y], [start.heading]
    gs, parents, prim_of = [0.0], [-1], [0.0]
    arclen_of = [arc]
    shot_polylines = {}
    start_key = start.key(origin, res, cfg.heading_bins)
    best = {start_key: 0.0}
    open_heap = [(heuristic(start.x, start.y, start.heading), 0, 0)]
    shot_tried = set()
    tie = 1
    expanded = 0
    found_idx = -1
    heappush, heappop = heapq.heappush, heapq.heappop

    while open_heap:
        f, _, idx = heappop(open_heap)
        x, y, th, g = xs[idx], ys[idx], ths[idx], gs[idx]
        ki = int((x - ox) / res)
        kj = int((y - oy) / res)
        kb = int((th + pi) / bin_w) % cfg.heading_bins
        key = (ki, kj, kb)
        if g > best.get(key, np.inf) + 1e-12:
            continue
        d_goal = hypot(x - gx, y - gy)
        if d_goal <= tol_xy and abs((th - goal_heading + pi) % two_pi - pi) <= tol_th:
            found_idx = idx
            break
        expanded += 1
        if expanded >= cfg.n_max:
            return PlanResult(None, np.inf, expanded, "budget_exhausted")

        # landing maneuver: pursuit rollout onto the goal approach line,
        # attempted once per discrete state from a sensible approach geometry
        if d_goal <= 9.0 and key not in shot_tried:
            shot_tried.add(key)
            bear_goal = abs((atan2(gy - y, gx - x) - th + pi) % two_pi - pi)
            align_goal = abs((th - goal_heading + pi) % two_pi - pi)
            if bear_goal < 0.4 * pi and align_goal < 0.5 * pi:
                shot = None
                for lateral in (0.0, 0.3, -0.3):
                    shot = goal_shot(x, y, th, lateral)
                    if shot is not None:
                        break
                if shot is not None:
                    poly, th_end, c_shot = shot
                    ng = g + c_shot
                    end = poly[-1]
                    nkey = (int((end[0] - ox) / res), int((end[1] - oy) / res),
                            int((th_end + pi) / bin_w) % cfg.heading_bins)
                    if ng < best.get(nkey, np.inf) - 1e-12:
                        best[nkey] = ng
                        xs.append(float(end[0]))
                        ys.append(float(end[1]))
                        ths.append(th_end)
                        gs.append(ng)
                        parents.append(idx)
                        prim_of.append(0.0)
                        arclen_of.append(0.0)
                        shot_polylines[len(xs) - 1] = poly
                        heappush(open_heap, (ng, tie, len(xs) - 1))
                        tie += 1

        sin_th, cos_th = sin(th), cos(th)
        for kap in kappa_list:
            if kap == 0.0:
                ex = x + arc * cos_th
                ey = y + arc * sin_th
                nth = th
                mx_ = x + 0.5 * arc * cos_th
                my_ = y + 0.5 * arc * sin_th
            else:
                nth = th + kap * arc
                sin_n, cos_n = sin(nth), cos(nth)
                ex = x + (sin_n - sin_th) / kap
                ey = y - (cos_n - cos_th) / kap
                thm = th + 0.5 * kap * arc
                mx_ = x + (sin(thm) - sin_th) / kap
                my_ = y - (cos(thm) - cos_th) / kap
            mi = int((mx_ - ox) / res)
            mj = int((my_ - oy) / res)
            ei = int((ex - ox) / res)
            ej = int((ey - oy) / res)
            if mi < 0 or mi >= nx or mj < 0 or mj >= ny \
                    or ei < 0 or ei >= nx or ej < 0 or ej >= ny:
                continue
            d_m, d_e = dv[mi, mj], dv[ei, ej]
            if d_m < radius or d_e < radius:
                # inside the inflation band: allowed only while escaping the start
                if d_m < escape_clear or d_e < escape_clear:
                    continue
                if (mx_ - sx) ** 2 + (my_ - sy) ** 2 > escape_range ** 2 \
                        or (ex - sx) ** 2 + (ey - sy) ** 2 > escape_range ** 2:
                    continue
            gap = r_max - r_grid[mi, mj]
            ng = g + arc * (1.0 + w_u * gap) if gap > 0 else g + arc
            nth = (nth + pi) % two_pi - pi
            nkey = (ei, ej, int((nth + pi) / bin_w) % cfg.heading_bins)
            if ng < best.get(nkey, np.inf) - 1e-12:
                best[nkey] = ng
                xs.append(ex)
                ys.append(ey)
                ths.append(nth)
                gs.append(ng)
                parents.append(idx)
                prim_of.append(kap)
                arclen_of.append(arc)
                heappush(open_heap, (ng + heuristic(ex, ey, nth), tie, len(xs) - 1))
                tie += 1

    if found_idx < 0:
        return PlanResult(None, np.inf, expanded, "no_path")

    # walk back the primitive chain, sampling each arc for a smooth polyline
    chain = []
    i = found_idx
    while i >= 0:
        chain.append(i)
        i = parents[i]
    chain.reverse()
    pts = [np.array([xs[chain[0]], ys[chain[0]]])]
    for prev, cur in zip(chain[:-1], chain[1:]):
        if cur in shot_polylines:
            pts.extend(np.asarray(p) for p in shot_polylines[cur][1:])
            continue
        x, y, th = xs[prev], ys[prev], ths[prev]
        kap = prim_of[cur]
        length = arclen_of[cur]
        n_sub = max(4, int(np.ceil(length / (arc / 4.0))))
        for frac in np.linspace(1.0 / n_sub, 1.0, n_sub):
            px, py, _ = _advance(x, y, th, np.array([kap]), length * frac)
            pts.append(np.array([px[0], py[0]]))
    polyline = np.array(pts)
    traj = _resample(polyline, specs.speed, t_steps, dt)
    return PlanResult(traj, float(gs[found_idx]), expanded, "found")


def _angdiff(a, b):
    return (a - b + np.pi) % (2 * np.pi) - np.pi


def _inside(origin, res, nx, ny, p):
    return (origin[0] <= p[0] < origin[0] + nx * res
            and origin[1] <= p[1] < origin[1] + ny * res)


def _child_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, i]).generate_state(1)[0])


def plan_ensemble(scene: Scene, samples_h: list, specs: VehicleSpecs, noise: NoiseParams,
                  m: int = 10, seed: int = 0, cfg: PlannerConfig = PlannerConfig(),
                  alpha: float = 0.1, bandwidth: float = 0.5,
                  intention: IntentionModel = None, t_steps: int = 30,
                  dt: float = 0.1) -> list[PlanResult]:
    """m backup plans under independent perception noise, braking on failure.

    The intention map is shared across the ensemble (it comes from the
    prediction samples); the safety map is rebuilt per perturbed scene.
    """
    if m < 1:
        raise ValidationError("need m >= 1")
    if intention is None:
        intention = intention_density(samples_h, bandwidth)
    # the intention map is a function of the prediction samples only: evaluate
    # its grid once and reuse it under every perturbed safety map
    base_grid = rasterize(scene, cfg.resolution)
    gxs, gys = base_grid.cell_centers()
    intent_grid = intention.log_density_grid(gxs, gys)

    results = []
    for i in range(m):
        noisy = inject_perception_noise(scene, noise, _child_seed(seed, i))
        dist_field = distance_transform(rasterize(noisy, cfg.resolution))
        field = UtilityField(origin=dist_field.origin, resolution=dist_field.resolution,
                             safety=safety_utility(dist_field), intention=intent_grid,
                             alpha=alpha)
        result = plan(noisy, field, specs, cfg=cfg, dist_field=dist_field,
                      goal_heading=scene.road_corridor.end_heading,
                      t_steps=t_steps, dt=dt)
        if result.status != "found":
            traj = braking_trajectory(scene, t_steps=t_steps, dt=dt, a_brake=cfg.a_brake)
            result = PlanResult(traj, result.cost, result.expanded_nodes,
                                result.status, fallback=True)
        results.append(result)
    return results
