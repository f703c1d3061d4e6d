"""Ground-truth utility machinery.

A position's utility combines a safety term (sigmoid of squared obstacle
distance) and a driver-intention term (log of a Gaussian KDE built from
sampled predicted trajectories). Trajectory utility is the mean positional
utility along the path; sample sets reduce to (mean, variance) statistics for
both the prediction set and the planner ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Scene, DistanceField, rasterize, distance_transform, ValidationError
from .trajectory import Trajectory

# r_I is clamped at log(1e-6): the KDE log-density diverges off-support and a
# floor keeps trajectory utilities finite and bounded.
LOG_DENSITY_FLOOR = np.log(1e-6)

DEFAULT_ALPHA = 0.1
DEFAULT_BANDWIDTH = 0.5


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class IntentionModel:
    """Isotropic Gaussian KDE over all points of the sampled predicted trajectories."""

    bandwidth: float
    support: np.ndarray  # (N, 2)

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValidationError("bandwidth must be positive")
        s = np.atleast_2d(np.asarray(self.support, dtype=float))
        if s.shape[0] < 1:
            raise ValidationError("need at least one support point")
        object.__setattr__(self, "support", s)

    def density(self, pts: np.ndarray) -> np.ndarray:
        """KDE density at the (N, 2) query points; integrates to 1 over the plane."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        h2 = self.bandwidth ** 2
        norm = 1.0 / (2.0 * np.pi * h2 * self.support.shape[0])
        out = np.zeros(pts.shape[0])
        # chunked to bound the (queries x support) temporary
        step = max(1, int(2_000_000 / max(1, self.support.shape[0])))
        for i in range(0, pts.shape[0], step):
            block = pts[i:i + step]
            d2 = ((block[:, None, :] - self.support[None, :, :]) ** 2).sum(axis=2)
            out[i:i + step] = norm * np.exp(-d2 / (2.0 * h2)).sum(axis=1)
        return out

    def log_density(self, pts: np.ndarray) -> np.ndarray:
        """Floored log density (the intention utility r_I)."""
        return np.maximum(np.log(np.maximum(self.density(pts), 1e-300)), LOG_DENSITY_FLOOR)

    def log_density_grid(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Floored log density on a cell-center grid.

        Exact: outside a margin where every kernel provably falls below the
        floor, cells are set to the floor without evaluation.
        """
        out = np.full((len(xs), len(ys)), LOG_DENSITY_FLOOR)
        peak = 1.0 / (2.0 * np.pi * self.bandwidth ** 2)
        gap = max(2.0 * (np.log(peak) - LOG_DENSITY_FLOOR), 0.0)
        margin = self.bandwidth * (np.sqrt(gap) + 1.0)
        lo = self.support.min(axis=0) - margin
        hi = self.support.max(axis=0) + margin
        i0, i1 = np.searchsorted(xs, lo[0]), np.searchsorted(xs, hi[0])
        j0, j1 = np.searchsorted(ys, lo[1]), np.searchsorted(ys, hi[1])
        if i0 >= i1 or j0 >= j1:
            return out
        gx, gy = np.meshgrid(xs[i0:i1], ys[j0:j1], indexing="ij")
        vals = self.log_density(np.column_stack([gx.ravel(), gy.ravel()]))
        out[i0:i1, j0:j1] = vals.reshape(i1 - i0, j1 - j0)
        return out


def intention_density(samples: list[Trajectory], bandwidth: float) -> IntentionModel:
    """KDE over every point of every sampled trajectory."""
    if not samples:
        raise ValidationError("need at least one sampled trajectory")
    pts = np.vstack([s.xy for s in samples])
    return IntentionModel(bandwidth=bandwidth, support=pts)


def safety_utility(dist_field: DistanceField, k: float = 1.0, d0: float = 0.0) -> np.ndarray:
    """Elementwise sigmoid(k * (d^2 - d0^2)); the defaults are the plain squared-distance sigmoid."""
    d = dist_field.values
    return sigmoid(k * (d * d - d0 * d0))


@dataclass(frozen=True)
class UtilityField:
    """Discretized utility map: combined value is safety + alpha * intention."""

    origin: np.ndarray
    resolution: float
    safety: np.ndarray     # in (0, 1)
    intention: np.ndarray  # floored log density
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(2))

    @property
    def combined(self) -> np.ndarray:
        return self.safety + self.alpha * self.intention

    @property
    def r_max(self) -> float:
        """Upper bound of the combined value over the field."""
        return 1.0 + self.alpha * float(self.intention.max())

    def interpolate(self, pts: np.ndarray, return_clamped: bool = False):
        """Bilinear interpolation of the combined value at world points.

        Points outside the field clamp to the boundary cell; the clamp count is
        reported when return_clamped is set.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        vals = self.combined
        nx, ny = vals.shape
        # continuous cell coordinates relative to cell centers
        fx = (pts[:, 0] - self.origin[0]) / self.resolution - 0.5
        fy = (pts[:, 1] - self.origin[1]) / self.resolution - 0.5
        clamped = int(np.sum((fx < 0) | (fx > nx - 1) | (fy < 0) | (fy > ny - 1)))
        fx = np.clip(fx, 0.0, nx - 1.0)
        fy = np.clip(fy, 0.0, ny - 1.0)
        ix = np.minimum(fx.astype(int), nx - 2) if nx > 1 else np.zeros(len(fx), dtype=int)
        iy = np.minimum(fy.astype(int), ny - 2) if ny > 1 else np.zeros(len(fy), dtype=int)
        tx = fx - ix
        ty = fy - iy
        if nx == 1:
            tx = np.zeros_like(tx)
        if ny == 1:
            ty = np.zeros_like(ty)
        ix1 = np.minimum(ix + 1, nx - 1)
        iy1 = np.minimum(iy + 1, ny - 1)
        v = (vals[ix, iy] * (1 - tx) * (1 - ty)
             + vals[ix1, iy] * tx * (1 - ty)
             + vals[ix, iy1] * (1 - tx) * ty
             + vals[ix1, iy1] * tx * ty)
        if return_clamped:
            return v, clamped
        return v


def build_utility_field(scene: Scene, samples: list[Trajectory], alpha: float = DEFAULT_ALPHA,
                        resolution: float = 0.1, bandwidth: float = DEFAULT_BANDWIDTH,
                        k: float = 1.0, d0: float = 0.0,
                        dist_field: DistanceField = None,
                        intention: IntentionModel = None) -> UtilityField:
    """Compose the safety map of a scene with the intention map of sampled predictions.

    A precomputed distance field or intention model may be passed to share work
    across the planner ensemble (they must match the scene / samples).
    """
    if alpha < 0:
        raise ValidationError("alpha must be nonnegative")
    if dist_field is None:
        dist_field = distance_transform(rasterize(scene, resolution))
    safety = safety_utility(dist_field, k=k, d0=d0)
    if intention is None:
        intention = intention_density(samples, bandwidth)
    nx, ny = safety.shape
    xs = dist_field.origin[0] + (np.arange(nx) + 0.5) * dist_field.resolution
    ys = dist_field.origin[1] + (np.arange(ny) + 0.5) * dist_field.resolution
    intent = intention.log_density_grid(xs, ys)
    return UtilityField(origin=dist_field.origin, resolution=dist_field.resolution,
                        safety=safety, intention=intent, alpha=alpha)


def trajectory_utility(field: UtilityField, traj: Trajectory,
                       return_clamped: bool = False):
    """Mean positional utility along the trajectory (bilinear between cells)."""
    if len(traj) == 0:
        raise ValidationError("empty trajectory")
    vals, clamped = field.interpolate(traj.xy, return_clamped=True)
    u = float(np.mean(vals))
    if return_clamped:
        return u, clamped
    return u


@dataclass(frozen=True)
class UtilityStats:
    """The decision currency: utility mean/variance of predictions and plans."""

    mu_h: float
    var_h: float
    mu_p: float
    var_p: float

    def __post_init__(self):
        if self.var_h < 0 or self.var_p < 0:
            raise ValidationError("variances must be nonnegative")

    def as_vector(self) -> np.ndarray:
        return np.array([self.mu_h, self.var_h, self.mu_p, self.var_p])

    @staticmethod
    def from_vector(v) -> "UtilityStats":
        v = np.asarray(v, dtype=float).reshape(4)
        return UtilityStats(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    def to_jsonable(self) -> dict:
        return {"mu_h": self.mu_h, "var_h": self.var_h, "mu_p": self.mu_p, "var_p": self.var_p}


def utility_stats(field: UtilityField, samples_h: list[Trajectory],
                  samples_p: list[Trajectory]) -> UtilityStats:
    """Population mean/variance of per-trajectory utilities for both sample sets.

    Singleton sets legitimately report variance 0.
    """
    if not samples_h or not samples_p:
        raise ValidationError("both sample sets must be nonempty")
    u_h = np.array([trajectory_utility(field, t) for t in samples_h])
    u_p = np.array([trajectory_utility(field, t) for t in samples_p])
    return UtilityStats(mu_h=float(u_h.mean()), var_h=float(u_h.var()),
                        mu_p=float(u_p.mean()), var_p=float(u_p.var()))


def field_to_svg(field: UtilityField, path) -> None:
    """Three-panel SVG dump (safety, intention, combined) for quick inspection."""
    panels = [("safety", field.safety, 0.0, 1.0),
              ("intention", field.intention, float(field.intention.min()),
               float(field.intention.max()) + 1e-9),
              ("combined", field.combined, float(field.combined.min()),
               float(field.combined.max()) + 1e-9)]
    nx, ny = field.safety.shape
    cell = max(1.0, 360.0 / max(nx, ny))
    w, h = nx * cell, ny * cell
    pad = 24
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{3 * w + 4 * pad:.0f}" height="{h + 2 * pad + 16:.0f}">']
    for p, (name, vals, lo, hi) in enumerate(panels):
        x0 = pad + p * (w + pad)
        parts.append(f'<text x="{x0:.0f}" y="{pad - 8:.0f}" font-size="12">{name}</text>')
        norm = (vals - lo) / (hi - lo if hi > lo else 1.0)
        # viridis-ish two-stop ramp, downsampled to <= 90 columns per panel
        step = max(1, nx // 90, ny // 90)
        for ix in range(0, nx, step):
            for iy in range(0, ny, step):
                v = float(norm[ix, iy])
                r, g, b = int(68 + v * 185), int(1 + v * 220), int(84 + v * (-50))
                parts.append(
                    f'<rect x="{x0 + ix * cell:.1f}" y="{pad + (ny - 1 - iy) * cell:.1f}" '
                    f'width="{cell * step:.1f}" height="{cell * step:.1f}" '
                    f'fill="rgb({r},{g},{b})"/>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
