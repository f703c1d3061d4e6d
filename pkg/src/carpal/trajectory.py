"""Polynomial-basis trajectories and Gaussian distributions over their coefficients.

A trajectory is a uniformly sampled sequence of (t, x, y) points. Predictions
live in coefficient space: each axis is fit with a degree-2 polynomial, and a
diagonal Gaussian over the 6 coefficients represents the predictive
distribution. Sampling a distribution and reconstructing on the horizon grid
yields the trajectory sample sets consumed by the utility engine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Floor on coefficient variances inside density computations; keeps the
# log-density finite when a head collapses.
VAR_FLOOR = 1e-6


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled planar path: points is an (N, 3) array of (t, x, y)."""

    points: np.ndarray
    dt: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise TrajectoryError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 2:
            raise TrajectoryError("trajectory needs at least 2 points")
        steps = np.diff(pts[:, 0])
        if not np.all(steps > 0):
            raise TrajectoryError("timestamps must be strictly increasing")
        if not np.allclose(steps, self.dt, rtol=0, atol=1e-9):
            raise TrajectoryError("timestamps must be uniformly spaced by dt")
        object.__setattr__(self, "points", pts)

    @property
    def times(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, 1:3]

    def __len__(self) -> int:
        return self.points.shape[0]

    @staticmethod
    def from_xy(xy: np.ndarray, dt: float, t0: float = None) -> "Trajectory":
        """Build from an (N, 2) position array; timestamps start at t0 (default dt)."""
        xy = np.asarray(xy, dtype=float)
        if t0 is None:
            t0 = dt
        ts = t0 + dt * np.arange(xy.shape[0])
        return Trajectory(np.column_stack([ts, xy]), dt)

    def to_jsonable(self) -> dict:
        return {"dt": self.dt, "points": [[float(v) for v in row] for row in self.points]}

    @staticmethod
    def from_jsonable(obj: dict) -> "Trajectory":
        return Trajectory(np.asarray(obj["points"], dtype=float), float(obj["dt"]))


@dataclass(frozen=True)
class PolyCoeffs:
    """Degree-2 coefficients per axis: x(t) = ax[0] + ax[1] t + ax[2] t^2."""

    ax: np.ndarray
    ay: np.ndarray

    def __post_init__(self):
        ax = np.asarray(self.ax, dtype=float).reshape(3)
        ay = np.asarray(self.ay, dtype=float).reshape(3)
        if not (np.all(np.isfinite(ax)) and np.all(np.isfinite(ay))):
            raise TrajectoryError("coefficients must be finite")
        object.__setattr__(self, "ax", ax)
        object.__setattr__(self, "ay", ay)

    def as_vector(self) -> np.ndarray:
        """Flat 6-vector (ax then ay)."""
        return np.concatenate([self.ax, self.ay])

    @staticmethod
    def from_vector(v: np.ndarray) -> "PolyCoeffs":
        v = np.asarray(v, dtype=float).reshape(6)
        return PolyCoeffs(v[:3], v[3:])


@dataclass(frozen=True)
class TrajectoryDistribution:
    """Diagonal Gaussian over the 6 polynomial coefficients."""

    mean: PolyCoeffs
    log_var: np.ndarray
    horizon: float

    def __post_init__(self):
        lv = np.asarray(self.log_var, dtype=float).reshape(6)
        if not np.all(np.isfinite(lv)):
            raise TrajectoryError("log_var must be finite")
        if self.horizon <= 0:
            raise TrajectoryError("horizon must be positive")
        object.__setattr__(self, "log_var", lv)


def _basis(ts: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones_like(ts), ts, ts * ts])


def project(traj: Trajectory) -> PolyCoeffs:
    """Least-squares fit of x(t), y(t) to degree-2 polynomials on the trajectory's grid."""
    if len(traj) < 3:
        raise TrajectoryError("projection needs at least 3 points")
    A = _basis(traj.times)
    sol, _, rank, _ = np.linalg.lstsq(A, traj.xy, rcond=None)
    if rank < 3:
        raise TrajectoryError("degenerate time grid for projection")
    return PolyCoeffs(sol[:, 0], sol[:, 1])


def reconstruct(coeffs: PolyCoeffs, horizon: float, dt: float) -> Trajectory:
    """Evaluate the polynomials on the uniform grid t = dt, 2*dt, ..., horizon."""
    if dt <= 0 or horizon < dt:
        raise TrajectoryError("need horizon >= dt > 0")
    n = int(round(horizon / dt))
    ts = dt * np.arange(1, n + 1)
    A = _basis(ts)
    xy = np.column_stack([A @ coeffs.ax, A @ coeffs.ay])
    return Trajectory(np.column_stack([ts, xy]), dt)


def sample(dist: TrajectoryDistribution, n: int, seed: int, dt: float = 0.1) -> list[Trajectory]:
    """Draw n trajectories from independent coefficient draws, deterministic per seed."""
    if n < 1:
        raise TrajectoryError("need n >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x54524A]))
    std = np.sqrt(np.exp(dist.log_var))
    mu = dist.mean.as_vector()
    draws = mu + rng.standard_normal((n, 6)) * std
    return [reconstruct(PolyCoeffs.from_vector(v), dist.horizon, dt) for v in draws]


def nll(dist: TrajectoryDistribution, observed: Trajectory) -> float:
    """Negative log density of the observed trajectory's coefficients under the Gaussian."""
    span = observed.times[-1] - observed.times[0]
    if span + observed.dt < dist.horizon - 1e-9:
        raise TrajectoryError("observed trajectory does not span the distribution horizon")
    c = project(observed).as_vector()
    mu = dist.mean.as_vector()
    var = np.maximum(np.exp(dist.log_var), VAR_FLOOR)
    return float(np.sum(0.5 * np.log(2.0 * np.pi * var) + (c - mu) ** 2 / (2.0 * var)))
