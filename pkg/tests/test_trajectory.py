import numpy as np
import pytest

from carpal.trajectory import (
    PolyCoeffs,
    Trajectory,
    TrajectoryDistribution,
    TrajectoryError,
    nll,
    project,
    reconstruct,
    sample,
)


def make_traj(ts, xs, ys):
    return Trajectory(np.column_stack([ts, xs, ys]), dt=float(ts[1] - ts[0]))


def test_trajectory_validation():
    ts = np.arange(5) * 0.1
    with pytest.raises(TrajectoryError):
        Trajectory(np.column_stack([ts[::-1], ts, ts]), dt=0.1)
    with pytest.raises(TrajectoryError):
        Trajectory(np.array([[0.0, 0.0, 0.0]]), dt=0.1)


def test_project_exact_quadratic():
    ts = 0.1 * np.arange(1, 31)
    xs = 1.0 + 2.0 * ts + 3.0 * ts**2
    traj = make_traj(ts, xs, np.zeros_like(ts))
    c = project(traj)
    assert np.allclose(c.ax, [1.0, 2.0, 3.0], atol=1e-9)
    assert np.allclose(c.ay, [0.0, 0.0, 0.0], atol=1e-9)


def test_project_constant():
    ts = 0.1 * np.arange(1, 11)
    traj = make_traj(ts, np.full_like(ts, 5.0), np.full_like(ts, 5.0))
    c = project(traj)
    assert np.allclose(c.ax, [5.0, 0.0, 0.0], atol=1e-9)
    assert np.allclose(c.ay, [5.0, 0.0, 0.0], atol=1e-9)


def test_project_matches_normal_equations_oracle():
    rng = np.random.default_rng(7)
    ts = 0.1 * np.arange(1, 31)
    A = np.column_stack([np.ones_like(ts), ts, ts**2])
    for _ in range(20):
        true = rng.normal(size=(3, 2))
        xy = A @ true + rng.normal(0.0, 0.01, size=(len(ts), 2))
        traj = Trajectory(np.column_stack([ts, xy]), dt=0.1)
        c = project(traj)
        # independent oracle: solve the normal equations directly
        oracle = np.linalg.solve(A.T @ A, A.T @ xy)
        assert np.allclose(c.ax, oracle[:, 0], atol=1e-8)
        assert np.allclose(c.ay, oracle[:, 1], atol=1e-8)


def test_reconstruct_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(25):
        c = PolyCoeffs(rng.normal(size=3), rng.normal(size=3))
        back = project(reconstruct(c, horizon=3.0, dt=0.1))
        assert np.allclose(back.as_vector(), c.as_vector(), atol=1e-9)


def test_reconstruct_values():
    zero = reconstruct(PolyCoeffs([0, 0, 0], [0, 0, 0]), horizon=3.0, dt=0.1)
    assert np.allclose(zero.xy, 0.0)
    lin = reconstruct(PolyCoeffs([0, 1, 0], [0, 0, 0]), horizon=3.0, dt=0.1)
    assert abs(lin.xy[-1, 0] - 3.0) < 1e-12
    assert abs(lin.times[-1] - 3.0) < 1e-12


def test_sample_collapses_to_mean_at_variance_floor():
    mean = PolyCoeffs([1.0, 0.5, -0.2], [0.0, 1.0, 0.1])
    dist = TrajectoryDistribution(mean, log_var=np.full(6, -1e4), horizon=3.0)
    trajs = sample(dist, n=5, seed=11)
    ref = reconstruct(mean, 3.0, 0.1)
    for t in trajs:
        assert np.array_equal(t.xy, ref.xy)


def test_sample_is_deterministic_and_mean_unbiased():
    dist = TrajectoryDistribution(PolyCoeffs([0, 0, 0], [0, 0, 0]),
                                  log_var=np.zeros(6), horizon=3.0)
    a = sample(dist, n=3, seed=42)
    b = sample(dist, n=3, seed=42)
    for ta, tb in zip(a, b):
        assert np.array_equal(ta.points, tb.points)
    # CLT check on the constant coefficient: mean of 1e4 draws within 3*sigma/100
    trajs = sample(dist, n=10_000, seed=5)
    c0 = np.array([project(t).ax[0] for t in trajs])
    assert abs(c0.mean()) < 3.0 / 100.0
    assert abs(c0.std() - 1.0) < 0.05


def test_nll_at_mode_with_unit_variances():
    mean = PolyCoeffs([1, 2, 3], [4, 5, 6])
    dist = TrajectoryDistribution(mean, log_var=np.zeros(6), horizon=3.0)
    obs = reconstruct(mean, 3.0, 0.1)
    expected = 6 * 0.5 * np.log(2 * np.pi)  # 5.5136...
    assert abs(nll(dist, obs) - expected) < 1e-9
    doubled = TrajectoryDistribution(mean, log_var=np.full(6, np.log(2.0)), horizon=3.0)
    assert abs(nll(doubled, obs) - nll(dist, obs) - 6 * 0.5 * np.log(2.0)) < 1e-9


def test_nll_matches_gaussian_pdf_oracle():
    rng = np.random.default_rng(19)
    for _ in range(10):
        mu = rng.normal(size=6)
        log_var = rng.normal(scale=0.5, size=6)
        dist = TrajectoryDistribution(PolyCoeffs(mu[:3], mu[3:]), log_var, horizon=3.0)
        obs = reconstruct(PolyCoeffs.from_vector(mu + rng.normal(size=6) * 0.3), 3.0, 0.1)
        c = project(obs).as_vector()
        var = np.exp(log_var)
        # independent oracle: -log of the product of univariate normal densities
        dens = np.exp(-((c - mu) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)
        assert abs(nll(dist, obs) + np.sum(np.log(dens))) < 1e-9


def test_nll_minimized_at_mean():
    rng = np.random.default_rng(23)
    mu = rng.normal(size=6)
    dist = TrajectoryDistribution(PolyCoeffs(mu[:3], mu[3:]),
                                  rng.normal(scale=0.3, size=6), horizon=3.0)
    base = nll(dist, reconstruct(PolyCoeffs.from_vector(mu), 3.0, 0.1))
    for _ in range(50):
        perturbed = mu + rng.normal(scale=0.2, size=6)
        val = nll(dist, reconstruct(PolyCoeffs.from_vector(perturbed), 3.0, 0.1))
        assert val >= base - 1e-12
