"""Feature extraction and the trajectory/utility regressor.

Features are ego-centric: the past track and goal direction are rotated into
the frame of the ego pose at the decision instant, and a small occupancy patch
is sampled ahead of the vehicle, standing in for the camera view. The model
regresses a trajectory distribution, the four utility statistics, and a
displacement-error estimate in a single pass.

``CarpalPredictor`` wraps the training loop behind a scikit-learn style
``fit`` / ``predict`` / ``get_params`` surface so the regressor composes with
generic model-selection tooling; the spec-level operations (``featurize``,
``train``) remain plain functions.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .nn import AdamState, HEAD_SLICES, LossWeights, MlpModel, loss_and_raw_grad
from .scene import Scenario, ValidationError, seeded_rng
from .trajectory import PolyCoeffs, Trajectory, TrajectoryDistribution, project

LOCAL_CELLS = 16         # F: local occupancy patch is F x F
LOCAL_RESOLUTION = 0.5   # meters per patch cell
LOCAL_EXTENT = LOCAL_CELLS * LOCAL_RESOLUTION  # 8 m forward window

CHECKPOINT_VERSION = 1


def feature_dim(t_past: int) -> int:
    return 2 * t_past + 4 + LOCAL_CELLS * LOCAL_CELLS + 2


def world_to_ego(pts: np.ndarray, position: np.ndarray, heading: float) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    c, s = np.cos(heading), np.sin(heading)
    rel = pts - position
    return np.column_stack([c * rel[:, 0] + s * rel[:, 1],
                            -s * rel[:, 0] + c * rel[:, 1]])


def ego_to_world(pts: np.ndarray, position: np.ndarray, heading: float) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    c, s = np.cos(heading), np.sin(heading)
    return np.column_stack([c * pts[:, 0] - s * pts[:, 1],
                            s * pts[:, 0] + c * pts[:, 1]]) + position


@dataclass(frozen=True)
class FeatureVector:
    """Named feature blocks; the model consumes the concatenation."""

    past_xy: np.ndarray    # (2 * T_p,) ego-frame past positions, chronological
    kinematics: np.ndarray  # speed, yaw_rate, accel_cmd, steer_cmd
    local_map: np.ndarray  # (F*F,) occupancy of the forward window, ix-major
    goal_hint: np.ndarray  # unit vector toward the goal, ego frame

    def vector(self) -> np.ndarray:
        return np.concatenate([self.past_xy, self.kinematics, self.local_map, self.goal_hint])


def featurize(scenario: Scenario, t_past: int = 20) -> FeatureVector:
    """Deterministic ego-frame features of a scenario at its decision instant."""
    past = scenario.past
    if len(past) != t_past:
        raise ValidationError(f"scenario past has {len(past)} samples, expected {t_past}")
    if abs(past.times[-1]) > 1e-9:
        raise ValidationError("past trajectory must end at t=0")
    ego = scenario.scene.ego
    past_xy = world_to_ego(past.xy, ego.position, ego.heading).ravel()
    kin = np.array([ego.speed, ego.yaw_rate, ego.accel_cmd, ego.steer_cmd])

    # forward occupancy window: x in [0, 8], y in [-4, 4] in the ego frame
    xs = (np.arange(LOCAL_CELLS) + 0.5) * LOCAL_RESOLUTION
    ys = (np.arange(LOCAL_CELLS) + 0.5) * LOCAL_RESOLUTION - LOCAL_EXTENT / 2.0
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centers = ego_to_world(np.column_stack([gx.ravel(), gy.ravel()]), ego.position, ego.heading)
    local = scenario.scene.occupied(centers).astype(float)

    to_goal = world_to_ego(scenario.scene.goal[None, :], ego.position, ego.heading)[0]
    norm = np.linalg.norm(to_goal)
    hint = to_goal / norm if norm > 1e-9 else np.zeros(2)
    return FeatureVector(past_xy=past_xy, kinematics=kin, local_map=local, goal_hint=hint)


@dataclass
class TrainingSet:
    """Supervised triples: features, observed-future coefficients, utility statistics."""

    features: np.ndarray      # (N, D)
    coeffs: np.ndarray        # (N, 6) projection of the observed future
    stats: np.ndarray = None  # (N, 4) ground-truth mu_h, var_h, mu_p, var_p

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.features.shape[0] != self.coeffs.shape[0] or self.features.shape[0] == 0:
            raise ValidationError("empty or mismatched training set")
        if self.stats is not None:
            self.stats = np.asarray(self.stats, dtype=float)
            if self.stats.shape != (self.features.shape[0], 4):
                raise ValidationError("stats must be (N, 4)")

    def __len__(self):
        return self.features.shape[0]


def _displacement_error(raw: np.ndarray, coeff_target: np.ndarray, horizon: float) -> np.ndarray:
    """L2 gap between predicted mean and observed future at the horizon endpoint."""
    basis = np.array([1.0, horizon, horizon * horizon])
    px = raw[:, 0:3] @ basis
    py = raw[:, 3:6] @ basis
    tx = coeff_target[:, 0:3] @ basis
    ty = coeff_target[:, 3:6] @ basis
    return np.hypot(px - tx, py - ty)


def train(model: MlpModel, dataset: TrainingSet, weights: LossWeights, epochs: int,
          seed: int, lr: float = 1e-3, batch_size: int = 64, horizon: float = 3.0,
          weight_decay: float = 0.0, feature_noise: float = 0.0):
    """Mini-batch Adam over the five losses; deterministic per seed.

    feature_noise adds zero-mean Gaussian jitter to the inputs of every batch,
    regularizing against memorization of the finite scenario set.
    Returns the trained model (updated in place) and per-epoch loss curves.
    """
    if len(dataset) == 0:
        raise ValidationError("empty dataset")
    needs_stats = weights.mu_h or weights.var_h or weights.mu_p or weights.var_p
    if needs_stats and dataset.stats is None:
        raise ValidationError("dataset has no utility statistics but stat losses are enabled")
    stats = dataset.stats if dataset.stats is not None else np.zeros((len(dataset), 4))
    adam = AdamState.for_model(model, lr=lr, weight_decay=weight_decay)
    rng = seeded_rng(seed, "train")
    curves = []
    n = len(dataset)
    for _epoch in range(epochs):
        perm = rng.permutation(n)
        totals = []
        parts_acc = {}
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            feats = dataset.features[idx]
            if feature_noise > 0.0:
                feats = feats + rng.normal(0.0, feature_noise, size=feats.shape)
            raw, cache = model.forward_raw(feats)
            err_target = _displacement_error(raw, dataset.coeffs[idx], horizon)
            total, parts, dRaw = loss_and_raw_grad(
                raw, dataset.coeffs[idx], stats[idx], err_target, weights)
            grads = model.backward(cache, dRaw)
            adam.update(model, grads)
            totals.append(total)
            for k, v in parts.items():
                parts_acc.setdefault(k, []).append(v)
        entry = {"total": float(np.mean(totals))}
        entry.update({k: float(np.mean(v)) for k, v in parts_acc.items()})
        curves.append(entry)
    return model, curves


class CarpalPredictor:
    """Multi-task regressor: trajectory distribution + utility statistics + error estimate.

    Estimator-style interface: ``fit(X, y)`` with ``y`` columns
    ``[coeffs(6), mu_h, var_h, mu_p, var_p]``, ``predict(X)`` returning the
    interpreted 17-column output. Construction parameters round-trip through
    ``get_params`` / ``set_params``.
    """

    def __init__(self, t_past: int = 20, trunk_dims: tuple = (128, 64),
                 utility_hidden: int = 16, lr: float = 1e-3, batch_size: int = 64,
                 pretrain_epochs: int = 200, epochs: int = 400, horizon: float = 3.0,
                 dt: float = 0.1, seed: int = 0, loss_weights: dict = None,
                 weight_decay: float = 1e-5, feature_noise: float = 0.0):
        self.t_past = t_past
        self.trunk_dims = tuple(trunk_dims)
        self.utility_hidden = utility_hidden
        self.lr = lr
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.epochs = epochs
        self.horizon = horizon
        self.dt = dt
        self.seed = seed
        self.loss_weights = dict(loss_weights) if loss_weights else {}
        self.weight_decay = weight_decay
        self.feature_noise = feature_noise
        self.model_ = None
        self.curves_ = None
        self.var_scale_ = np.ones(6)  # held-out variance calibration

    # -- estimator plumbing ------------------------------------------------
    _PARAM_NAMES = ("t_past", "trunk_dims", "utility_hidden", "lr", "batch_size",
                    "pretrain_epochs", "epochs", "horizon", "dt", "seed", "loss_weights",
                    "weight_decay", "feature_noise")

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params) -> "CarpalPredictor":
        for k, v in params.items():
            if k not in self._PARAM_NAMES:
                raise ValidationError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def _validate_features(self, X: np.ndarray, name: str = "X") -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        want = feature_dim(self.t_past)
        if X.shape[1] != want:
            raise ValidationError(f"{name} must have {want} columns, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValidationError(f"{name} contains non-finite values")
        return X

    # -- training ----------------------------------------------------------
    def fit(self, X: np.ndarray, y: np.ndarray) -> "CarpalPredictor":
        X = self._validate_features(X)
        y = np.asarray(y, dtype=float)
        if y.ndim != 2 or y.shape[1] != 10 or y.shape[0] != X.shape[0]:
            raise ValidationError("y must be (N, 10): 6 coefficients + 4 statistics")
        weights = LossWeights(**self.loss_weights) if self.loss_weights else LossWeights()
        self.model_ = MlpModel.create(X.shape[1], seed=self.seed,
                                      trunk_dims=self.trunk_dims,
                                      utility_hidden=self.utility_hidden)
        # hold out a slice for variance calibration
        n_hold = max(1, int(0.15 * X.shape[0])) if X.shape[0] >= 8 else 0
        fit_sl = slice(0, X.shape[0] - n_hold) if n_hold else slice(None)
        dataset = TrainingSet(X[fit_sl], y[fit_sl, :6], y[fit_sl, 6:])
        curves = []
        if self.pretrain_epochs > 0:
            pre = LossWeights(nll=weights.nll, mu_h=0.0, var_h=0.0, mu_p=0.0, var_p=0.0,
                              pred_error=0.0)
            _, c = train(self.model_, dataset, pre, self.pretrain_epochs, self.seed,
                         lr=self.lr, batch_size=self.batch_size, horizon=self.horizon,
                         weight_decay=self.weight_decay, feature_noise=self.feature_noise)
            curves.extend(c)
        _, c = train(self.model_, dataset, weights, self.epochs, self.seed + 1,
                     lr=self.lr, batch_size=self.batch_size, horizon=self.horizon,
                     weight_decay=self.weight_decay, feature_noise=self.feature_noise)
        curves.extend(c)
        self.curves_ = curves
        if n_hold:
            self.calibrate_variances(X[X.shape[0] - n_hold:], y[X.shape[0] - n_hold:, :6])
        return self

    def calibrate_variances(self, X_holdout: np.ndarray, coeffs: np.ndarray) -> None:
        """Scale the trajectory variances against held-out residuals.

        The median z-square calibrates the bulk of the distribution and is
        robust to the rare heavy-tail maneuvers.
        """
        out = self.model_.forward(self._validate_features(X_holdout, "X_holdout"))
        z2 = (np.asarray(coeffs) - out[:, :6]) ** 2 / out[:, 6:12]
        # median of chi^2_1 is ~0.4549: unit z-scores give median z^2 at that value
        self.var_scale_ = np.clip(np.median(z2, axis=0) / 0.4549, 0.25, 400.0)

    def _require_fitted(self):
        if self.model_ is None:
            raise ValidationError("predictor is not fitted")

    # -- inference ---------------------------------------------------------
    def predict(self, X: np.ndarray) -> np.ndarray:
        """Interpreted outputs (N, 17); variance/error columns are softplus-positive."""
        self._require_fitted()
        return self.model_.forward(self._validate_features(X))

    def predict_distribution(self, x: np.ndarray) -> TrajectoryDistribution:
        out = self.predict(np.atleast_2d(x))[0]
        mean = PolyCoeffs(out[0:3], out[3:6])
        return TrajectoryDistribution(mean=mean,
                                      log_var=np.log(out[6:12] * self.var_scale_),
                                      horizon=self.horizon)

    def predict_stats(self, x: np.ndarray):
        from .utility import UtilityStats
        out = self.predict(np.atleast_2d(x))[0]
        return UtilityStats(float(out[12]), float(out[13]), float(out[14]), float(out[15]))

    def predict_error(self, x: np.ndarray) -> float:
        return float(self.predict(np.atleast_2d(x))[0, 16])

    # -- persistence ---------------------------------------------------------
    def to_json(self) -> str:
        self._require_fitted()
        payload = {
            "checkpoint_version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "params": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.get_params().items()},
            "model": self.model_.to_jsonable(),
            "var_scale": self.var_scale_.tolist(),
        }
        return json.dumps(payload)

    @staticmethod
    def load_json(blob: str) -> "CarpalPredictor":
        payload = json.loads(blob)
        if payload.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValidationError("unsupported checkpoint version")
        params = dict(payload["params"])
        params["trunk_dims"] = tuple(params["trunk_dims"])
        pred = CarpalPredictor(**params)
        pred.model_ = MlpModel.from_jsonable(payload["model"])
        pred.var_scale_ = np.asarray(payload.get("var_scale", np.ones(6)), dtype=float)
        return pred

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @staticmethod
    def load(path) -> "CarpalPredictor":
        with open(path) as f:
            return CarpalPredictor.load_json(f.read())
