"""Intervention decision logic and the task-agnostic baselines.

The core rule compares the expected utility of predicted driver behavior with
the backup-plan ensemble; when the planner looks better AND both utility
uncertainties are below threshold, control is taken over. High uncertainty
demotes the takeover to a warning, which projects to 0 in the binary setting.
Also provides the Gaussian entropy bound on the overall system utility
uncertainty and two baselines: a constant-velocity rollout check (VBP) and an
accuracy-gated variant of it (ABP).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .predictor import CarpalPredictor, ego_to_world, featurize
from .scene import Scenario, ValidationError
from .trajectory import reconstruct
from .utility import UtilityStats

NO_ACTION = "NoAction"
WARN = "Warn"
INTERVENE = "Intervene"

DEFAULT_ETA = 0.01
DEFAULT_D_S = 1.6  # near-collision clearance threshold, meters


@dataclass(frozen=True)
class DecisionThresholds:
    eta_h: float = DEFAULT_ETA
    eta_p: float = DEFAULT_ETA

    def __post_init__(self):
        if self.eta_h <= 0 or self.eta_p <= 0:
            raise ValidationError("variance thresholds must be positive")

    @staticmethod
    def unified(eta: float) -> "DecisionThresholds":
        return DecisionThresholds(eta_h=eta, eta_p=eta)


@dataclass(frozen=True)
class DecisionOutcome:
    action: str
    rationale: UtilityStats

    def __post_init__(self):
        if self.action not in (NO_ACTION, WARN, INTERVENE):
            raise ValidationError(f"unknown action {self.action!r}")

    @property
    def binary(self) -> int:
        """Warnings do not take control: only Intervene projects to 1."""
        return 1 if self.action == INTERVENE else 0

    def to_jsonable(self) -> dict:
        return {"action": self.action, "binary": self.binary,
                "rationale": self.rationale.to_jsonable()}


def decide(stats: UtilityStats, thresholds: DecisionThresholds) -> DecisionOutcome:
    """Rule-based takeover decision from the four utility statistics.

    Intervene only when the planner's expected utility strictly beats the
    driver's and both variances clear their thresholds; otherwise warn (if the
    planner looked better) or do nothing.
    """
    v = stats.as_vector()
    if not np.all(np.isfinite(v)):
        raise ValidationError("utility statistics must be finite")
    if stats.mu_h < stats.mu_p:
        if stats.var_h < thresholds.eta_h and stats.var_p < thresholds.eta_p:
            return DecisionOutcome(INTERVENE, stats)
        return DecisionOutcome(WARN, stats)
    return DecisionOutcome(NO_ACTION, stats)


@dataclass(frozen=True)
class EntropyBound:
    h_h: float   # nats
    h_p: float   # nats
    delta_u: float

    @property
    def bound(self) -> float:
        return self.h_h + self.h_p


def entropy_bound(stats: UtilityStats, delta_u: float = 0.0) -> EntropyBound:
    """Gaussian differential entropies of the two utility channels plus margin.

    Their sum upper-bounds the entropy of the overall system utility.
    """
    if stats.var_h <= 0 or stats.var_p <= 0:
        raise ValidationError("entropy bound needs strictly positive variances")
    h_h = float(np.log(np.sqrt(2.0 * np.pi * stats.var_h)) + 0.5 + delta_u)
    h_p = float(np.log(np.sqrt(2.0 * np.pi * stats.var_p)) + 0.5 + delta_u)
    return EntropyBound(h_h=h_h, h_p=h_p, delta_u=delta_u)


def constant_velocity_rollout(scenario: Scenario, horizon: float = 3.0,
                              dt: float = 0.1) -> np.ndarray:
    """Straight-line rollout of the current velocity vector; (T, 2) positions."""
    ego = scenario.scene.ego
    ts = dt * np.arange(1, int(round(horizon / dt)) + 1)
    vel = ego.speed * np.array([np.cos(ego.heading), np.sin(ego.heading)])
    return ego.position + np.outer(ts, vel)


def vbp_decide(scenario: Scenario, d_s: float = DEFAULT_D_S, horizon: float = 3.0,
               dt: float = 0.1) -> DecisionOutcome:
    """Velocity-based baseline: intervene iff the constant-velocity rollout
    comes within d_s of any obstacle. Never warns."""
    rollout = constant_velocity_rollout(scenario, horizon=horizon, dt=dt)
    clearance = scenario.scene.min_clearance(rollout)
    stats = UtilityStats(0.0, 0.0, 0.0, 0.0)
    if clearance < d_s:
        return DecisionOutcome(INTERVENE, stats)
    return DecisionOutcome(NO_ACTION, stats)


def abp_decide(scenario: Scenario, model: CarpalPredictor, eta_abp: float,
               d_s: float = DEFAULT_D_S, pred_error: float = None) -> DecisionOutcome:
    """Accuracy-based baseline: trust the predictor only when its regressed
    displacement error is small, then apply the clearance check to the
    predicted mean trajectory.

    An externally supplied pred_error (e.g. the acausal displacement error)
    replaces the regressed one.
    """
    stats = UtilityStats(0.0, 0.0, 0.0, 0.0)
    feat = featurize(scenario, t_past=model.t_past).vector()
    if pred_error is None:
        pred_error = model.predict_error(feat)
    if pred_error > eta_abp:
        # prediction untrusted: act conservatively, never intervene
        return DecisionOutcome(NO_ACTION, stats)
    dist = model.predict_distribution(feat)
    mean_traj = reconstruct(dist.mean, dist.horizon, model.dt)
    ego = scenario.scene.ego
    world_xy = ego_to_world(mean_traj.xy, ego.position, ego.heading)
    clearance = scenario.scene.min_clearance(world_xy)
    if clearance < d_s:
        return DecisionOutcome(INTERVENE, stats)
    return DecisionOutcome(NO_ACTION, stats)
