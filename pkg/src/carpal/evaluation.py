"""Test-set evaluation: risky augmentation, labeling, ROC sweeps, timing.

A case is positive when the observed future trajectory comes within d_S of an
obstacle AND the backup planner's ground-truth expected utility beats the
observed trajectory's utility; intervention is then genuinely useful. Each
scenario is evaluated once into a flat record holding both acausal
(ground-truth) and regressed quantities, and the ROC machinery is pure
counting over those records.
"""

from __future__ import annotations

import json
import multiprocessing
import os
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .decision import DEFAULT_D_S, DecisionThresholds, constant_velocity_rollout, decide
from .planner import PlannerConfig, VehicleSpecs, plan_ensemble
from .predictor import CarpalPredictor, ego_to_world, featurize, world_to_ego
from .scene import NoiseParams, Obstacle, Scenario, ValidationError, seeded_rng
from .trajectory import Trajectory, project, reconstruct, sample
from .utility import UtilityStats, build_utility_field, trajectory_utility, utility_stats


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the ground-truth utility pipeline needs, in one place."""

    n_samples: int = 10
    m_plans: int = 10
    alpha: float = 0.1
    bandwidth: float = 0.5
    field_resolution: float = 0.25  # stats field; planner uses its own grid
    noise: NoiseParams = field(default_factory=NoiseParams)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    d_s: float = DEFAULT_D_S
    labeling_seed: int = 1234
    vehicle_radius: float = 0.8
    kappa_max: float = 0.25
    horizon: float = 3.0
    dt: float = 0.1
    t_future: int = 30


@dataclass(frozen=True)
class LabeledCase:
    scenario: Scenario
    ground_truth_stats: UtilityStats
    observed_min_clearance: float
    u_observed: float
    positive: bool


@dataclass
class EvaluatedCase:
    """One scenario, fully measured: label inputs plus per-method decision inputs."""

    case_id: str
    risky: bool
    augmented: str
    clearance: float          # observed future vs true obstacles, meters
    u_observed: float         # ground-truth utility of the observed future
    gt: UtilityStats          # acausal statistics from the utility pipeline
    reg: UtilityStats         # regressed statistics from the model
    err_true: float           # acausal displacement error at the horizon
    err_hat: float            # regressed displacement error
    vbp_clearance: float      # constant-velocity rollout clearance
    abp_clearance: float      # predicted-mean-trajectory clearance
    positive: bool
    n_fallback: int = 0

    def to_jsonable(self) -> dict:
        return {
            "case_id": self.case_id, "risky": self.risky, "augmented": self.augmented,
            "clearance": self.clearance, "u_observed": self.u_observed,
            "gt": self.gt.to_jsonable(), "reg": self.reg.to_jsonable(),
            "err_true": self.err_true, "err_hat": self.err_hat,
            "vbp_clearance": self.vbp_clearance, "abp_clearance": self.abp_clearance,
            "positive": self.positive, "n_fallback": self.n_fallback,
        }


def _case_seeds(labeling_seed: int, case_id: str) -> tuple[int, int]:
    ss = np.random.SeedSequence([int(labeling_seed) & 0xFFFFFFFF,
                                 zlib.crc32(case_id.encode())])
    a, b = ss.generate_state(2)
    return int(a), int(b)


def world_frame_samples(scenario: Scenario, trajs: list[Trajectory]) -> list[Trajectory]:
    ego = scenario.scene.ego
    out = []
    for t in trajs:
        xy = ego_to_world(t.xy, ego.position, ego.heading)
        out.append(Trajectory(np.column_stack([t.times, xy]), t.dt))
    return out


def ground_truth(model: CarpalPredictor, scenario: Scenario, cfg: PipelineConfig):
    """Acausal utility statistics of a scenario under the full pipeline.

    Returns (stats, u_observed, samples_world, mean_world, n_fallback).
    """
    s_sample, s_plan = _case_seeds(cfg.labeling_seed, scenario.scenario_id)
    feat = featurize(scenario, t_past=model.t_past).vector()
    dist = model.predict_distribution(feat)
    samples_ego = sample(dist, cfg.n_samples, seed=s_sample, dt=cfg.dt)
    samples_w = world_frame_samples(scenario, samples_ego)
    mean_w = world_frame_samples(
        scenario, [reconstruct(dist.mean, cfg.horizon, cfg.dt)])[0]

    specs = VehicleSpecs(speed=scenario.scene.ego.speed, kappa_max=cfg.kappa_max,
                         radius=cfg.vehicle_radius)
    plans = plan_ensemble(scenario.scene, samples_w, specs, cfg.noise, m=cfg.m_plans,
                          seed=s_plan, cfg=cfg.planner, alpha=cfg.alpha,
                          bandwidth=cfg.bandwidth, t_steps=cfg.t_future, dt=cfg.dt)
    field_true = build_utility_field(scenario.scene, samples_w, alpha=cfg.alpha,
                                     resolution=cfg.field_resolution,
                                     bandwidth=cfg.bandwidth)
    stats = utility_stats(field_true, samples_w, [p.trajectory for p in plans])
    u_obs = trajectory_utility(field_true, scenario.future)
    n_fallback = sum(1 for p in plans if p.fallback)
    return stats, u_obs, samples_w, mean_w, n_fallback


def label(scenario: Scenario, model: CarpalPredictor, cfg: PipelineConfig) -> LabeledCase:
    """Positive iff the observed future is a near-collision AND the planner
    genuinely improves on it under the ground-truth utility."""
    stats, u_obs, _, _, _ = ground_truth(model, scenario, cfg)
    clearance = scenario.scene.min_clearance(scenario.future.xy)
    positive = bool(clearance < cfg.d_s and stats.mu_p > u_obs)
    return LabeledCase(scenario=scenario, ground_truth_stats=stats,
                       observed_min_clearance=float(clearance),
                       u_observed=float(u_obs), positive=positive)


def evaluate_case(model: CarpalPredictor, scenario: Scenario,
                  cfg: PipelineConfig) -> EvaluatedCase:
    stats, u_obs, _, mean_w, n_fallback = ground_truth(model, scenario, cfg)
    clearance = float(scenario.scene.min_clearance(scenario.future.xy))
    positive = bool(clearance < cfg.d_s and stats.mu_p > u_obs)

    feat = featurize(scenario, t_past=model.t_past).vector()
    out = model.predict(feat)[0]
    reg = UtilityStats(float(out[12]), float(out[13]), float(out[14]), float(out[15]))
    err_hat = float(out[16])
    err_true = float(np.linalg.norm(mean_w.xy[-1] - scenario.future.xy[-1]))

    vbp_clear = float(scenario.scene.min_clearance(
        constant_velocity_rollout(scenario, horizon=cfg.horizon, dt=cfg.dt)))
    abp_clear = float(scenario.scene.min_clearance(mean_w.xy))

    return EvaluatedCase(case_id=scenario.scenario_id, risky=scenario.risky,
                         augmented=scenario.augmented, clearance=clearance,
                         u_observed=float(u_obs), gt=stats, reg=reg,
                         err_true=err_true, err_hat=err_hat,
                         vbp_clearance=vbp_clear, abp_clearance=abp_clear,
                         positive=positive, n_fallback=n_fallback)


# -- multiprocessing plumbing -------------------------------------------------

_WORKER = {}


def _init_worker(model_blob: str, cfg: PipelineConfig):
    _WORKER["model"] = CarpalPredictor.load_json(model_blob)
    _WORKER["cfg"] = cfg


def _work_one(scenario: Scenario) -> EvaluatedCase:
    return evaluate_case(_WORKER["model"], scenario, _WORKER["cfg"])


def _work_stats(scenario: Scenario) -> np.ndarray:
    stats, _, _, _, _ = ground_truth(_WORKER["model"], scenario, _WORKER["cfg"])
    return stats.as_vector()


def _pool(model: CarpalPredictor, cfg: PipelineConfig, workers: int):
    return multiprocessing.Pool(processes=workers, initializer=_init_worker,
                                initargs=(model.to_json(), cfg))


def default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, 8))


def evaluate_cases(model: CarpalPredictor, scenarios: list[Scenario],
                   cfg: PipelineConfig, workers: int = None) -> list[EvaluatedCase]:
    """Evaluate every scenario; order-stable and deterministic per seeds."""
    workers = workers or default_workers()
    if workers <= 1 or len(scenarios) < 8:
        return [evaluate_case(model, s, cfg) for s in scenarios]
    with _pool(model, cfg, workers) as pool:
        return list(pool.map(_work_one, scenarios, chunksize=max(1, len(scenarios) // (workers * 8))))


def ground_truth_stats_batch(model: CarpalPredictor, scenarios: list[Scenario],
                             cfg: PipelineConfig, workers: int = None) -> np.ndarray:
    """(N, 4) ground-truth statistics for training targets."""
    workers = workers or default_workers()
    if workers <= 1 or len(scenarios) < 8:
        return np.array([ground_truth(model, s, cfg)[0].as_vector() for s in scenarios])
    with _pool(model, cfg, workers) as pool:
        rows = pool.map(_work_stats, scenarios, chunksize=max(1, len(scenarios) // (workers * 8)))
    return np.array(rows)


# -- training orchestration -----------------------------------------------------


def training_arrays(scenarios: list[Scenario], t_past: int = 20):
    """Features and ego-frame future coefficients for a scenario list."""
    X, C = [], []
    for s in scenarios:
        X.append(featurize(s, t_past=t_past).vector())
        ego = s.scene.ego
        xy = world_to_ego(s.future.xy, ego.position, ego.heading)
        C.append(project(Trajectory(np.column_stack([s.future.times, xy]),
                                    s.future.dt)).as_vector())
    return np.array(X), np.array(C)


def fit_carpal(scenarios: list[Scenario], seed: int, cfg: PipelineConfig,
               predictor_params: dict = None, workers: int = None,
               pretrain_scenarios: list[Scenario] = None):
    """Full training flow: pretrain the predictor (optionally on a larger
    cheap scenario set), calibrate its variances on a held-out slice, compute
    ground-truth utility targets, then train all heads jointly.

    Returns (predictor, loss curves, target statistics array).
    """
    from .nn import LossWeights, MlpModel
    from .predictor import TrainingSet, feature_dim, train

    params = dict(predictor_params or {})
    params["seed"] = seed
    pred = CarpalPredictor(**params)
    if pretrain_scenarios is None:
        pretrain_scenarios = scenarios
    Xp, Cp = training_arrays(pretrain_scenarios, t_past=pred.t_past)
    n_hold = max(1, int(0.15 * Xp.shape[0]))
    pred.model_ = MlpModel.create(Xp.shape[1], seed=seed, trunk_dims=pred.trunk_dims,
                                  utility_hidden=pred.utility_hidden)
    weights = LossWeights(**pred.loss_weights) if pred.loss_weights else LossWeights()
    curves = []
    if pred.pretrain_epochs > 0:
        pre = LossWeights(nll=weights.nll, mu_h=0.0, var_h=0.0, mu_p=0.0,
                          var_p=0.0, pred_error=0.0)
        _, c = train(pred.model_, TrainingSet(Xp[:-n_hold], Cp[:-n_hold]), pre,
                     pred.pretrain_epochs, seed, lr=pred.lr,
                     batch_size=pred.batch_size, horizon=pred.horizon,
                     weight_decay=pred.weight_decay, feature_noise=pred.feature_noise)
        curves.extend(c)
    pred.calibrate_variances(Xp[-n_hold:], Cp[-n_hold:])
    stats = ground_truth_stats_batch(pred, scenarios, cfg, workers=workers)
    X, C = training_arrays(scenarios, t_past=pred.t_past)
    # joint phase: utility targets exist only for the labeled subset; the rest
    # of the pretraining set keeps the likelihood loss honest (NaN rows are
    # masked out of the statistic losses)
    X_joint = np.vstack([Xp[:-n_hold], X])
    C_joint = np.vstack([Cp[:-n_hold], C])
    stats_joint = np.vstack([np.full((Xp.shape[0] - n_hold, 4), np.nan), stats])
    _, c = train(pred.model_, TrainingSet(X_joint, C_joint, stats_joint), weights,
                 pred.epochs, seed + 1, lr=pred.lr, batch_size=pred.batch_size,
                 horizon=pred.horizon, weight_decay=pred.weight_decay,
                 feature_noise=pred.feature_noise)
    curves.extend(c)
    pred.calibrate_variances(Xp[-n_hold:], Cp[-n_hold:])
    pred.curves_ = curves
    return pred, curves, stats


# -- risky augmentation --------------------------------------------------------


def _scale_case(scenario: Scenario, factor: float = 1.2) -> Scenario:
    """Scale the ego-frame driver track: simulates reckless, faster driving.

    Only the trajectories scale; the measured kinematic state stays as logged,
    the same blind spot the velocity-based baseline has on real data.
    """
    ego = scenario.scene.ego
    def scale(traj: Trajectory) -> Trajectory:
        xy = ego.position + factor * (traj.xy - ego.position)
        return Trajectory(np.column_stack([traj.times, xy]), traj.dt)
    return replace(scenario, past=scale(scenario.past),
                   future=scale(scenario.future), augmented="scale",
                   scenario_id=scenario.scenario_id + "-aug")


def _obstacle_case(scenario: Scenario, rng: np.random.Generator) -> Scenario:
    """Drop obstacles in front of the ego: simulates a sudden road hazard."""
    scene = scenario.scene
    ego = scene.ego
    b = scene.bounds
    added = []
    for _ in range(int(rng.integers(1, 3))):
        ahead = rng.uniform(2.5, 5.5)
        lateral = rng.normal(0.0, 0.5)
        r = rng.uniform(0.35, 0.6)
        center = ego_to_world(np.array([[ahead, lateral]]), ego.position, ego.heading)[0]
        center = np.clip(center, b[:2] + r + 1e-6, b[2:] - r - 1e-6)
        added.append(Obstacle("circle", center=center, radius=r, kind="augmented"))
    scene = replace(scene, obstacles=tuple(scene.obstacles) + tuple(added))
    return replace(scenario, scene=scene, augmented="obstacle",
                   scenario_id=scenario.scenario_id + "-aug")


def augment_risky(test_set: list[Scenario], fraction: float = 0.10, mode: str = "mixed",
                  seed: int = 0) -> list[Scenario]:
    """Replace a fraction of cases with risky counterfactual variants."""
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError("fraction must be in [0, 1]")
    if mode not in ("mixed", "scale", "obstacle"):
        raise ValidationError(f"unknown augmentation mode {mode!r}")
    rng = seeded_rng(seed, "augment")
    n_pick = int(round(fraction * len(test_set)))
    picks = set(rng.choice(len(test_set), size=n_pick, replace=False).tolist()) \
        if n_pick else set()
    out = []
    for i, scn in enumerate(test_set):
        if i not in picks:
            out.append(scn)
            continue
        pick_mode = mode if mode != "mixed" else ("scale" if rng.random() < 0.5 else "obstacle")
        out.append(_scale_case(scn) if pick_mode == "scale" else _obstacle_case(scn, rng))
    return out


# -- ROC machinery --------------------------------------------------------------


@dataclass(frozen=True)
class RocPoint:
    method: str
    threshold: float
    recall: float        # None when the set has no positives
    fall_out: float
    tp: int
    fp: int
    tn: int
    fn: int
    intervene_count: int
    warn_count: int


METHODS = ("carpal", "carpal_acausal", "abp", "abp_acausal", "vbp")


def _decide_binary(case: EvaluatedCase, method: str, threshold: float,
                   d_s: float) -> tuple[int, str]:
    if method == "carpal":
        out = decide(case.reg, DecisionThresholds.unified(threshold))
        return out.binary, out.action
    if method == "carpal_acausal":
        out = decide(case.gt, DecisionThresholds.unified(threshold))
        return out.binary, out.action
    if method == "abp":
        hit = case.err_hat <= threshold and case.abp_clearance < d_s
        return (1 if hit else 0), ("Intervene" if hit else "NoAction")
    if method == "abp_acausal":
        hit = case.err_true <= threshold and case.abp_clearance < d_s
        return (1 if hit else 0), ("Intervene" if hit else "NoAction")
    if method == "vbp":
        hit = case.vbp_clearance < d_s
        return (1 if hit else 0), ("Intervene" if hit else "NoAction")
    raise ValidationError(f"unknown method {method!r}")


def roc_point(cases: list[EvaluatedCase], method: str, threshold: float,
              d_s: float = DEFAULT_D_S) -> RocPoint:
    tp = fp = tn = fn = warn = 0
    for case in cases:
        bit, action = _decide_binary(case, method, threshold, d_s)
        warn += action == "Warn"
        if case.positive:
            tp += bit
            fn += 1 - bit
        else:
            fp += bit
            tn += 1 - bit
    recall = tp / (tp + fn) if (tp + fn) else None
    fall_out = fp / (fp + tn) if (fp + tn) else None
    return RocPoint(method=method, threshold=float(threshold), recall=recall,
                    fall_out=fall_out, tp=tp, fp=fp, tn=tn, fn=fn,
                    intervene_count=tp + fp, warn_count=warn)


def roc_sweep(cases: list[EvaluatedCase], method: str, thresholds=None,
              d_s: float = DEFAULT_D_S) -> list[RocPoint]:
    """ROC points over a threshold sweep; VBP contributes its single fixed point."""
    if method == "vbp":
        return [roc_point(cases, "vbp", float("nan"), d_s)]
    if thresholds is None:
        thresholds = default_thresholds(method)
    return [roc_point(cases, method, t, d_s) for t in thresholds]


def default_thresholds(method: str):
    if method in ("carpal", "carpal_acausal"):
        return list(np.logspace(-7, 1, 25)) + [np.inf]
    return list(np.logspace(-3, 1.3, 25)) + [np.inf]  # displacement error, meters


def roc_csv(points: list[RocPoint]) -> str:
    lines = ["method,threshold,recall,fallout,tp,fp,tn,fn"]
    for p in points:
        rec = "" if p.recall is None else repr(float(p.recall))
        fo = "" if p.fall_out is None else repr(float(p.fall_out))
        lines.append(f"{p.method},{p.threshold!r},{rec},{fo},{p.tp},{p.fp},{p.tn},{p.fn}")
    return "\n".join(lines) + "\n"


def utility_improvement(cases: list[EvaluatedCase], method: str, threshold: float,
                        d_s: float = DEFAULT_D_S):
    """Mean relative utility improvement over intervened positive cases.

    improvement = (mu_P - u(observed)) / |u(observed)|, None when the method
    intervened on no positives.
    """
    gains = []
    for case in cases:
        if not case.positive:
            continue
        bit, _ = _decide_binary(case, method, threshold, d_s)
        if bit:
            denom = max(abs(case.u_observed), 1e-9)
            gains.append((case.gt.mu_p - case.u_observed) / denom)
    if not gains:
        return None
    return float(np.mean(gains))


def improvement_bootstrap(cases: list[EvaluatedCase], method: str, threshold: float,
                          d_s: float = DEFAULT_D_S, n_boot: int = 2000,
                          seed: int = 0):
    """(mean, lo95, hi95) bootstrap interval of the relative improvement."""
    gains = []
    for case in cases:
        if case.positive and _decide_binary(case, method, threshold, d_s)[0]:
            denom = max(abs(case.u_observed), 1e-9)
            gains.append((case.gt.mu_p - case.u_observed) / denom)
    if not gains:
        return None
    gains = np.asarray(gains)
    rng = seeded_rng(seed, "boot")
    means = rng.choice(gains, size=(n_boot, len(gains)), replace=True).mean(axis=1)
    return float(gains.mean()), float(np.quantile(means, 0.025)), float(np.quantile(means, 0.975))


def time_regression(model: CarpalPredictor, scenarios: list[Scenario],
                    cfg: PipelineConfig, n_forward: int = 200,
                    n_pipeline: int = 5) -> dict:
    """Wall-clock contrast: regressor forward pass vs the full utility pipeline."""
    feats = np.array([featurize(s, t_past=model.t_past).vector()
                      for s in scenarios[:min(len(scenarios), 50)]])
    model.predict(feats[:1])  # warm
    t0 = time.perf_counter()
    lat = []
    for i in range(n_forward):
        row = feats[i % len(feats)][None, :]
        t1 = time.perf_counter()
        model.predict(row)
        lat.append(time.perf_counter() - t1)
    reg_mean = float(np.mean(lat))
    reg_p95 = float(np.quantile(lat, 0.95))

    pipe = []
    for s in scenarios[:n_pipeline]:
        t1 = time.perf_counter()
        ground_truth(model, s, cfg)
        pipe.append(time.perf_counter() - t1)
    pipe_mean = float(np.mean(pipe))
    return {"regression_mean_s": reg_mean, "regression_p95_s": reg_p95,
            "pipeline_mean_s": pipe_mean,
            "speedup": pipe_mean / reg_mean if reg_mean > 0 else float("inf")}
