"""Small fully connected network with analytic backprop and Adam.

The model is a shared trunk feeding three heads: a trajectory head (6 mean +
6 raw-variance outputs), a utility-statistics head (mu_h, var_h, mu_p, var_p),
and a scalar prediction-error head. Positive quantities (variances, error)
pass through softplus with a small floor, so they are strictly positive for
any input. Everything is plain numpy; gradients are hand-derived and verified
against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import ValidationError, seeded_rng

VAR_FLOOR = 1e-6

# named slices of the concatenated head outputs
HEAD_SLICES = {
    "traj_mean": slice(0, 6),
    "traj_logvar": slice(6, 12),   # raw pre-softplus variance outputs
    "utility_stats": slice(12, 16),  # mu_h, var_h, mu_p, var_p
    "pred_error": slice(16, 17),
}
OUTPUT_DIM = 17
# output indices that are interpreted through softplus (+ floor)
POSITIVE_IDX = np.array([6, 7, 8, 9, 10, 11, 13, 15, 16])


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class Dense:
    W: np.ndarray  # (n_in, n_out)
    b: np.ndarray  # (n_out,)
    act: str       # "tanh" | "linear"


def _init_stack(dims, acts, rng):
    layers = []
    for (n_in, n_out), act in zip(zip(dims[:-1], dims[1:]), acts):
        scale = np.sqrt(2.0 / (n_in + n_out))
        layers.append(Dense(W=rng.normal(0.0, scale, size=(n_in, n_out)),
                            b=np.zeros(n_out), act=act))
    return layers


def _stack_forward(layers, X):
    cache = []
    h = X
    for layer in layers:
        z = h @ layer.W + layer.b
        a = np.tanh(z) if layer.act == "tanh" else z
        cache.append((h, a))
        h = a
    return h, cache


def _stack_backward(layers, cache, dOut):
    grads = []
    d = dOut
    for layer, (h_in, a) in zip(reversed(layers), reversed(cache)):
        if layer.act == "tanh":
            d = d * (1.0 - a * a)
        grads.append((h_in.T @ d, d.sum(axis=0)))
        d = d @ layer.W.T
    grads.reverse()
    return grads, d


@dataclass
class MlpModel:
    """Shared trunk plus named head stacks; heads are concatenated in a fixed order."""

    trunk: list
    heads: dict  # name -> list[Dense]; order: traj, utility, pred_error
    input_dim: int

    HEAD_ORDER = ("traj", "utility", "pred_error")

    @staticmethod
    def create(input_dim: int, seed: int = 0, trunk_dims=(128, 64),
               utility_hidden: int = 16) -> "MlpModel":
        rng = seeded_rng(seed, "init")
        trunk = _init_stack((input_dim, *trunk_dims), ["tanh"] * len(trunk_dims), rng)
        emb = trunk_dims[-1]
        heads = {
            "traj": _init_stack((emb, 12), ["linear"], rng),
            "utility": _init_stack((emb, utility_hidden, 4), ["tanh", "linear"], rng),
            "pred_error": _init_stack((emb, 1), ["linear"], rng),
        }
        # start the softplus heads near small positive values; variances and
        # displacement errors are far below softplus(0)
        heads["traj"][-1].b[6:12] = -1.5
        heads["utility"][-1].b[[1, 3]] = -4.0
        heads["pred_error"][-1].b[:] = -1.0
        return MlpModel(trunk=trunk, heads=heads, input_dim=input_dim)

    def parameters(self):
        """Flat list of (W, b) in a stable order."""
        out = list(self.trunk)
        for name in self.HEAD_ORDER:
            out.extend(self.heads[name])
        return out

    def set_parameters(self, layers):
        n = len(self.trunk)
        for dst, src in zip(self.parameters(), layers):
            dst.W = src[0].copy() if isinstance(src, tuple) else src.W.copy()
            dst.b = src[1].copy() if isinstance(src, tuple) else src.b.copy()
        assert n == len(self.trunk)

    def forward_raw(self, X: np.ndarray):
        """Raw (pre-softplus) outputs (B, 17) and the caches needed for backward."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise ValidationError(
                f"feature width {X.shape[1]} does not match model input {self.input_dim}")
        emb, trunk_cache = _stack_forward(self.trunk, X)
        outs, head_caches = [], {}
        for name in self.HEAD_ORDER:
            y, c = _stack_forward(self.heads[name], emb)
            outs.append(y)
            head_caches[name] = c
        raw = np.concatenate(outs, axis=1)
        return raw, (trunk_cache, head_caches)

    def backward(self, cache, dRaw: np.ndarray):
        """Gradients for every parameter given d(loss)/d(raw outputs)."""
        trunk_cache, head_caches = cache
        offsets = {"traj": slice(0, 12), "utility": slice(12, 16), "pred_error": slice(16, 17)}
        head_grads = []
        dEmb = 0.0
        for name in self.HEAD_ORDER:
            g, dx = _stack_backward(self.heads[name], head_caches[name], dRaw[:, offsets[name]])
            head_grads.extend(g)
            dEmb = dEmb + dx
        trunk_grads, _ = _stack_backward(self.trunk, trunk_cache, dEmb)
        return trunk_grads + head_grads

    def interpret(self, raw: np.ndarray) -> np.ndarray:
        """Apply softplus (+ floor) to the positive outputs."""
        out = np.array(raw, dtype=float, copy=True)
        out[:, POSITIVE_IDX] = softplus(raw[:, POSITIVE_IDX]) + VAR_FLOOR
        return out

    def forward(self, X: np.ndarray) -> np.ndarray:
        raw, _ = self.forward_raw(X)
        return self.interpret(raw)

    def to_jsonable(self) -> dict:
        def stack(layers):
            return [{"W": l.W.tolist(), "b": l.b.tolist(), "act": l.act} for l in layers]
        return {
            "input_dim": self.input_dim,
            "trunk": stack(self.trunk),
            "heads": {k: stack(v) for k, v in self.heads.items()},
        }

    @staticmethod
    def from_jsonable(obj: dict) -> "MlpModel":
        def stack(items):
            return [Dense(W=np.asarray(l["W"], dtype=float),
                          b=np.asarray(l["b"], dtype=float), act=l["act"]) for l in items]
        return MlpModel(trunk=stack(obj["trunk"]),
                        heads={k: stack(v) for k, v in obj["heads"].items()},
                        input_dim=int(obj["input_dim"]))


@dataclass
class LossWeights:
    nll: float = 1.0
    mu_h: float = 1.0
    var_h: float = 1.0
    mu_p: float = 1.0
    var_p: float = 1.0
    pred_error: float = 1.0

    def to_jsonable(self):
        return {"nll": self.nll, "mu_h": self.mu_h, "var_h": self.var_h,
                "mu_p": self.mu_p, "var_p": self.var_p, "pred_error": self.pred_error}


def loss_and_raw_grad(raw: np.ndarray, coeff_target: np.ndarray, stats_target: np.ndarray,
                      err_target: np.ndarray, weights: LossWeights):
    """Batch-mean losses and d(total)/d(raw).

    Five supervised losses: trajectory negative log likelihood against the
    observed coefficients, squared errors on the four utility statistics, plus
    the auxiliary squared error on the displacement-error head.
    Returns (total, parts dict, dRaw).
    """
    B = raw.shape[0]
    dRaw = np.zeros_like(raw)
    parts = {}

    mean = raw[:, 0:6]
    raw_lv = raw[:, 6:12]
    var = softplus(raw_lv) + VAR_FLOOR
    diff = mean - coeff_target
    nll_terms = 0.5 * np.log(2.0 * np.pi * var) + diff**2 / (2.0 * var)
    parts["nll"] = float(nll_terms.sum(axis=1).mean())
    dRaw[:, 0:6] += weights.nll * (diff / var) / B
    d_var = (0.5 / var - diff**2 / (2.0 * var**2))
    dRaw[:, 6:12] += weights.nll * d_var * sigmoid(raw_lv) / B

    # utility statistics: means are raw, variances go through softplus; rows
    # with NaN targets (no ground-truth stats) contribute nothing and the
    # mean renormalizes over the labeled rows
    mu_idx, var_idx = np.array([12, 14]), np.array([13, 15])
    mu_hat = raw[:, mu_idx]
    var_hat = softplus(raw[:, var_idx]) + VAR_FLOOR
    have = np.isfinite(stats_target[:, 0])
    n_have = max(int(have.sum()), 1)
    mu_t = np.where(have[:, None], stats_target[:, [0, 2]], mu_hat)
    var_t = np.where(have[:, None], stats_target[:, [1, 3]], var_hat)
    w_mu = np.array([weights.mu_h, weights.mu_p])
    w_var = np.array([weights.var_h, weights.var_p])
    parts["mu_h"] = float(((mu_hat[:, 0] - mu_t[:, 0]) ** 2).sum() / n_have)
    parts["mu_p"] = float(((mu_hat[:, 1] - mu_t[:, 1]) ** 2).sum() / n_have)
    parts["var_h"] = float(((var_hat[:, 0] - var_t[:, 0]) ** 2).sum() / n_have)
    parts["var_p"] = float(((var_hat[:, 1] - var_t[:, 1]) ** 2).sum() / n_have)
    dRaw[:, mu_idx] += 2.0 * w_mu * (mu_hat - mu_t) / n_have
    dRaw[:, var_idx] += 2.0 * w_var * (var_hat - var_t) * sigmoid(raw[:, var_idx]) / n_have

    err_hat = softplus(raw[:, 16]) + VAR_FLOOR
    parts["pred_error"] = float(((err_hat - err_target) ** 2).mean())
    dRaw[:, 16] += weights.pred_error * 2.0 * (err_hat - err_target) * sigmoid(raw[:, 16]) / B

    total = (weights.nll * parts["nll"]
             + weights.mu_h * parts["mu_h"] + weights.var_h * parts["var_h"]
             + weights.mu_p * parts["mu_p"] + weights.var_p * parts["var_p"]
             + weights.pred_error * parts["pred_error"])
    return float(total), parts, dRaw


@dataclass
class AdamState:
    """First/second moment buffers matching the parameter list."""

    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled, applied to weights only

    @staticmethod
    def for_model(model: MlpModel, lr: float = 1e-3,
                  weight_decay: float = 0.0) -> "AdamState":
        params = model.parameters()
        return AdamState(m=[(np.zeros_like(p.W), np.zeros_like(p.b)) for p in params],
                         v=[(np.zeros_like(p.W), np.zeros_like(p.b)) for p in params],
                         lr=lr, weight_decay=weight_decay)

    def update(self, model: MlpModel, grads) -> None:
        self.step += 1
        t = self.step
        for p, (gW, gb), mi, vi in zip(model.parameters(), grads, self.m, self.v):
            for g, x, m, v, is_w in ((gW, p.W, mi[0], vi[0], True),
                                     (gb, p.b, mi[1], vi[1], False)):
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                m_hat = m / (1 - self.beta1**t)
                v_hat = v / (1 - self.beta2**t)
                x -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
                if is_w and self.weight_decay:
                    x -= self.lr * self.weight_decay * x
