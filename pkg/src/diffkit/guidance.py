"""Guidance hooks, Diffusion-X, warm starts and best-of-N candidate generation.

A guide is any object with ``predict(model, x, t)`` returning the model's
native prediction after steering; :func:`diffkit.solvers.sample` calls it
in place of ``model.predict``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .diffusion import Condition, PredictionKind, data_to_noise, noise_to_data
from .errors import ArgumentError, ConfigurationError, NumericError
from .masking import SampleMask, apply_mask
from .schedules import NoiseSchedule, _col
from .solvers import SampleConfig, SolverKind, _Predictor, repeat_final_step, sample, solve
from .schedules import TimeGrid

__all__ = [
    "NoisyRegressor", "QuadraticScorer", "ClassifierGuide", "CfgGuide", "NoGuidance", "cg_adjust",
    "cfg_combine", "SampleMask", "apply_mask", "XtraConfig", "diffusion_x", "warm_start",
    "generate_candidates", "select_best", "classifier_loss", "train_guidance_classifier",
]


# ---------------------------------------------------------------------------
# Scorers C(x_t, t) with input gradients


class NoisyRegressor:
    """Scalar MLP regressor on ``[x, embed(t / t_max)]``."""

    def __init__(self, data_dim: int, sched: NoiseSchedule, hidden=(128, 128), time_dim: int = 16,
                 seed: int = 0, params=None, activation: str = "silu"):
        self.data_dim, self.time_dim, self.sched = int(data_dim), int(time_dim), sched
        self.spec = nn.MlpSpec(self.data_dim + self.time_dim, tuple(hidden), 1, activation)
        self.params = params if params is not None else nn.init_params(self.spec, np.random.default_rng(seed))
        self.out_scale = 1.0
        self.out_shift = 0.0

    def _inp(self, x, t):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tf = np.broadcast_to(np.asarray(t, dtype=float) / self.sched.t_max, (x.shape[0],))
        return np.concatenate([x, nn.sinusoidal_time_embed(tf, self.time_dim)], axis=1)

    def value(self, x, t, params=None) -> np.ndarray:
        out = nn.mlp_forward(self.spec, self.params if params is None else params, self._inp(x, t))
        return self.out_shift + self.out_scale * out[:, 0]

    def grad_x(self, x, t) -> np.ndarray:
        inp = self._inp(x, t)
        up = np.full((inp.shape[0], 1), self.out_scale)
        _, g = nn.backprop(self.spec, self.params, inp, up)
        return g[:, : self.data_dim]


@dataclass
class QuadraticScorer:
    """C(x) = -|x - goal|^2 / 2 on the selected coordinates (weights ``w``)."""

    goal: np.ndarray
    weights: np.ndarray | None = None

    def _w(self, x):
        return np.ones(x.shape[-1]) if self.weights is None else np.asarray(self.weights, dtype=float)

    def value(self, x, t=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return -0.5 * np.sum(self._w(x) * (x - self.goal) ** 2, axis=1)

    def grad_x(self, x, t=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return -self._w(x) * (x - self.goal)


# ---------------------------------------------------------------------------
# Guides


def cg_adjust(eps_hat, x_t, t, scorer, w: float, sched: NoiseSchedule) -> np.ndarray:
    """eps - w * sigma_t * grad_x C(x_t, t)."""
    if w == 0:
        return np.array(eps_hat, dtype=float)
    _, sigma = sched.alpha_sigma(t)
    x_t = np.asarray(x_t, dtype=float)
    return eps_hat - w * _col(sigma, x_t) * scorer.grad_x(x_t, t)


def cfg_combine(eps_uncond, eps_cond, w: float) -> np.ndarray:
    return eps_uncond + w * (eps_cond - eps_uncond)


class NoGuidance:
    def __init__(self, cond=None):
        self.cond = cond

    def predict(self, model, x, t):
        return model.predict(x, t) if self.cond is None else model.predict(x, t, self.cond)


@dataclass
class ClassifierGuide:
    scorer: object
    w: float = 1.0
    cond: object = None

    def __post_init__(self):
        if not np.isfinite(self.w) or self.w < 0:
            raise ArgumentError("guidance scale must be finite and non-negative")

    def predict(self, model, x, t):
        sched = model.schedule
        kind = PredictionKind(model.kind)
        native = model.predict(x, t) if self.cond is None else model.predict(x, t, self.cond)
        if self.w == 0:
            return native
        if kind is PredictionKind.NOISE:
            return cg_adjust(native, x, t, self.scorer, self.w, sched)
        if kind is PredictionKind.DATA:
            eps = cg_adjust(data_to_noise(x, t, native, sched), x, t, self.scorer, self.w, sched)
            return noise_to_data(x, t, eps, sched)
        if kind is PredictionKind.EDM_RAW:
            # D = x - sigma * eps, so adjusting eps shifts D by w sigma^2 grad C
            sigma = _col(np.asarray(t, dtype=float), np.asarray(x))
            return native + self.w * sigma**2 * self.scorer.grad_x(x, t)
        raise ConfigurationError("classifier guidance is not defined for rectified-flow models")


@dataclass
class CfgGuide:
    """Classifier-free guidance toward condition ``y`` with scale ``w``."""

    y: np.ndarray
    w: float = 1.0

    def predict(self, model, x, t):
        if not getattr(model, "cond_dim", 0):
            raise ConfigurationError("classifier-free guidance needs a conditional model")
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        y = np.broadcast_to(np.asarray(self.y, dtype=float), (n, model.cond_dim))
        cond = model.predict(x, t, Condition(y, np.zeros(n, dtype=bool)))
        if self.w == 1:
            return cond
        uncond = model.predict(x, t, Condition.null_like(n, model.cond_dim))
        return cfg_combine(uncond, cond, self.w)


# ---------------------------------------------------------------------------
# Diffusion-X and warm starts


@dataclass
class XtraConfig:
    M: int = 0
    warm_start_t: float | None = None
    warm_start_k: int = 2
    stochastic: bool = False

    def __post_init__(self):
        if self.M < 0:
            raise ArgumentError("M must be non-negative")
        if self.warm_start_t is not None and self.warm_start_k < 1:
            raise ArgumentError("warm start needs k >= 1")


def diffusion_x(x_final, model, M: int, grid: TimeGrid | None = None, n_steps: int = 20,
                stochastic: bool = False, rng=None, mask: SampleMask | None = None, guidance=None,
                cond=None) -> np.ndarray:
    """Repeat the last grid transition ``M`` times on an already finished sample."""
    grid = grid if grid is not None else model.schedule.time_grid(n_steps)
    return repeat_final_step(model, x_final, grid, M, stochastic, rng, mask, guidance, cond)


def warm_start(prev_sample, model, t_w: float | None = None, k: int = 2, solver=None,
               rng: np.random.Generator | None = None, guidance=None, mask: SampleMask | None = None,
               cond=None) -> np.ndarray:
    """Re-noise ``prev_sample`` to ``t_w`` and refine with ``k`` solver steps."""
    sched = model.schedule
    t_w = 0.3 * sched.t_max if t_w is None else float(t_w)
    if not sched.t_eps <= t_w <= sched.t_max:
        raise ArgumentError(f"warm-start level {t_w} outside [{sched.t_eps}, {sched.t_max}]")
    if k < 1:
        raise ArgumentError("k must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()
    from .solvers import default_solver

    solver = SolverKind(solver) if solver is not None else default_solver(sched)
    prev = np.asarray(prev_sample, dtype=float)
    x = sched.perturb(prev, t_w, rng.standard_normal(prev.shape))
    grid = TimeGrid(np.linspace(t_w, sched.t_eps, k + 1), "uniform")
    x = solve(model, x, grid, solver, rng, 1.0, guidance, mask, None, cond)
    if sched.kind == "edm":
        x = _Predictor(model, guidance, cond).native(x, grid[-1])
    return apply_mask(x, mask, final=True)


# ---------------------------------------------------------------------------
# Best-of-N


def generate_candidates(model, config: SampleConfig, n_candidates: int, guidance=None,
                        mask: SampleMask | None = None, scorer=None, cond=None):
    """Sample ``n_candidates`` chains per query.

    ``mask.known`` may carry a leading batch axis of queries ``B``; the
    result then has shape ``(B, N, dim)``.  With a ``scorer`` (or a
    classifier guide) each candidate is scored at the grid terminus.
    Returns ``(samples, scores)`` with ``scores`` None when nothing scores.
    """
    if n_candidates < 1:
        raise ArgumentError("n_candidates must be at least 1")
    dim = model.data_dim
    B = 1
    rep_mask = None
    if mask is not None:
        known = np.asarray(mask.known, dtype=float)
        m = np.asarray(mask.mask, dtype=float)
        if known.ndim == 2:
            B = known.shape[0]
        known = np.repeat(np.broadcast_to(known, (B, dim)), n_candidates, axis=0)
        m = np.repeat(np.broadcast_to(m, (B, dim)), n_candidates, axis=0) if m.ndim == 2 else m
        rep_mask = SampleMask(m, known, mask.mode)
    rep_cond = cond
    if cond is not None:
        c = np.asarray(cond.payload if isinstance(cond, Condition) else cond, dtype=float)
        if c.ndim == 2 and c.shape[0] == B:
            rep_cond = np.repeat(c, n_candidates, axis=0)
    cfg = SampleConfig(**{**config.__dict__, "n_samples": B * n_candidates})
    x = sample(model, cfg, guidance, rep_mask, cond=rep_cond)
    x = x.reshape(B, n_candidates, dim)
    if scorer is None and isinstance(guidance, ClassifierGuide):
        scorer = guidance.scorer
    scores = None
    if scorer is not None:
        scores = scorer.value(x.reshape(-1, dim), model.schedule.t_eps).reshape(B, n_candidates)
    return x, scores


def select_best(samples, scores) -> tuple[np.ndarray, np.ndarray]:
    """Per-query argmax over candidates; returns (best samples, indices)."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[None]
        samples = np.asarray(samples)[None]
    finite = np.where(np.isfinite(scores), scores, -np.inf)
    if np.any(np.all(~np.isfinite(scores), axis=1)):
        raise NumericError("every candidate score is non-finite")
    idx = np.argmax(finite, axis=1)
    return np.asarray(samples)[np.arange(len(idx)), idx], idx


def classifier_loss(reg: NoisyRegressor, params, x_t, t, targets) -> tuple[float, nn.ParamSet]:
    """Mean squared error of the raw (unscaled) regressor output and its parameter gradients."""
    inp = reg._inp(x_t, t)
    out, cache = nn.mlp_forward(reg.spec, params, inp, return_cache=True)
    diff = out[:, 0] - np.asarray(targets, dtype=float)
    grads, _ = nn.backprop(reg.spec, params, inp, (2.0 * diff / len(diff))[:, None], cache=cache)
    return float(np.mean(diff**2)), grads


def train_guidance_classifier(x0, targets, sched: NoiseSchedule, steps: int = 2000, batch_size: int = 256,
                              lr: float = 1e-3, hidden=(128, 128), seed: int = 0, w: float = 1.0,
                              time_dim: int = 16) -> ClassifierGuide:
    """Regress ``targets`` from forward-perturbed ``x0`` (squared loss)."""
    x0 = np.asarray(x0, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(-1)
    reg = NoisyRegressor(x0.shape[1], sched, hidden, time_dim, seed)
    shift, scale = float(y.mean()), float(y.std()) or 1.0
    yn = (y - shift) / scale
    reg.out_shift, reg.out_scale = shift, scale
    rng = np.random.default_rng(seed + 1)
    params = reg.params
    adam = nn.AdamState.init(params, lr=lr)
    for _ in range(steps):
        idx = rng.integers(0, len(x0), size=batch_size)
        t = rng.uniform(sched.t_eps, sched.t_max, size=batch_size)
        xt = sched.perturb(x0[idx], t, rng.standard_normal((batch_size, x0.shape[1])))
        _, grads = classifier_loss(reg, params, xt, t, yn[idx])
        params, adam = nn.adam_step(adam, params, grads)
    reg.params = params
    return ClassifierGuide(reg, w)
