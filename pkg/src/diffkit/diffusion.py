"""Denoisers, parameterisation switching and training losses.

A :class:`Denoiser` wraps an MLP together with the schedule it was trained
on and the quantity it predicts:

``noise``        epsilon(x_t, t)
``data``         x0(x_t, t)
``edm_raw``      the raw network F inside the EDM preconditioned D(x; sigma)
``rf_velocity``  v(x_t, t) ~ x0 - x1 for rectified flow

``Denoiser.predict`` always returns the *usable* prediction: epsilon, x0,
D or v respectively.  Conversions between epsilon and x0 go through
:func:`noise_to_data` / :func:`data_to_noise`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import nn
from .errors import ConfigurationError, DimensionError, NumericError
from .schedules import NoiseSchedule, _col


class PredictionKind(str, enum.Enum):
    NOISE = "noise"
    DATA = "data"
    EDM_RAW = "edm_raw"
    RF_VELOCITY = "rf_velocity"


def noise_to_data(x_t, t, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    alpha, sigma = sched.alpha_sigma(t)
    x_t = np.asarray(x_t, dtype=float)
    return (x_t - _col(sigma, x_t) * eps_hat) / _col(alpha, x_t)


def data_to_noise(x_t, t, x0_hat, sched: NoiseSchedule) -> np.ndarray:
    alpha, sigma = sched.alpha_sigma(t)
    x_t = np.asarray(x_t, dtype=float)
    return (x_t - _col(alpha, x_t) * x0_hat) / _col(sigma, x_t)


# ---------------------------------------------------------------------------
# EDM preconditioning


@dataclass(frozen=True)
class EdmPrecond:
    sigma_data: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.sigma_data) and self.sigma_data > 0):
            raise ValueError("sigma_data must be finite and positive")


class EdmCoeffs(NamedTuple):
    c_skip: np.ndarray
    c_out: np.ndarray
    c_in: np.ndarray
    c_noise: np.ndarray
    weight: np.ndarray


def edm_coeffs(sigma, pre: EdmPrecond) -> EdmCoeffs:
    sigma = np.asarray(sigma, dtype=float)
    sd2 = pre.sigma_data**2
    total = sigma**2 + sd2
    with np.errstate(divide="ignore"):
        return EdmCoeffs(
            c_skip=sd2 / total,
            c_out=sigma * pre.sigma_data / np.sqrt(total),
            c_in=1.0 / np.sqrt(total),
            c_noise=np.log(sigma) / 4.0,
            weight=total / (pre.sigma_data * sigma) ** 2,
        )


def edm_denoise(F: Callable, x, sigma, pre: EdmPrecond) -> np.ndarray:
    """D(x; sigma) = c_skip x + c_out F(c_in x; c_noise) for a raw network F."""
    x = np.asarray(x, dtype=float)
    c = edm_coeffs(sigma, pre)
    return _col(c.c_skip, x) * x + _col(c.c_out, x) * F(_col(c.c_in, x) * x, c.c_noise)


# ---------------------------------------------------------------------------
# Conditions


@dataclass
class Condition:
    """A batch of condition vectors with per-row null flags.

    A null row stands for "no conditioning": its payload is replaced by
    zeros and a dedicated flag channel is set when fed to the network.
    """

    payload: np.ndarray
    null: np.ndarray

    @classmethod
    def of(cls, payload, null=False) -> "Condition":
        payload = np.atleast_2d(np.asarray(payload, dtype=float))
        null = np.broadcast_to(np.asarray(null, dtype=bool), (payload.shape[0],)).copy()
        return cls(payload, null)

    @classmethod
    def null_like(cls, n: int, dim: int) -> "Condition":
        return cls(np.zeros((n, dim)), np.ones(n, dtype=bool))

    def __len__(self):
        return self.payload.shape[0]


def cfg_dropout(cond: Condition, p: float, rng: np.random.Generator) -> Condition:
    """Replace each row by the null condition with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    drop = rng.random(len(cond)) < p
    return Condition(cond.payload.copy(), cond.null | drop)


# ---------------------------------------------------------------------------
# Denoiser


class Denoiser:
    """An MLP predictor for one schedule and one parameterisation."""

    def __init__(
        self,
        data_dim: int,
        schedule: NoiseSchedule,
        kind: str | PredictionKind = PredictionKind.NOISE,
        cond_dim: int = 0,
        hidden_widths=(128, 128, 128),
        activation: str = "silu",
        use_layernorm: bool = False,
        dropout_rate: float = 0.0,
        input_skip: bool = False,
        time_dim: int = 16,
        precond: EdmPrecond | None = None,
        seed: int = 0,
        params: nn.ParamSet | None = None,
    ):
        self.kind = PredictionKind(kind)
        self.data_dim = int(data_dim)
        self.cond_dim = int(cond_dim)
        self.time_dim = int(time_dim)
        self.schedule = schedule
        _check_compatible(schedule, self.kind)
        self.precond = precond or (EdmPrecond() if self.kind is PredictionKind.EDM_RAW else None)
        in_dim = self.data_dim + self.time_dim + (self.cond_dim + 1 if self.cond_dim else 0)
        self.spec = nn.MlpSpec(
            in_dim, tuple(hidden_widths), self.data_dim, activation, use_layernorm, dropout_rate, input_skip
        )
        if params is None:
            params = nn.init_params(self.spec, np.random.default_rng(seed))
        nn.check_params(self.spec, params)
        self.params = params
        self.ema: nn.EmaState | None = None
        self.forward_count = 0

    # -- configuration round trip -----------------------------------------
    def config(self) -> dict:
        return {
            "data_dim": self.data_dim,
            "kind": self.kind.value,
            "cond_dim": self.cond_dim,
            "time_dim": self.time_dim,
            "spec": self.spec.to_dict(),
            "schedule": self.schedule.describe(),
            "sigma_data": self.precond.sigma_data if self.precond else None,
        }

    @classmethod
    def from_config(cls, cfg: dict, params: nn.ParamSet, ema_params: nn.ParamSet | None = None,
                    ema_decay: float = 0.995) -> "Denoiser":
        from .schedules import NoiseSchedule

        spec = nn.MlpSpec.from_dict(cfg["spec"])
        sched = NoiseSchedule(**cfg["schedule"])
        model = cls(
            cfg["data_dim"], sched, cfg["kind"], cfg["cond_dim"], spec.hidden_widths, spec.activation,
            spec.use_layernorm, spec.dropout_rate, spec.input_skip, cfg["time_dim"],
            EdmPrecond(cfg["sigma_data"]) if cfg.get("sigma_data") else None, params=params,
        )
        if ema_params is not None:
            model.ema = nn.EmaState(ema_decay, ema_params)
        return model

    def eval_params(self, use_ema: bool = True) -> nn.ParamSet:
        return self.ema.shadow if (use_ema and self.ema is not None) else self.params

    # -- network plumbing --------------------------------------------------
    def _time_feature(self, t) -> np.ndarray:
        if self.kind is PredictionKind.EDM_RAW:
            return edm_coeffs(t, self.precond).c_noise
        return np.asarray(t, dtype=float)

    def net_input(self, x, t, cond=None, null=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.data_dim:
            raise DimensionError(f"expected x of shape (n, {self.data_dim}), got {x.shape}")
        n = x.shape[0]
        tf = np.broadcast_to(self._time_feature(t), (n,))
        parts = [x, nn.sinusoidal_time_embed(tf, self.time_dim)]
        if self.cond_dim:
            if cond is None:
                payload, flag = np.zeros((n, self.cond_dim)), np.ones(n, dtype=bool)
            else:
                if isinstance(cond, Condition):
                    payload, flag = cond.payload, cond.null
                else:
                    payload = np.asarray(cond, dtype=float)
                    flag = np.zeros(n, dtype=bool) if null is None else null
                payload = np.broadcast_to(payload, (n, self.cond_dim))
                flag = np.broadcast_to(np.asarray(flag, dtype=bool), (n,))
            keep = (~flag).astype(float)[:, None]
            parts += [payload * keep, flag.astype(float)[:, None]]
        elif cond is not None:
            raise ConfigurationError("this denoiser takes no condition")
        return np.concatenate(parts, axis=1)

    def raw(self, x, t, cond=None, null=None, params=None, train_mode=False, rng=None, return_cache=False):
        """Raw network output; for EDM models the input is pre-scaled by c_in."""
        x = np.asarray(x, dtype=float)
        if self.kind is PredictionKind.EDM_RAW:
            x = _col(edm_coeffs(t, self.precond).c_in, x) * x
        inp = self.net_input(x, t, cond, null)
        self.forward_count += 1
        params = self.eval_params() if params is None else params
        return nn.mlp_forward(self.spec, params, inp, train_mode, rng, return_cache)

    def vjp(self, cache: dict, upstream, params=None) -> tuple[nn.ParamSet, np.ndarray]:
        """Param grads and the gradient w.r.t. the network's x input slot."""
        params = self.eval_params() if params is None else params
        grads, g_in = nn.backprop(self.spec, params, cache["x"], upstream, cache=cache)
        return grads, g_in[:, : self.data_dim]

    def predict(self, x, t, cond=None, null=None, params=None) -> np.ndarray:
        out = self.raw(x, t, cond, null, params)
        if self.kind is PredictionKind.EDM_RAW:
            c = edm_coeffs(t, self.precond)
            x = np.asarray(x, dtype=float)
            return _col(c.c_skip, x) * x + _col(c.c_out, x) * out
        return out

    # parameterisation views for VP models
    def eps(self, x, t, cond=None, null=None) -> np.ndarray:
        pred = self.predict(x, t, cond, null)
        return pred if self.kind is PredictionKind.NOISE else data_to_noise(x, t, pred, self.schedule)

    def x0(self, x, t, cond=None, null=None) -> np.ndarray:
        pred = self.predict(x, t, cond, null)
        return pred if self.kind is PredictionKind.DATA else noise_to_data(x, t, pred, self.schedule)


def _check_compatible(sched: NoiseSchedule, kind: PredictionKind) -> None:
    ok = {
        PredictionKind.NOISE: sched.is_vp,
        PredictionKind.DATA: sched.is_vp,
        PredictionKind.EDM_RAW: sched.kind == "edm",
        PredictionKind.RF_VELOCITY: sched.kind == "rectified",
    }[kind]
    if not ok:
        raise ConfigurationError(f"{kind.value} prediction is incompatible with the {sched.kind} schedule")


# ---------------------------------------------------------------------------
# Losses.  All reduce by the mean over batch and data dimensions.


def _mse_and_grads(model: Denoiser, out, cache, target, params, out_scale=None):
    diff = out - target
    loss = float(np.mean(diff**2))
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    g = 2.0 * diff / diff.size
    if out_scale is not None:
        g = g * out_scale
    grads, _ = model.vjp(cache, g, params)
    return loss, grads


def score_matching_loss(model: Denoiser, x0, cond=None, rng=None, params=None, null=None):
    """Denoising score matching: regress epsilon (or x0 for data models)."""
    if model.kind not in (PredictionKind.NOISE, PredictionKind.DATA):
        raise ConfigurationError("score matching needs a noise or data prediction model")
    rng = rng or np.random.default_rng()
    params = model.params if params is None else params
    x0 = np.asarray(x0, dtype=float)
    sched = model.schedule
    t = rng.uniform(sched.t_eps, sched.t_max, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    xt = sched.perturb(x0, t, eps)
    out, cache = model.raw(xt, t, cond, null, params, train_mode=True, rng=rng, return_cache=True)
    target = eps if model.kind is PredictionKind.NOISE else x0
    return _mse_and_grads(model, out, cache, target, params)


def sample_edm_sigma(n: int, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Log-uniform noise levels on [sigma_min, sigma_max]."""
    lo, hi = np.log(sched.t_eps), np.log(sched.t_max)
    return np.exp(rng.uniform(lo, hi, size=n))


def edm_loss(model: Denoiser, x0, cond=None, rng=None, params=None, null=None):
    """lambda(sigma) weighted denoising loss on D(y + n; sigma)."""
    if model.kind is not PredictionKind.EDM_RAW:
        raise ConfigurationError("edm_loss needs an edm_raw model")
    rng = rng or np.random.default_rng()
    params = model.params if params is None else params
    y = np.asarray(x0, dtype=float)
    sigma = sample_edm_sigma(y.shape[0], model.schedule, rng)
    noisy = y + sigma[:, None] * rng.standard_normal(y.shape)
    c = edm_coeffs(sigma, model.precond)
    out, cache = model.raw(noisy, sigma, cond, null, params, train_mode=True, rng=rng, return_cache=True)
    d = c.c_skip[:, None] * noisy + c.c_out[:, None] * out
    diff = d - y
    w = c.weight[:, None]
    loss = float(np.mean(w * diff**2))
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    g = 2.0 * w * diff * c.c_out[:, None] / diff.size
    grads, _ = model.vjp(cache, g, params)
    return loss, grads


def rf_loss(model: Denoiser, x0, cond=None, rng=None, params=None, null=None):
    """Least squares on the straight-line velocity x0 - x1."""
    if model.kind is not PredictionKind.RF_VELOCITY:
        raise ConfigurationError("rf_loss needs an rf_velocity model")
    rng = rng or np.random.default_rng()
    params = model.params if params is None else params
    x0 = np.asarray(x0, dtype=float)
    x1 = rng.standard_normal(x0.shape)
    t = rng.uniform(0.0, 1.0, size=x0.shape[0])
    xt = t[:, None] * x1 + (1.0 - t[:, None]) * x0
    out, cache = model.raw(xt, t, cond, null, params, train_mode=True, rng=rng, return_cache=True)
    return _mse_and_grads(model, out, cache, x0 - x1, params)


LOSSES = {
    PredictionKind.NOISE: score_matching_loss,
    PredictionKind.DATA: score_matching_loss,
    PredictionKind.EDM_RAW: edm_loss,
    PredictionKind.RF_VELOCITY: rf_loss,
}


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainConfig:
    gradient_steps: int = 10_000
    batch_size: int = 256
    lr: float = 3e-4
    ema_decay: float = 0.995
    cond_dropout: float = 0.0
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.gradient_steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError(f"invalid training config {self}")
        if not 0.0 <= self.ema_decay <= 1.0 or not 0.0 <= self.cond_dropout <= 1.0:
            raise ConfigurationError(f"invalid training config {self}")


@dataclass
class TrainResult:
    model: Denoiser
    loss_trace: np.ndarray
    ema: nn.EmaState = field(repr=False)


def train(
    model: Denoiser,
    x0,
    cfg: TrainConfig,
    cond=None,
    callback: Callable[[int, Denoiser], None] | None = None,
    callback_every: int = 0,
) -> TrainResult:
    """Adam + EMA training of ``model`` on the rows of ``x0``.

    ``cond`` (rows aligned with ``x0``) enables conditional training; with
    ``cfg.cond_dropout > 0`` rows are randomly replaced by the null token so
    the same network also learns the unconditional prediction.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 2 or x0.shape[1] != model.data_dim:
        raise DimensionError(f"training data must have shape (n, {model.data_dim})")
    if cond is not None:
        cond = np.asarray(cond, dtype=float).reshape(len(x0), -1)
    loss_fn = LOSSES[model.kind]
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    adam = nn.AdamState.init(params, lr=cfg.lr)
    ema = model.ema if model.ema is not None else nn.EmaState.from_params(cfg.ema_decay, params)
    ema = nn.EmaState(cfg.ema_decay, ema.shadow)
    trace = np.empty(cfg.gradient_steps)
    for step in range(cfg.gradient_steps):
        idx = rng.integers(0, len(x0), size=cfg.batch_size)
        c = None
        if cond is not None:
            c = cfg_dropout(Condition.of(cond[idx]), cfg.cond_dropout, rng)
        loss, grads = loss_fn(model, x0[idx], c, rng, params)
        if cfg.grad_clip:
            grads = nn.clip_grad_norm(grads, cfg.grad_clip)
        params, adam = nn.adam_step(adam, params, grads)
        ema = nn.ema_update(ema, params)
        trace[step] = loss
        if callback is not None and callback_every and (step + 1) % callback_every == 0:
            model.params, model.ema = params, ema
            callback(step + 1, model)
    model.params, model.ema = params, ema
    return TrainResult(model, trace, ema)
