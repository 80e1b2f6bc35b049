"""Reverse-process steppers and the sampling driver.

Each ``*_step`` function advances a batch from time ``s`` to an earlier
time ``t`` given the relevant model prediction.  :func:`solve` threads a
stepper over a :class:`~diffkit.schedules.TimeGrid`; :func:`sample` adds
the prior draw, masking, the EDM terminal readout and Diffusion-X.

Any model exposing ``kind``, ``schedule`` and ``predict(x, t, cond)`` can be
sampled, so one trained VP network serves all five VP steppers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .diffusion import PredictionKind, data_to_noise, noise_to_data
from .errors import ConfigurationError, NumericError
from .masking import SampleMask, apply_mask
from .schedules import NoiseSchedule, TimeGrid


class SolverKind(str, enum.Enum):
    DDPM = "ddpm"
    DDIM = "ddim"
    DPM_SOLVER_1 = "dpm_solver_1"
    SDE_DPMPP_1 = "sde_dpmpp_1"
    ODE_DPMPP_2M = "ode_dpmpp_2m"
    EDM_EULER = "edm_euler"
    EDM_HEUN = "edm_heun"
    RF_EULER = "rf_euler"


VP_SOLVERS = (SolverKind.DDPM, SolverKind.DDIM, SolverKind.DPM_SOLVER_1, SolverKind.SDE_DPMPP_1,
              SolverKind.ODE_DPMPP_2M)
EDM_SOLVERS = (SolverKind.EDM_EULER, SolverKind.EDM_HEUN)
STOCHASTIC_SOLVERS = (SolverKind.DDPM, SolverKind.SDE_DPMPP_1)


def default_solver(sched: NoiseSchedule) -> SolverKind:
    if sched.kind == "edm":
        return SolverKind.EDM_EULER
    if sched.kind == "rectified":
        return SolverKind.RF_EULER
    return SolverKind.DDIM


def check_compatible(solver, sched: NoiseSchedule, kind=None) -> SolverKind:
    """Raise ConfigurationError unless ``solver`` can run on ``sched`` (and model ``kind``)."""
    solver = SolverKind(solver)
    if solver in VP_SOLVERS:
        ok = sched.is_vp and kind in (None, PredictionKind.NOISE, PredictionKind.DATA)
    elif solver in EDM_SOLVERS:
        ok = sched.kind == "edm" and kind in (None, PredictionKind.EDM_RAW)
    else:
        ok = sched.kind == "rectified" and kind in (None, PredictionKind.RF_VELOCITY)
    if not ok:
        what = f"{sched.kind} schedule" + (f" with a {PredictionKind(kind).value} model" if kind else "")
        raise ConfigurationError(f"solver {solver.value} cannot run on a {what}")
    return solver


@dataclass
class SampleConfig:
    solver: SolverKind | str = SolverKind.DDIM
    n_steps: int = 20
    temperature: float = 1.0
    n_samples: int = 256
    clip: tuple[float, float] | None = None
    seed: int = 0
    spacing: str | None = None
    diffusion_x: int = 0
    diffusion_x_stochastic: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.solver = SolverKind(self.solver)
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigurationError("n_steps must be a positive integer")
        if self.solver is SolverKind.ODE_DPMPP_2M and self.n_steps < 2:
            raise ConfigurationError("ode_dpmpp_2m needs at least 2 steps")
        if not (np.isfinite(self.temperature) and self.temperature >= 0):
            raise ConfigurationError("temperature must be finite and non-negative")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be at least 1")
        if self.diffusion_x < 0:
            raise ConfigurationError("diffusion_x repetitions must be non-negative")
        if self.clip is not None:
            lo, hi = self.clip
            if not lo < hi:
                raise ConfigurationError("clip bounds must satisfy lo < hi")
            self.clip = (float(lo), float(hi))


# ---------------------------------------------------------------------------
# Single steps


def _ratio(sched, s, t):
    a_s, s_s = sched.alpha_sigma(s)
    a_t, s_t = sched.alpha_sigma(t)
    return a_s, s_s, a_t, s_t


def ddim_step(x_s, s, t, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    if s == t:
        return np.array(x_s, dtype=float)
    a_s, s_s, a_t, s_t = _ratio(sched, s, t)
    x0 = (x_s - s_s * eps_hat) / a_s
    return a_t * x0 + s_t * eps_hat


def ddpm_step(x_s, s, t, eps_hat, sched: NoiseSchedule, rng: np.random.Generator,
              temperature: float = 1.0) -> np.ndarray:
    """Ancestral step with posterior std ``beta = (sigma_t/sigma_s) sqrt(1 - alpha_s^2/alpha_t^2)``."""
    if s == t:
        return np.array(x_s, dtype=float)
    a_s, s_s, a_t, s_t = _ratio(sched, s, t)
    beta = (s_t / s_s) * np.sqrt(max(1.0 - a_s**2 / a_t**2, 0.0))
    rest = s_t**2 - beta**2
    if rest < -1e-9:
        raise NumericError(f"schedule inconsistency: sigma_t^2 - beta^2 = {rest:.3e}")
    x0 = (x_s - s_s * eps_hat) / a_s
    out = a_t * x0 + np.sqrt(max(rest, 0.0)) * eps_hat
    if temperature > 0:
        out = out + temperature * beta * rng.standard_normal(np.shape(x_s))
    return out


def dpm_solver_1_step(x_s, s, t, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    """First-order exponential integrator in the noise parameterisation."""
    if s == t:
        return np.array(x_s, dtype=float)
    a_s, _, a_t, s_t = _ratio(sched, s, t)
    h = sched.log_snr(t) - sched.log_snr(s)
    return (a_t / a_s) * x_s - s_t * np.expm1(h) * eps_hat


def _clip(x0, clip):
    return x0 if clip is None else np.clip(x0, clip[0], clip[1])


def sde_dpmpp_1_step(x_s, s, t, x0_hat, sched: NoiseSchedule, rng: np.random.Generator,
                     temperature: float = 1.0, clip=None) -> np.ndarray:
    if s == t:
        return np.array(x_s, dtype=float)
    _, s_s, a_t, s_t = _ratio(sched, s, t)
    h = float(sched.log_snr(t) - sched.log_snr(s))
    x0_hat = _clip(x0_hat, clip)
    decay = -np.expm1(-2.0 * h)  # 1 - e^{-2h}
    out = (s_t / s_s) * np.exp(-h) * x_s + a_t * decay * x0_hat
    if temperature > 0:
        out = out + temperature * s_t * np.sqrt(decay) * rng.standard_normal(np.shape(x_s))
    return out


def ode_dpmpp_2m_step(x_s, s, t, x0_s, x0_prev, h_prev, sched: NoiseSchedule, clip=None) -> np.ndarray:
    """Second-order multistep data-prediction step.

    ``x0_prev`` and ``h_prev`` come from the previous step; pass ``None`` for
    the first step, which then falls back to first order.
    """
    if s == t:
        return np.array(x_s, dtype=float)
    _, s_s, a_t, s_t = _ratio(sched, s, t)
    h = float(sched.log_snr(t) - sched.log_snr(s))
    x0_s = _clip(x0_s, clip)
    if x0_prev is None or h_prev is None:
        d = x0_s
    else:
        r = h_prev / h
        if not r > 0:
            raise ConfigurationError(f"log-SNR grid is not monotone (step ratio {r})")
        d = (1.0 + 0.5 / r) * x0_s - (0.5 / r) * _clip(x0_prev, clip)
    return (s_t / s_s) * x_s - a_t * np.expm1(-h) * d


def edm_euler_step(x_s, sigma_s, sigma_t, D) -> np.ndarray:
    if sigma_s == sigma_t:
        return np.array(x_s, dtype=float)
    return x_s + (sigma_t - sigma_s) * (x_s - D) / sigma_s


def edm_heun_step(x_s, sigma_s, sigma_t, D_s, denoise) -> np.ndarray:
    """Trapezoidal correction of the Euler step; ``denoise(x, sigma)`` re-evaluates D."""
    if sigma_s == sigma_t:
        return np.array(x_s, dtype=float)
    d_s = (x_s - D_s) / sigma_s
    x_e = x_s + (sigma_t - sigma_s) * d_s
    if sigma_t == 0:
        return x_e
    d_t = (x_e - denoise(x_e, sigma_t)) / sigma_t
    return x_s + (sigma_t - sigma_s) * 0.5 * (d_s + d_t)


def rf_euler_step(x_s, s, t, v_hat) -> np.ndarray:
    """Integrate dx/dt = -v from ``s`` down to ``t`` (v points from noise to data)."""
    return x_s + (s - t) * v_hat


# ---------------------------------------------------------------------------
# Predictions in the form a stepper needs


class _Predictor:
    """Evaluates the (optionally guided) model and converts its output."""

    def __init__(self, model, guidance=None, cond=None):
        self.model = model
        self.guidance = guidance
        self.cond = cond
        self.sched = model.schedule
        self.kind = PredictionKind(model.kind)
        self.calls = 0

    def native(self, x, t):
        self.calls += 1
        if self.guidance is not None:
            return self.guidance.predict(self.model, x, t)
        if self.cond is None:
            return self.model.predict(x, t)
        return self.model.predict(x, t, self.cond)

    def eps(self, x, t):
        p = self.native(x, t)
        return p if self.kind is PredictionKind.NOISE else data_to_noise(x, t, p, self.sched)

    def x0(self, x, t):
        p = self.native(x, t)
        return p if self.kind is PredictionKind.DATA else noise_to_data(x, t, p, self.sched)


class _Stepper:
    """Carries the multistep history for one chain of steps."""

    def __init__(self, solver: SolverKind, pred: _Predictor, rng, temperature: float, clip):
        self.solver, self.pred, self.rng = solver, pred, rng
        self.temperature, self.clip = temperature, clip
        self.prev_x0 = None
        self.prev_h = None

    def __call__(self, x, s, t, stochastic=None):
        solver, sched, pred = self.solver, self.pred.sched, self.pred
        temp = self.temperature
        if solver is SolverKind.DDIM:
            return ddim_step(x, s, t, pred.eps(x, s), sched)
        if solver is SolverKind.DDPM:
            return ddpm_step(x, s, t, pred.eps(x, s), sched, self.rng, temp)
        if solver is SolverKind.DPM_SOLVER_1:
            return dpm_solver_1_step(x, s, t, pred.eps(x, s), sched)
        if solver is SolverKind.SDE_DPMPP_1:
            return sde_dpmpp_1_step(x, s, t, pred.x0(x, s), sched, self.rng, temp, self.clip)
        if solver is SolverKind.ODE_DPMPP_2M:
            x0 = pred.x0(x, s)
            out = ode_dpmpp_2m_step(x, s, t, x0, self.prev_x0, self.prev_h, sched, self.clip)
            self.prev_x0 = x0
            self.prev_h = float(sched.log_snr(t) - sched.log_snr(s))
            return out
        if solver in EDM_SOLVERS:
            D = _clip(pred.native(x, s), self.clip)
            if solver is SolverKind.EDM_EULER:
                return edm_euler_step(x, s, t, D)
            return edm_heun_step(x, s, t, D, lambda y, sig: _clip(pred.native(y, sig), self.clip))
        return rf_euler_step(x, s, t, pred.native(x, s))


def _finite_or_raise(x, step: int):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite sampler state after step {step}")


def solve(model, x_start, grid: TimeGrid, solver, rng=None, temperature: float = 1.0,
          guidance=None, mask: SampleMask | None = None, clip=None, cond=None) -> np.ndarray:
    """Run ``solver`` over every interval of ``grid``; returns the state at the last node."""
    sched = model.schedule
    solver = check_compatible(solver, sched, model.kind)
    rng = rng if rng is not None else np.random.default_rng()
    stepper = _Stepper(solver, _Predictor(model, guidance, cond), rng, temperature, clip)
    x = apply_mask(np.array(x_start, dtype=float), mask, sched, grid[0], rng)
    for i, (s, t) in enumerate(grid.pairs()):
        x = stepper(x, s, t)
        _finite_or_raise(x, i)
        x = apply_mask(x, mask, sched, t, rng)
    return x


def prior_sample(sched: NoiseSchedule, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    scale = sched.t_max if sched.kind == "edm" else 1.0
    return scale * rng.standard_normal((n, dim))


def repeat_final_step(model, x, grid: TimeGrid, M: int, stochastic: bool = False, rng=None,
                      mask: SampleMask | None = None, guidance=None, cond=None, clip=None) -> np.ndarray:
    """Diffusion-X refinement: re-run the last grid transition ``M`` times.

    The current sample is fed in as if it sat at the second-to-last node and
    mapped again onto the last node.  The deterministic first-order stepper
    of the schedule family is used, or DDPM when ``stochastic`` is set.
    """
    if M <= 0:
        return np.array(x, dtype=float)
    if len(grid) < 2:
        raise ConfigurationError("Diffusion-X needs a grid with at least one interval")
    sched = model.schedule
    if sched.is_vp:
        solver = SolverKind.DDPM if stochastic else SolverKind.DDIM
    else:
        solver = default_solver(sched)
    rng = rng if rng is not None else np.random.default_rng()
    stepper = _Stepper(solver, _Predictor(model, guidance, cond), rng, 1.0, clip)
    s, t = grid[-2], grid[-1]
    for m in range(M):
        x = stepper(x, s, t)
        _finite_or_raise(x, m)
        x = apply_mask(x, mask, sched, t, rng)
    return x


def sample(model, config: SampleConfig, guidance=None, mask: SampleMask | None = None, prior=None,
           cond=None, return_grid: bool = False):
    """Draw ``config.n_samples`` samples (or transport the given ``prior`` batch)."""
    sched = model.schedule
    solver = check_compatible(config.solver, sched, model.kind)
    rng = np.random.default_rng(config.seed)
    if prior is None:
        x = prior_sample(sched, config.n_samples, model.data_dim, rng)
    else:
        x = np.array(prior, dtype=float)
    grid = sched.time_grid(config.n_steps, config.spacing)
    x = solve(model, x, grid, solver, rng, config.temperature, guidance, mask, config.clip, cond)
    x = repeat_final_step(model, x, grid, config.diffusion_x, config.diffusion_x_stochastic, rng, mask,
                          guidance, cond, config.clip)
    if sched.kind == "edm":
        x = _clip(_Predictor(model, guidance, cond).native(x, grid[-1]), config.clip)
        _finite_or_raise(x, grid.n_steps)
    x = apply_mask(x, mask, final=True)
    return (x, grid) if return_grid else x
