"""Noise schedules ``(alpha_t, sigma_t)`` and the quantities derived from them.

Four built-in kinds:

``linear``     VP schedule, ``log alpha_t = -(b1 - b0) t^2 / 4 - b0 t / 2``
``cosine``     VP schedule, ``alpha_t = cos(pi/2 (t+s)/(1+s)) / cos(pi/2 s/(1+s))``
``edm``        ``alpha_t = 1``, ``sigma_t = t``
``rectified``  interpolation weights ``(1 - t, t)``

A ``custom`` kind accepts user supplied ``alpha_fn`` / ``sigma_fn`` and goes
through the same contract (derivatives are taken numerically).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ArgumentError, ConfigurationError, DomainError

_DEFAULT_BOUNDS = {
    "linear": (1e-3, 1.0),
    "cosine": (1e-3, 0.9946),
    "edm": (0.002, 80.0),
    "rectified": (0.0, 1.0),
}
_FD_H = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "linear"
    beta0: float = 0.1
    beta1: float = 20.0
    s: float = 0.008
    t_eps: float | None = None
    t_max: float | None = None
    rho: float = 7.0
    alpha_fn: Callable | None = None
    sigma_fn: Callable | None = None

    def __post_init__(self):
        if self.kind == "custom":
            if self.alpha_fn is None or self.sigma_fn is None or self.t_eps is None or self.t_max is None:
                raise ConfigurationError("custom schedules need alpha_fn, sigma_fn, t_eps and t_max")
        elif self.kind in _DEFAULT_BOUNDS:
            lo, hi = _DEFAULT_BOUNDS[self.kind]
            if self.t_eps is None:
                object.__setattr__(self, "t_eps", lo)
            if self.t_max is None:
                object.__setattr__(self, "t_max", hi)
        else:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if not self.t_max > self.t_eps >= 0.0:
            raise ConfigurationError(f"need t_max > t_eps >= 0, got [{self.t_eps}, {self.t_max}]")

    # convenience views -----------------------------------------------------
    @property
    def is_vp(self) -> bool:
        return self.kind in ("linear", "cosine", "custom")

    @property
    def sigma_min(self) -> float:
        return float(self.alpha_sigma(self.t_eps)[1])

    @property
    def sigma_max(self) -> float:
        return float(self.alpha_sigma(self.t_max)[1])

    def describe(self) -> dict:
        d = {"kind": self.kind, "t_eps": self.t_eps, "t_max": self.t_max}
        if self.kind == "linear":
            d.update(beta0=self.beta0, beta1=self.beta1)
        elif self.kind == "cosine":
            d.update(s=self.s)
        elif self.kind == "edm":
            d.update(rho=self.rho)
        return d

    # core functions --------------------------------------------------------
    def _check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, self.t_max)
        if np.any(~np.isfinite(t)) or np.any(t < -tol) or np.any(t > self.t_max + tol):
            raise DomainError(f"t must lie in [0, {self.t_max}] for the {self.kind} schedule")
        return np.clip(t, 0.0, self.t_max)

    def log_alpha(self, t) -> np.ndarray:
        t = self._check(t)
        if self.kind == "linear":
            return -(self.beta1 - self.beta0) / 4.0 * t**2 - self.beta0 / 2.0 * t
        if self.kind == "cosine":
            num = np.cos(0.5 * np.pi * (t + self.s) / (1.0 + self.s))
            den = np.cos(0.5 * np.pi * self.s / (1.0 + self.s))
            return np.log(num / den)
        return np.log(self.alpha_sigma(t)[0])

    def alpha_sigma(self, t) -> tuple[np.ndarray, np.ndarray]:
        t = self._check(t)
        if self.kind in ("linear", "cosine"):
            log_a = self.log_alpha(t)
            alpha = np.exp(log_a)
            sigma = np.sqrt(-np.expm1(2.0 * log_a))
            return alpha, sigma
        if self.kind == "edm":
            return np.ones_like(t), t
        if self.kind == "rectified":
            return 1.0 - t, t
        return np.asarray(self.alpha_fn(t), dtype=float), np.asarray(self.sigma_fn(t), dtype=float)

    def log_snr(self, t) -> np.ndarray:
        """lambda_t = log(alpha_t / sigma_t)."""
        t = self._check(t)
        if self.kind in ("linear", "cosine"):
            log_a = self.log_alpha(t)
            with np.errstate(divide="ignore"):
                return log_a - 0.5 * np.log(-np.expm1(2.0 * log_a))
        if self.kind == "edm":
            with np.errstate(divide="ignore"):
                return -np.log(t)
        alpha, sigma = self.alpha_sigma(t)
        with np.errstate(divide="ignore"):
            return np.log(alpha) - np.log(sigma)

    def drift_diffusion(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Forward SDE coefficients ``f(t) = dlog(alpha)/dt`` and ``g^2(t)``."""
        if self.kind == "rectified":
            raise ConfigurationError("the rectified-flow schedule has no SDE form")
        t = self._check(t)
        if self.kind == "linear":
            f = -0.5 * ((self.beta1 - self.beta0) * t + self.beta0)
            return f, -2.0 * f  # alpha^2 + sigma^2 = 1
        if self.kind == "edm":
            return np.zeros_like(t), 2.0 * t
        lo = np.clip(t - _FD_H, 0.0, self.t_max)
        hi = np.clip(t + _FD_H, 0.0, self.t_max)
        f = (self.log_alpha(hi) - self.log_alpha(lo)) / (hi - lo)
        dsig2 = (self.alpha_sigma(hi)[1] ** 2 - self.alpha_sigma(lo)[1] ** 2) / (hi - lo)
        _, sigma = self.alpha_sigma(t)
        return f, dsig2 - 2.0 * sigma**2 * f

    def perturb(self, x0, t, noise) -> np.ndarray:
        """x_t = alpha_t x0 + sigma_t noise.  ``t`` may be scalar or one per row."""
        alpha, sigma = self.alpha_sigma(t)
        x0 = np.asarray(x0, dtype=float)
        return _col(alpha, x0) * x0 + _col(sigma, x0) * np.asarray(noise, dtype=float)

    def inverse_log_snr(self, lam) -> np.ndarray:
        """Time with the given log-SNR (bisection on the monotone map)."""
        lam = np.asarray(lam, dtype=float)
        lo = np.full(lam.shape, self.t_eps)
        hi = np.full(lam.shape, self.t_max)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            above = self.log_snr(mid) > lam
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return 0.5 * (lo + hi)

    def time_grid(self, n_steps: int, spacing: str | None = None, t_start: float | None = None,
                  t_end: float | None = None) -> "TimeGrid":
        """``n_steps + 1`` strictly decreasing times from ``t_start`` to ``t_end``.

        Spacing rules: ``uniform`` (uniform in t), ``quadratic`` (uniform in
        ``sqrt(t)``), ``power`` (uniform in ``t ** (1/rho)``, the EDM default)
        and ``logsnr`` (uniform in log-SNR).
        """
        if int(n_steps) != n_steps or n_steps < 1:
            raise ArgumentError(f"n_steps must be a positive integer, got {n_steps}")
        n_steps = int(n_steps)
        spacing = spacing or ("power" if self.kind == "edm" else "uniform")
        hi = self.t_max if t_start is None else float(t_start)
        lo = self.t_eps if t_end is None else float(t_end)
        if not hi > lo:
            raise ArgumentError(f"grid start {hi} must exceed grid end {lo}")
        frac = np.arange(n_steps + 1) / n_steps
        if spacing == "uniform":
            times = hi + frac * (lo - hi)
        elif spacing in ("power", "quadratic"):
            r = 1.0 / self.rho if spacing == "power" else 0.5
            times = (hi**r + frac * (lo**r - hi**r)) ** (1.0 / r)
        elif spacing == "logsnr":
            lam = self.log_snr(np.array([hi, lo]))
            times = self.inverse_log_snr(lam[0] + frac * (lam[1] - lam[0]))
        else:
            raise ArgumentError(f"unknown spacing rule {spacing!r}")
        times[0], times[-1] = hi, lo
        return TimeGrid(times, spacing)


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray
    spacing: str

    def __len__(self):
        return len(self.times)

    def __iter__(self):
        return iter(self.times)

    def __getitem__(self, i):
        return self.times[i]

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def pairs(self):
        return zip(self.times[:-1], self.times[1:])


def _col(v, x: np.ndarray):
    """Broadcast a per-row coefficient against a batch ``x`` of shape (n, d)."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1 and x.ndim == 2:
        return v[:, None]
    return v


def linear_schedule(beta0: float = 0.1, beta1: float = 20.0, **kw) -> NoiseSchedule:
    return NoiseSchedule("linear", beta0=beta0, beta1=beta1, **kw)


def cosine_schedule(s: float = 0.008, **kw) -> NoiseSchedule:
    return NoiseSchedule("cosine", s=s, **kw)


def edm_schedule(sigma_min: float = 0.002, sigma_max: float = 80.0, rho: float = 7.0) -> NoiseSchedule:
    return NoiseSchedule("edm", t_eps=sigma_min, t_max=sigma_max, rho=rho)


def rectified_schedule() -> NoiseSchedule:
    return NoiseSchedule("rectified")


def custom_schedule(alpha_fn, sigma_fn, t_eps: float, t_max: float) -> NoiseSchedule:
    return NoiseSchedule("custom", alpha_fn=alpha_fn, sigma_fn=sigma_fn, t_eps=t_eps, t_max=t_max)


def make_schedule(kind: str, **kw) -> NoiseSchedule:
    builders = {
        "linear": linear_schedule,
        "cosine": cosine_schedule,
        "edm": edm_schedule,
        "rectified": rectified_schedule,
    }
    if kind not in builders:
        raise ConfigurationError(f"unknown schedule {kind!r}")
    return builders[kind](**kw)


# Functional spellings used throughout the package.

def alpha_sigma(sched: NoiseSchedule, t):
    return sched.alpha_sigma(t)


def log_snr(sched: NoiseSchedule, t):
    return sched.log_snr(t)


def drift_diffusion(sched: NoiseSchedule, t):
    return sched.drift_diffusion(t)


def perturb(sched: NoiseSchedule, x0, t, noise):
    return sched.perturb(x0, t, noise)


def time_grid(sched: NoiseSchedule, n_steps: int, spacing: str | None = None) -> TimeGrid:
    return sched.time_grid(n_steps, spacing)
