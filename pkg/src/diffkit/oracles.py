"""Closed-form predictors for Gaussian and point-mass data.

These stand in for trained denoisers wherever the exact answer is known,
which lets solver accuracy be measured without training noise.  They
expose the same ``kind`` / ``schedule`` / ``predict`` surface as
:class:`diffkit.diffusion.Denoiser`.
"""

from __future__ import annotations

import numpy as np

from .diffusion import PredictionKind
from .schedules import NoiseSchedule, _col

_RF_T_FLOOR = 1e-3


def _default_kind(sched: NoiseSchedule) -> PredictionKind:
    if sched.kind == "edm":
        return PredictionKind.EDM_RAW
    if sched.kind == "rectified":
        return PredictionKind.RF_VELOCITY
    return PredictionKind.NOISE


class GaussianOracle:
    """Exact predictions for data ~ N(mean, diag(var))."""

    def __init__(self, mean, var, schedule: NoiseSchedule, kind=None):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.var = np.broadcast_to(np.asarray(var, dtype=float), self.mean.shape).copy()
        self.schedule = schedule
        self.kind = PredictionKind(kind) if kind is not None else _default_kind(schedule)
        self.data_dim = self.mean.size
        self.cond_dim = 0
        self.forward_count = 0

    def predict(self, x, t, cond=None, null=None) -> np.ndarray:
        self.forward_count += 1
        x = np.asarray(x, dtype=float)
        alpha, sigma = self.schedule.alpha_sigma(t)
        a, s = _col(alpha, x), _col(sigma, x)
        mu, v = self.mean, self.var
        denom = a**2 * v + s**2
        resid = x - a * mu
        if self.kind is PredictionKind.NOISE:
            return s * resid / denom
        if self.kind is PredictionKind.RF_VELOCITY:
            return mu + ((1.0 - _col(t, x)) * v - _col(t, x)) / denom * resid
        # data and EDM both want E[x0 | x_t]
        return mu + a * v / denom * resid

    def ode_solution(self, x_T, t_from, t_to) -> np.ndarray:
        """Exact probability-flow transport of ``x_T`` from ``t_from`` to ``t_to``."""
        a0, s0 = self.schedule.alpha_sigma(t_from)
        a1, s1 = self.schedule.alpha_sigma(t_to)
        z = (np.asarray(x_T, dtype=float) - a0 * self.mean) / np.sqrt(a0**2 * self.var + s0**2)
        return a1 * self.mean + np.sqrt(a1**2 * self.var + s1**2) * z

    def marginal(self, t) -> tuple[np.ndarray, np.ndarray]:
        """Mean and per-dimension variance of x_t."""
        a, s = self.schedule.alpha_sigma(t)
        return a * self.mean, a**2 * self.var + s**2


class PointMassOracle:
    """Exact predictions when all data sits at a single point ``c``."""

    def __init__(self, c, schedule: NoiseSchedule, kind=None):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))
        self.schedule = schedule
        self.kind = PredictionKind(kind) if kind is not None else _default_kind(schedule)
        self.data_dim = self.c.size
        self.cond_dim = 0
        self.forward_count = 0

    def predict(self, x, t, cond=None, null=None) -> np.ndarray:
        self.forward_count += 1
        x = np.asarray(x, dtype=float)
        if self.kind is PredictionKind.NOISE:
            alpha, sigma = self.schedule.alpha_sigma(t)
            return (x - _col(alpha, x) * self.c) / _col(sigma, x)
        if self.kind is PredictionKind.RF_VELOCITY:
            return (self.c - x) / _col(np.maximum(t, _RF_T_FLOOR), x)
        return np.broadcast_to(self.c, x.shape).copy()
