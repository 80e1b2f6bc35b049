"""Toy generative tasks and sample-quality metrics used by sweeps and tests."""

from __future__ import annotations

import numpy as np

from . import nn
from .diffusion import Denoiser, TrainConfig, score_matching_loss, train
from .errors import ArgumentError


def ring_centers(k: int = 8, radius: float = 1.0) -> np.ndarray:
    ang = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gmm_data(n: int, rng: np.random.Generator, k: int = 8, radius: float = 1.0, std: float = 0.08):
    """``n`` points from an equal-weight ring of ``k`` Gaussians; returns (points, labels)."""
    labels = rng.integers(0, k, size=n)
    return ring_centers(k, radius)[labels] + std * rng.standard_normal((n, 2)), labels


def mode_histogram(x, centers) -> np.ndarray:
    """Fraction of samples whose nearest centre is each mode."""
    d = np.linalg.norm(np.asarray(x)[:, None, :] - np.asarray(centers)[None], axis=2)
    return np.bincount(d.argmin(axis=1), minlength=len(centers)) / len(x)


def direction_modes(actions, k: int = 8) -> np.ndarray:
    """Histogram of action directions over ``k`` equal angular sectors centred on the ring modes."""
    a = np.asarray(actions, dtype=float)
    ang = np.arctan2(a[:, 1], a[:, 0])
    idx = np.round(ang / (2 * np.pi / k)).astype(int) % k
    return np.bincount(idx, minlength=k) / len(a)


def _mean_pairwise(a, b, chunk: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        d = np.linalg.norm(a[i:i + chunk, None, :] - b[None], axis=2)
        total += d.sum()
    return total / (len(a) * len(b))


def energy_distance(x, y) -> float:
    """2 E|X - Y| - E|X - X'| - E|Y - Y'| (V-statistic form)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ArgumentError("energy distance needs two (n, d) arrays of equal width")
    return 2 * _mean_pairwise(x, y) - _mean_pairwise(x, x) - _mean_pairwise(y, y)


def nearest_distance(x, data) -> np.ndarray:
    """Distance from each row of ``x`` to its nearest row of ``data``."""
    x, data = np.asarray(x, dtype=float), np.asarray(data, dtype=float)
    out = np.empty(len(x))
    for i in range(0, len(x), 512):
        out[i:i + 512] = np.linalg.norm(x[i:i + 512, None, :] - data[None], axis=2).min(axis=1)
    return out


def eval_loss(model: Denoiser, x0, params, seed: int = 0) -> float:
    """Denoising loss on held-out data with noise fixed by ``seed``."""
    loss, _ = score_matching_loss(model, x0, rng=np.random.default_rng(seed), params=params)
    return loss


def ema_sweep(model: Denoiser, x_train, x_eval, cfg: TrainConfig, rates, checkpoint_every: int,
              eval_seed: int = 0) -> dict[str, list[float]]:
    """Train once while tracking one EMA per rate.

    Returns evaluation-loss traces keyed ``"raw"`` and ``"ema-<rate>"``, one
    entry per checkpoint.
    """
    if checkpoint_every < 1:
        raise ArgumentError("checkpoint interval must be positive")
    tracks = {r: nn.EmaState.from_params(r, model.params) for r in rates}
    traces: dict[str, list[float]] = {"raw": [], **{f"ema-{r}": [] for r in rates}}

    def on_step(step, m):
        for r in tracks:
            tracks[r] = nn.ema_update(tracks[r], m.params)
        if step % checkpoint_every == 0:
            traces["raw"].append(eval_loss(m, x_eval, m.params, eval_seed))
            for r, ema in tracks.items():
                traces[f"ema-{r}"].append(eval_loss(m, x_eval, ema.shadow, eval_seed))

    train(model, x_train, cfg, callback=on_step, callback_every=1)
    return traces
