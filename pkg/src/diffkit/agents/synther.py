"""Upsample an offline dataset with a diffusion model over single transitions."""

from __future__ import annotations

import numpy as np

from .. import nn
from ..datasets import Normalizer, TrajectoryDataset
from ..diffusion import Denoiser, TrainConfig, train
from ..solvers import SampleConfig, sample
from .common import Agent, BCAgent, resolve_schedule


class TransitionSynthesizer:
    """Unconditional denoiser over flattened ``(s, a, r, s', done)`` rows."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(256, 256, 256), steps: int = 6000,
                 batch_size: int = 256, lr: float = 1e-3, ema_decay: float = 0.999, solver: str = "ddim",
                 sample_steps: int = 128, schedule="linear", temperature: float = 1.0, seed: int = 0):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.row_dim = 2 * obs_dim + act_dim + 2
        self.model = Denoiser(self.row_dim, resolve_schedule(schedule), "noise", hidden_widths=hidden, seed=seed)
        self.cfg = TrainConfig(steps, batch_size, lr, ema_decay, seed=seed)
        self.solver, self.sample_steps, self.seed, self.temperature = solver, sample_steps, seed, temperature
        self.norm = Normalizer.identity(self.row_dim)
        self.trace = np.zeros(0)

    def fit(self, data: TrajectoryDataset) -> "TransitionSynthesizer":
        rows = data.rows()
        self.norm = Normalizer.fit(rows, "gaussian")
        self.trace = train(self.model, self.norm.forward(rows), self.cfg).loss_trace
        return self

    def generate(self, n: int, seed: int | None = None) -> TrajectoryDataset:
        if n == 0:
            return TrajectoryDataset.empty(self.obs_dim, self.act_dim)
        cfg = SampleConfig(self.solver, self.sample_steps, n_samples=n, seed=self.seed + 1 if seed is None else seed,
                           temperature=self.temperature)
        rows = self.norm.inverse(sample(self.model, cfg))
        rows[:, self.obs_dim:self.obs_dim + self.act_dim] = np.clip(
            rows[:, self.obs_dim:self.obs_dim + self.act_dim], -1.0, 1.0)
        return TrajectoryDataset.from_rows(rows, self.obs_dim, self.act_dim, synthetic=True)

    def upsample(self, data: TrajectoryDataset, n: int, seed: int | None = None) -> TrajectoryDataset:
        """Real rows followed by ``n`` synthetic ones; ``n = 0`` returns ``data`` untouched."""
        if n == 0:
            return data
        return data.concat(self.generate(n, seed))

    def state(self):
        return {"model": self.model.params, "model_ema": self.model.eval_params()}

    def meta(self):
        return {"norm": self.norm.to_dict()}

    def load(self, groups, meta):
        self.model.params = groups["model"]
        self.model.ema = nn.EmaState(self.cfg.ema_decay, groups["model_ema"])
        self.norm = Normalizer.from_dict(meta["norm"])


def synthetic_residual(env, data: TrajectoryDataset) -> np.ndarray:
    """``|s' - move(s, a)|`` per row, under the environment's true dynamics."""
    pred = np.array([env.move(s, env.clip_action(a)) for s, a in zip(data.obs, data.actions)])
    return np.linalg.norm(data.next_obs - pred, axis=1)


class SynthERAgent(Agent):
    """BC trained on the real dataset plus ``n_synthetic`` generated transitions."""

    name = "synther"

    def __init__(self, obs_dim: int, act_dim: int, n_synthetic: int = 10_000, seed: int = 0,
                 synth_kw: dict | None = None, bc_kw: dict | None = None):
        self.synth = TransitionSynthesizer(obs_dim, act_dim, seed=seed, **(synth_kw or {}))
        self.bc = BCAgent(obs_dim, act_dim, seed=seed, **(bc_kw or {}))
        self.n_synthetic = n_synthetic
        self.augmented: TrajectoryDataset | None = None

    def fit(self, data, env=None):
        self.synth.fit(data)
        self.augmented = self.synth.upsample(data, self.n_synthetic)
        self.bc.fit(self.augmented)
        return self

    def act(self, obs, rng):
        return self.bc.act(obs, rng)

    def state(self):
        s = self.synth.state()
        return {"synth_model": s["model"], "synth_ema": s["model_ema"], **self.bc.state()}

    def meta(self):
        return {"synth": self.synth.meta(), "bc": self.bc.meta()}

    def load(self, groups, meta):
        self.synth.load({"model": groups["synth_model"], "model_ema": groups["synth_ema"]}, meta["synth"])
        self.bc.load(groups, meta["bc"])
