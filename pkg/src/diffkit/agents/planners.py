"""Diffusion planners: whole trajectories are generated and an action is read off.

``DiffuserAgent``       (state, action) windows, classifier guidance by a return regressor,
                        best of N candidates
``DecisionDiffuserAgent`` state-only windows conditioned on normalised return (CFG),
                        actions from an inverse dynamics model
``AdaptDiffuserAgent``  Diffuser that fine-tunes on its own filtered plans
"""

from __future__ import annotations

import warnings

import numpy as np

from .. import nn
from ..datasets import Normalizer, TrajectoryDataset, window
from ..diffusion import Denoiser, TrainConfig, train
from ..guidance import ClassifierGuide, generate_candidates, select_best, train_guidance_classifier, warm_start
from ..masking import SampleMask
from ..solvers import SampleConfig, sample
from .common import Agent, InverseDynamics, resolve_schedule


class _Planner(Agent):
    layout = "sa"

    def __init__(self, obs_dim: int, act_dim: int, H: int = 8, hidden=(256, 256, 256), steps: int = 8000,
                 batch_size: int = 256, lr: float = 1e-3, ema_decay: float = 0.995, solver: str = "sde_dpmpp_1",
                 sample_steps: int = 20, discount: float = 0.97, schedule="linear", temperature: float = 1.0,
                 clip=(-1.0, 1.0), seed: int = 0, cond_dim: int = 0):
        if H < 2:
            raise ValueError("planning horizon must be at least 2")
        self.obs_dim, self.act_dim, self.H = obs_dim, act_dim, H
        self.step_dim = obs_dim + (act_dim if self.layout == "sa" else 0)
        self.model = Denoiser(H * self.step_dim, resolve_schedule(schedule), "noise", cond_dim=cond_dim,
                              hidden_widths=hidden, seed=seed)
        self.steps, self.batch_size, self.lr, self.ema_decay = steps, batch_size, lr, ema_decay
        self.solver, self.sample_steps, self.seed = solver, sample_steps, seed
        self.discount, self.temperature, self.clip = discount, temperature, clip
        self.norm = Normalizer.identity(self.step_dim)
        self.trace = np.zeros(0)
        self._calls = 0

    # -- data --------------------------------------------------------------
    def windows(self, data: TrajectoryDataset):
        w = window(data, self.H, stride=1, gamma=self.discount)
        per_step = np.concatenate([w.obs, w.actions], axis=2) if self.layout == "sa" else w.obs
        return w, per_step

    def encode(self, per_step) -> np.ndarray:
        return self.norm.forward(per_step).reshape(len(per_step), -1)

    def decode(self, flat) -> np.ndarray:
        return self.norm.inverse(np.asarray(flat).reshape(-1, self.H, self.step_dim))

    def _train_model(self, x, cond=None, dropout: float = 0.0, steps: int | None = None, seed_offset: int = 0):
        cfg = TrainConfig(steps or self.steps, self.batch_size, self.lr, self.ema_decay, dropout,
                          seed=self.seed + seed_offset)
        res = train(self.model, x, cfg, cond=cond)
        self.trace = np.concatenate([self.trace, res.loss_trace])

    def state_mask(self, obs) -> SampleMask:
        """Freeze slot 0's state coordinates to the (normalised) current state."""
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        known = np.zeros((len(obs), self.H * self.step_dim))
        mask = np.zeros(self.H * self.step_dim)
        mask[: self.obs_dim] = 1.0
        pad = np.zeros((len(obs), self.step_dim - self.obs_dim))
        known[:, : self.step_dim] = self.norm.forward(np.concatenate([obs, pad], axis=1))
        return SampleMask(mask, known)

    def _seed(self, rng) -> int:
        return int(rng.integers(2**31))

    def state(self):
        return {"model": self.model.params, "model_ema": self.model.eval_params()}

    def meta(self):
        return {"norm": self.norm.to_dict()}

    def load(self, groups, meta):
        self.model.params = groups["model"]
        self.model.ema = nn.EmaState(self.ema_decay, groups["model_ema"])
        self.norm = Normalizer.from_dict(meta["norm"])


class DiffuserAgent(_Planner):
    """Inpaint the current state, guide toward high predicted return, keep the best of N.

    Plans are sampled at temperature 0.5 by default, which trims the
    behaviour noise that the planner otherwise reproduces.
    """

    name = "diffuser"
    layout = "sa"

    def __init__(self, obs_dim, act_dim, w: float = 0.3, n_candidates: int = 64, classifier_steps: int = 2000,
                 warm: tuple[float, int] | None = None, temperature: float = 0.5, **kw):
        super().__init__(obs_dim, act_dim, temperature=temperature, **kw)
        if n_candidates < 1:
            raise ValueError("need at least one candidate")
        self.w, self.n_candidates, self.classifier_steps = w, n_candidates, classifier_steps
        self.warm = warm
        self.guide: ClassifierGuide | None = None
        self._prev: np.ndarray | None = None

    def fit(self, data, env=None):
        w, per_step = self.windows(data)
        valid = per_step[w.valid]
        self.norm = Normalizer.fit(valid, "minmax")
        x = self.encode(per_step)
        self._train_model(x)
        self.guide = train_guidance_classifier(x, w.returns_to_go, self.model.schedule, self.classifier_steps,
                                               seed=self.seed + 7, w=self.w)
        return self

    def plan(self, obs, rng, n_candidates: int | None = None):
        """Best candidate plan (decoded), all candidates and their scores.

        With ``warm = (t_w, k)`` and a previous plan, candidates come from
        re-noising that plan (shifted one step) to ``t_w`` and refining it
        with ``k`` steps instead of a full chain.
        """
        n = n_candidates or self.n_candidates
        mask = self.state_mask(obs)
        if self.warm is not None and self._prev is not None:
            shifted = np.concatenate([self._prev[self.step_dim:], self._prev[-self.step_dim:]])
            t_w, k = self.warm
            cand = warm_start(np.repeat(shifted[None], n, axis=0), self.model, t_w, int(k), self.solver, rng,
                              self.guide, SampleMask(mask.mask, np.repeat(mask.known, n, axis=0)))
            scores = self.guide.scorer.value(cand, self.model.schedule.t_eps) if self.guide else np.zeros(n)
        else:
            cfg = SampleConfig(self.solver, self.sample_steps, n_samples=n, seed=self._seed(rng), clip=self.clip,
                               temperature=self.temperature)
            c, s = generate_candidates(self.model, cfg, n, self.guide, mask)
            cand, scores = c[0], s[0]
        best, idx = select_best(cand, scores)
        self._prev = best[0]
        return self.decode(best)[0], cand, scores

    def reset(self, env, rng):
        super().reset(env, rng)
        self._prev = None

    def act(self, obs, rng):
        plan, _, _ = self.plan(obs, rng)
        return np.clip(plan[0, self.obs_dim:], -1.0, 1.0)

    def state(self):
        return {**super().state(), "classifier": self.guide.scorer.params}

    def meta(self):
        sc = self.guide.scorer
        return {**super().meta(), "classifier_shift": sc.out_shift, "classifier_scale": sc.out_scale}

    def load(self, groups, meta):
        super().load(groups, meta)
        from ..guidance import NoisyRegressor

        hidden = tuple(groups["classifier"][k].shape[1] for k in sorted(groups["classifier"]) if k.endswith(".w")
                       and k.startswith("h"))
        reg = NoisyRegressor(self.model.data_dim, self.model.schedule, hidden, params=groups["classifier"])
        reg.out_shift, reg.out_scale = meta["classifier_shift"], meta["classifier_scale"]
        self.guide = ClassifierGuide(reg, self.w)


class ReturnStateGuide:
    """CFG over the return part of a ``[return, dropped flag, state]`` condition.

    The current state stays visible to both branches; only the return is
    replaced by the null token in the unconditional branch.
    """

    def __init__(self, y: float, w: float, states):
        self.y, self.w = float(y), float(w)
        self.states = np.atleast_2d(np.asarray(states, dtype=float))

    def payload(self, n: int, null: bool) -> np.ndarray:
        s = np.broadcast_to(self.states, (n, self.states.shape[1])) if len(self.states) == 1 else self.states
        head = np.tile([0.0, 1.0] if null else [self.y, 0.0], (n, 1))
        return np.concatenate([head, s], axis=1)

    def predict(self, model, x, t):
        n = len(x)
        cond = model.predict(x, t, self.payload(n, False))
        if self.w == 1:
            return cond
        uncond = model.predict(x, t, self.payload(n, True))
        return uncond + self.w * (cond - uncond)


class DecisionDiffuserAgent(_Planner):
    """Return-conditioned state plans; the action comes from inverse dynamics."""

    name = "dd"
    layout = "s"

    def __init__(self, obs_dim, act_dim, w: float = 1.2, target_return: float = 0.9, cond_dropout: float = 0.25,
                 invdyn_steps: int = 3000, discount: float = 1.0, **kw):
        super().__init__(obs_dim, act_dim, cond_dim=2 + obs_dim, discount=discount, **kw)
        self.w, self.target_return, self.cond_dropout = w, target_return, cond_dropout
        self.invdyn = InverseDynamics(obs_dim, act_dim, seed=self.seed + 5)
        self.invdyn_steps = invdyn_steps
        self.ret_lo, self.ret_hi = 0.0, 1.0

    def normalise_return(self, r) -> np.ndarray:
        span = self.ret_hi - self.ret_lo
        return (np.asarray(r, dtype=float) - self.ret_lo) / (span if span > 0 else 1.0)

    def fit(self, data, env=None):
        w, per_step = self.windows(data)
        self.norm = Normalizer.fit(per_step[w.valid], "minmax")
        self.ret_lo, self.ret_hi = float(w.returns_to_go.min()), float(w.returns_to_go.max())
        x = self.encode(per_step)
        y = self.normalise_return(w.returns_to_go)
        drop = np.random.default_rng(self.seed + 4).random(len(y)) < self.cond_dropout
        cond = np.column_stack([np.where(drop, 0.0, y), drop.astype(float), x[:, : self.obs_dim]])
        self._train_model(x, cond)
        self.invdyn.fit(data.obs.astype(float), data.next_obs.astype(float), data.actions.astype(float),
                        self.invdyn_steps, seed=self.seed + 6)
        return self

    def plan(self, obs, rng, target: float | None = None, n: int = 1) -> np.ndarray:
        y = self.target_return if target is None else target
        mask = self.state_mask(np.broadcast_to(np.atleast_2d(obs), (n, self.obs_dim)))
        guide = ReturnStateGuide(y, self.w, mask.known[:, : self.obs_dim])
        cfg = SampleConfig(self.solver, self.sample_steps, n_samples=n, seed=self._seed(rng), clip=self.clip,
                           temperature=self.temperature)
        return self.decode(sample(self.model, cfg, guide, mask))

    def act(self, obs, rng):
        states = self.plan(obs, rng)[0]
        return self.invdyn(states[0], states[1])[0]

    def state(self):
        return {**super().state(), "invdyn": self.invdyn.net.params}

    def meta(self):
        return {**super().meta(), "invdyn_norm": self.invdyn.in_norm.to_dict(), "ret_lo": self.ret_lo,
                "ret_hi": self.ret_hi}

    def load(self, groups, meta):
        super().load(groups, meta)
        self.invdyn.net.params = groups["invdyn"]
        self.invdyn.in_norm = Normalizer.from_dict(meta["invdyn_norm"])
        self.ret_lo, self.ret_hi = meta["ret_lo"], meta["ret_hi"]


def dynamics_residual(env, states, actions) -> np.ndarray:
    """Per-step distance between planned next states and the true dynamics."""
    states, actions = np.asarray(states), np.asarray(actions)
    pred = np.array([env.move(s, env.clip_action(a)) for s, a in zip(states[:-1], actions[:-1])])
    return np.linalg.norm(states[1:] - pred, axis=1)


class AdaptDiffuserAgent(DiffuserAgent):
    """Diffuser that fine-tunes on self-generated plans that pass a discriminator."""

    name = "adaptdiffuser"

    def __init__(self, obs_dim, act_dim, rounds: int = 1, n_generate: int = 256, max_residual: float = 0.05,
                 return_quantile: float = 0.5, finetune_steps: int = 1000, **kw):
        super().__init__(obs_dim, act_dim, **kw)
        self.rounds, self.n_generate = rounds, n_generate
        self.max_residual, self.return_quantile, self.finetune_steps = max_residual, return_quantile, finetune_steps
        self.history: list[dict] = []

    def fit(self, data, env=None):
        super().fit(data, env)
        if env is not None and self.rounds > 0:
            self.evolve(data, env, self.rounds)
        return self

    def discriminate(self, env, plans) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Keep mask plus per-plan mean residual and realised return."""
        res = np.array([dynamics_residual(env, p[:, :self.obs_dim], p[:, self.obs_dim:]).mean() for p in plans])
        ret = np.array([sum(env.reward_at(s, env.goal_hit(s)) for s in p[1:, :self.obs_dim]) for p in plans])
        keep = res < self.max_residual
        if keep.any():
            keep &= ret >= np.quantile(ret[keep], self.return_quantile)
        return keep, res, ret

    def evolve(self, data, env, rounds: int, discriminator=None) -> list[dict]:
        """Generate, filter and fine-tune ``rounds`` times.

        ``discriminator(env, plans) -> keep mask`` overrides the default filter.
        """
        rng = np.random.default_rng(self.seed + 11)
        w, per_step = self.windows(data)
        real = self.encode(per_step)
        for k in range(rounds):
            starts = data.obs[rng.integers(0, len(data), size=self.n_generate)].astype(float)
            cfg = SampleConfig(self.solver, self.sample_steps, n_samples=len(starts), seed=self._seed(rng),
                               clip=self.clip, temperature=self.temperature)
            x = sample(self.model, cfg, self.guide, self.state_mask(starts))
            plans = self.decode(x)
            if discriminator is None:
                keep, res, ret = self.discriminate(env, plans)
            else:
                keep = np.asarray(discriminator(env, plans), dtype=bool)
                res = ret = np.full(len(plans), np.nan)
            info = {"round": k, "generated": len(plans), "kept": int(keep.sum()),
                    "mean_residual_all": float(np.nanmean(res)) if np.isfinite(res).any() else None,
                    "mean_residual_kept": float(np.nanmean(res[keep])) if keep.any() and np.isfinite(res).any()
                    else None}
            self.history.append(info)
            if not keep.any():
                warnings.warn(f"evolution round {k}: no generated plan passed the discriminator; skipped")
                continue
            mixed = np.concatenate([real, x[keep]])
            self._train_model(mixed, steps=self.finetune_steps, seed_offset=100 + k)
        return self.history
