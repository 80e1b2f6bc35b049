"""Diffusion policies: actions generated directly from observations.

``DQLAgent``           diffusion actor + twin critic, Q term backpropagated through the chain
``EDPAgent``           same objective with one-step approximate actions and an expectile critic
``IDQLAgent``          behaviour-cloned diffusion actor, candidates reweighted by an expectile critic
``DiffusionBCAgent``   observation-history conditioned actor with Diffusion-X refinement
``DiffusionPolicyAgent`` action chunks executed open loop before replanning
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .. import nn
from ..datasets import Normalizer, TrajectoryDataset
from ..diffusion import Condition, Denoiser, TrainConfig, score_matching_loss, train
from ..errors import ConfigurationError
from ..solvers import SampleConfig, sample
from .common import Agent, QCritic, ValueNet, expectile_weights, resolve_schedule


def _make_actor(act_dim: int, cond_dim: int, hidden, seed: int, schedule="linear", **kw) -> Denoiser:
    return Denoiser(act_dim, resolve_schedule(schedule), "noise", cond_dim=cond_dim, hidden_widths=hidden, seed=seed, **kw)


class _Batches:
    """Uniform minibatches of normalised transitions."""

    def __init__(self, data: TrajectoryDataset, obs_norm: Normalizer, seed: int):
        self.s = obs_norm.forward(data.obs)
        self.s2 = obs_norm.forward(data.next_obs)
        self.a = data.actions.astype(float)
        self.r = data.rewards.astype(float)
        self.d = data.terminals.astype(float)
        self.rng = np.random.default_rng(seed)

    def __call__(self, n: int):
        i = self.rng.integers(0, len(self.r), size=n)
        return self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i]


# ---------------------------------------------------------------------------
# Differentiable DDPM chain


def ddpm_chain(model: Denoiser, cond, rng: np.random.Generator, n_steps: int, params=None,
               bound: float = 1.0, temperature: float = 1.0):
    """Sample actions with a short ancestral chain, keeping what backprop needs.

    Returns ``(actions, tape)``; feed the tape to :func:`chain_backward`.
    """
    sched = model.schedule
    params = model.params if params is None else params
    n = len(cond)
    x = rng.standard_normal((n, model.data_dim))
    tape = []
    for s, t in sched.time_grid(n_steps).pairs():
        out, cache = model.raw(x, s, cond, None, params, return_cache=True)
        (a_s, s_s), (a_t, s_t) = sched.alpha_sigma(s), sched.alpha_sigma(t)
        beta = (s_t / s_s) * np.sqrt(max(1.0 - a_s**2 / a_t**2, 0.0))
        k_x = a_t / a_s
        k_e = np.sqrt(max(s_t**2 - beta**2, 0.0)) - a_t * s_s / a_s
        x = k_x * x + k_e * out + temperature * beta * rng.standard_normal(x.shape)
        tape.append((cache, k_x, k_e))
    inside = np.abs(x) <= bound
    return np.clip(x, -bound, bound), (tape, inside)


def chain_backward(model: Denoiser, tape, upstream, params=None, one_step: bool = False) -> nn.ParamSet:
    """Parameter gradient of ``sum(upstream * actions)`` through the chain.

    ``one_step`` keeps only the final denoising step in the graph.
    """
    params = model.params if params is None else params
    steps, inside = tape
    g = upstream * inside
    total = None
    for cache, k_x, k_e in reversed(steps[-1:] if one_step else steps):
        pg, g_x = model.vjp(cache, k_e * g, params)
        total = pg if total is None else nn.add_grads(total, pg)
        g = k_x * g + g_x
    return total


# ---------------------------------------------------------------------------
# Shared actor-critic plumbing


class _DiffusionActorCritic(Agent):
    def __init__(self, obs_dim: int, act_dim: int, hidden=(128, 128, 128), critic_hidden=(128, 128),
                 steps: int = 3000, batch_size: int = 256, lr: float = 3e-4, ema_decay: float = 0.995,
                 sample_steps: int = 5, n_candidates: int = 16, critic_lr: float = 1e-3, schedule="linear",
                 temperature: float = 1.0, seed: int = 0):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.actor = _make_actor(act_dim, obs_dim, hidden, seed, schedule)
        self.temperature = temperature
        self.critic = QCritic(obs_dim, act_dim, critic_hidden, lr=critic_lr, seed=seed + 1)
        self.steps, self.batch_size, self.lr, self.ema_decay = steps, batch_size, lr, ema_decay
        self.sample_steps, self.n_candidates, self.seed = sample_steps, n_candidates, seed
        self.obs_norm = Normalizer.identity(obs_dim)
        self.trace: dict[str, list] = {"actor": [], "critic": []}
        self.train_forward_passes = 0

    def _prepare(self, data):
        self.obs_norm = Normalizer.fit(data.obs, "gaussian")
        self.actor.ema = nn.EmaState.from_params(self.ema_decay, self.actor.params)
        return _Batches(data, self.obs_norm, self.seed + 2), nn.AdamState.init(self.actor.params, lr=self.lr)

    def _actor_step(self, adam, grads):
        self.actor.params, adam = nn.adam_step(adam, self.actor.params, grads)
        self.actor.ema = nn.ema_update(self.actor.ema, self.actor.params)
        return adam

    def candidates(self, obs, rng, n: int) -> np.ndarray:
        s = np.repeat(self.obs_norm.forward(np.atleast_2d(obs)), n, axis=0)
        a, _ = ddpm_chain(self.actor, s, rng, self.sample_steps, self.actor.eval_params(),
                          temperature=self.temperature)
        return a

    def act(self, obs, rng):
        cand = self.candidates(obs, rng, self.n_candidates)
        s = np.repeat(self.obs_norm.forward(np.atleast_2d(obs)), len(cand), axis=0)
        return cand[int(np.argmax(self.critic.q_min(s, cand)))]

    def state(self):
        return {"actor": self.actor.params, "actor_ema": self.actor.eval_params(), **self.critic.state()}

    def meta(self):
        return {"obs_norm": self.obs_norm.to_dict()}

    def load(self, groups, meta):
        self.actor.params = groups["actor"]
        self.actor.ema = nn.EmaState(self.ema_decay, groups["actor_ema"])
        self.critic.load(groups)
        self.obs_norm = Normalizer.from_dict(meta["obs_norm"])


class DQLAgent(_DiffusionActorCritic):
    """Behaviour cloning plus ``alpha * Q`` maximisation, alpha = eta / mean|Q|."""

    name = "dql"

    def __init__(self, obs_dim, act_dim, eta: float = 1.0, one_step: bool = False, **kw):
        super().__init__(obs_dim, act_dim, **kw)
        self.eta, self.one_step = eta, one_step

    @staticmethod
    def q_weight(eta: float, q) -> float:
        """alpha = eta / E|Q|, a constant with respect to the actor parameters."""
        return float(eta / max(np.mean(np.abs(q)), 1e-8))

    def fit(self, data, env=None):
        batches, adam = self._prepare(data)
        rng = np.random.default_rng(self.seed + 3)
        n_before = self.actor.forward_count
        for _ in range(self.steps):
            s, a, r, s2, d = batches(self.batch_size)
            # critic first
            a2, _ = ddpm_chain(self.actor, s2, rng, self.sample_steps)
            target = self.critic.bellman_target(r, d, self.critic.q_min(s2, a2, target=True))
            self.trace["critic"].append(self.critic.update(s, a, target))
            # actor
            bc, grads = score_matching_loss(self.actor, a, s, rng)
            if self.eta > 0:
                a0, tape = ddpm_chain(self.actor, s, rng, self.sample_steps)
                q, dq = self.critic.action_grad(s, a0, which=int(rng.integers(2)))
                alpha = self.q_weight(self.eta, q)
                qg = chain_backward(self.actor, tape, -alpha * dq / len(q), one_step=self.one_step)
                grads = nn.add_grads(grads, qg)
            adam = self._actor_step(adam, grads)
            self.trace["actor"].append(bc)
        self.train_forward_passes = self.actor.forward_count - n_before
        return self


def edp_approx_action(a_t, t, prediction, model: Denoiser) -> np.ndarray:
    """One-shot clean-action estimate from a single denoiser evaluation."""
    from ..diffusion import PredictionKind, noise_to_data

    if model.kind is PredictionKind.DATA:
        return np.asarray(prediction, dtype=float)
    return noise_to_data(a_t, t, prediction, model.schedule)


class _ExpectileCritic:
    """Q trained toward r + gamma V(s'); V fitted by expectile regression on target Q."""

    def __init__(self, critic: QCritic, value: ValueNet):
        self.critic, self.value = critic, value

    def step(self, s, a, r, s2, d) -> float:
        self.value.update(s, self.critic.q_min(s, a, target=True))
        return self.critic.update(s, a, self.critic.bellman_target(r, d, self.value(s2)))


class EDPAgent(_DiffusionActorCritic):
    """DQL objective with approximate actions: no sampling chain during training."""

    name = "edp"

    def __init__(self, obs_dim, act_dim, eta: float = 1.0, tau: float = 0.7, n_candidates: int = 1, **kw):
        super().__init__(obs_dim, act_dim, n_candidates=n_candidates, **kw)
        self.eta = eta
        self.value = ValueNet(obs_dim, tau, seed=self.seed + 4)

    def fit(self, data, env=None):
        batches, adam = self._prepare(data)
        crit = _ExpectileCritic(self.critic, self.value)
        rng = np.random.default_rng(self.seed + 3)
        sched = self.actor.schedule
        n_before = self.actor.forward_count
        for _ in range(self.steps):
            s, a, r, s2, d = batches(self.batch_size)
            self.trace["critic"].append(crit.step(s, a, r, s2, d))
            n = len(a)
            t = rng.uniform(sched.t_eps, sched.t_max, size=n)
            eps = rng.standard_normal(a.shape)
            a_t = sched.perturb(a, t, eps)
            out, cache = self.actor.raw(a_t, t, s, None, self.actor.params, return_cache=True)
            diff = out - eps
            up = 2.0 * diff / diff.size
            if self.eta > 0:
                a0 = edp_approx_action(a_t, t, out, self.actor)
                inside = np.abs(a0) <= 1.0
                q, dq = self.critic.action_grad(s, np.clip(a0, -1, 1), which=int(rng.integers(2)))
                alpha = DQLAgent.q_weight(self.eta, q)
                alpha_t, sigma_t = sched.alpha_sigma(t)
                # d a0 / d eps_hat = -sigma_t / alpha_t
                up = up + (-alpha * dq / n) * inside * (-(sigma_t / alpha_t)[:, None])
            grads, _ = self.actor.vjp(cache, up, self.actor.params)
            adam = self._actor_step(adam, grads)
            self.trace["actor"].append(float(np.mean(diff**2)))
        self.train_forward_passes = self.actor.forward_count - n_before
        return self

    def state(self):
        return {**super().state(), "value": self.value.net.params}

    def load(self, groups, meta):
        super().load(groups, meta)
        self.value.net.params = groups["value"]


class IDQLAgent(_DiffusionActorCritic):
    """Behaviour diffusion actor; decisions resample candidates by expectile weights."""

    name = "idql"

    def __init__(self, obs_dim, act_dim, tau: float = 0.7, greedy: bool = False, n_candidates: int = 64,
                 critic_steps: int | None = None, **kw):
        super().__init__(obs_dim, act_dim, n_candidates=n_candidates, **kw)
        self.tau, self.greedy = tau, greedy
        self.critic_steps = critic_steps
        self.value = ValueNet(obs_dim, tau, seed=self.seed + 4)

    def fit(self, data, env=None):
        batches, _ = self._prepare(data)
        s_all = self.obs_norm.forward(data.obs)
        res = train(self.actor, data.actions.astype(float),
                    TrainConfig(self.steps, self.batch_size, self.lr, self.ema_decay, seed=self.seed), cond=s_all)
        self.trace["actor"] = list(res.loss_trace)
        crit = _ExpectileCritic(self.critic, self.value)
        for _ in range(self.critic_steps or self.steps):
            self.trace["critic"].append(crit.step(*batches(self.batch_size)))
        return self

    def weights(self, obs, cand) -> np.ndarray:
        s = np.repeat(self.obs_norm.forward(np.atleast_2d(obs)), len(cand), axis=0)
        w = expectile_weights(self.critic.q_min(s, cand), self.value(s), self.tau)
        return w / w.sum()

    def act(self, obs, rng):
        cand = self.candidates(obs, rng, self.n_candidates)
        if self.greedy:
            s = np.repeat(self.obs_norm.forward(np.atleast_2d(obs)), len(cand), axis=0)
            return cand[int(np.argmax(self.critic.q_min(s, cand)))]
        return cand[rng.choice(len(cand), p=self.weights(obs, cand))]

    def state(self):
        return {**super().state(), "value": self.value.net.params}

    def load(self, groups, meta):
        super().load(groups, meta)
        self.value.net.params = groups["value"]


# ---------------------------------------------------------------------------
# Imitation policies


def obs_history(data: TrajectoryDataset, T_s: int) -> np.ndarray:
    """For each transition, the ``T_s`` latest observations (oldest first), padded at episode start."""
    out = np.empty((len(data), T_s * data.obs_dim))
    for s0, L in zip(data.episode_starts, data.episode_lengths):
        ep = data.obs[s0:s0 + L].astype(float)
        for k in range(L):
            idx = np.clip(np.arange(k - T_s + 1, k + 1), 0, None)
            out[s0 + k] = ep[idx].reshape(-1)
    return out


class _HistoryAgent(Agent):
    def __init__(self, obs_dim, act_dim, T_s: int = 2, hidden=(128, 128, 128), steps: int = 4000,
                 batch_size: int = 256, lr: float = 1e-3, ema_decay: float = 0.995, solver: str = "ddpm",
                 sample_steps: int = 20, schedule="linear", temperature: float = 1.0, seed: int = 0,
                 out_dim: int | None = None):
        self.obs_dim, self.act_dim, self.T_s = obs_dim, act_dim, T_s
        self.model = _make_actor(out_dim or act_dim, T_s * obs_dim, hidden, seed, schedule)
        self.temperature = temperature
        self.steps, self.batch_size, self.lr, self.ema_decay, self.seed = steps, batch_size, lr, ema_decay, seed
        self.solver, self.sample_steps = solver, sample_steps
        self.obs_norm = Normalizer.identity(obs_dim)
        self.trace = np.zeros(0)
        self._hist: deque = deque(maxlen=T_s)

    def cond(self, history) -> np.ndarray:
        h = np.asarray(history, dtype=float).reshape(-1, self.T_s, self.obs_dim)
        return self.obs_norm.forward(h).reshape(len(h), -1)

    def _fit(self, data, targets):
        self.obs_norm = Normalizer.fit(data.obs, "gaussian")
        hist = obs_history(data, self.T_s)
        res = train(self.model, targets, TrainConfig(self.steps, self.batch_size, self.lr, self.ema_decay,
                                                     seed=self.seed), cond=self.cond(hist))
        self.trace = res.loss_trace
        return self

    def reset(self, env, rng):
        super().reset(env, rng)
        self._hist.clear()

    def _push(self, obs):
        if not self._hist:
            self._hist.extend([np.asarray(obs, dtype=float)] * self.T_s)
        else:
            self._hist.append(np.asarray(obs, dtype=float))
        return np.concatenate(list(self._hist))

    def state(self):
        return {"model": self.model.params, "model_ema": self.model.eval_params()}

    def meta(self):
        return {"obs_norm": self.obs_norm.to_dict()}

    def load(self, groups, meta):
        self.model.params = groups["model"]
        self.model.ema = nn.EmaState(self.ema_decay, groups["model_ema"])
        self.obs_norm = Normalizer.from_dict(meta["obs_norm"])


class DiffusionBCAgent(_HistoryAgent):
    """Actions conditioned on the last ``T_s`` observations, refined by Diffusion-X."""

    name = "diffbc"

    def __init__(self, obs_dim, act_dim, M: int = 8, **kw):
        super().__init__(obs_dim, act_dim, **kw)
        self.M = M

    def fit(self, data, env=None):
        return self._fit(data, data.actions.astype(float))

    def sample_actions(self, history, n: int, seed: int) -> np.ndarray:
        c = np.repeat(self.cond(history), n, axis=0)
        cfg = SampleConfig(self.solver, self.sample_steps, n_samples=n, seed=seed, diffusion_x=self.M,
                           temperature=self.temperature)
        return np.clip(sample(self.model, cfg, cond=c), -1.0, 1.0)

    def act(self, obs, rng):
        hist = self._push(obs)
        return self.sample_actions(hist, 1, int(rng.integers(2**31)))[0]


class DiffusionPolicyAgent(_HistoryAgent):
    """Predicts ``H`` future actions, executes the first ``T_a`` and then replans.

    Chunks are drawn at temperature 0.5 by default: open-loop execution
    amplifies the behaviour noise that full-temperature samples reproduce.
    """

    name = "diffpolicy"

    def __init__(self, obs_dim, act_dim, T_s: int = 2, H: int = 16, T_a: int = 8, solver: str = "sde_dpmpp_1",
                 hidden=(256, 256, 256), steps: int = 8000, temperature: float = 0.5, **kw):
        if T_a > H:
            raise ConfigurationError(f"cannot execute {T_a} actions from a {H}-step chunk")
        if min(T_s, H, T_a) < 1:
            raise ConfigurationError("T_s, H and T_a must be positive")
        super().__init__(obs_dim, act_dim, T_s=T_s, solver=solver, out_dim=H * act_dim, hidden=hidden, steps=steps,
                         temperature=temperature, **kw)
        self.H, self.T_a = H, T_a
        self.queue: deque = deque()
        self.replans = 0

    def chunks(self, data) -> np.ndarray:
        out = np.zeros((len(data), self.H * self.act_dim))
        for s0, L in zip(data.episode_starts, data.episode_lengths):
            ep = data.actions[s0:s0 + L].astype(float)
            for k in range(L):
                c = np.zeros((self.H, self.act_dim))
                m = min(self.H, L - k)
                c[:m] = ep[k:k + m]
                out[s0 + k] = c.reshape(-1)
        return out

    def fit(self, data, env=None):
        return self._fit(data, self.chunks(data))

    def reset(self, env, rng):
        super().reset(env, rng)
        self.queue.clear()
        self.replans = 0

    def act(self, obs, rng):
        hist = self._push(obs)
        if not self.queue:
            cfg = SampleConfig(self.solver, self.sample_steps, n_samples=1, seed=int(rng.integers(2**31)),
                               clip=(-1.0, 1.0), temperature=self.temperature)
            chunk = sample(self.model, cfg, cond=self.cond(hist)).reshape(self.H, self.act_dim)
            self.queue.extend(np.clip(chunk[: self.T_a], -1.0, 1.0))
            self.replans += 1
        return self.queue.popleft()
