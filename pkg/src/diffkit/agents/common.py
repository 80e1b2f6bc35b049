"""Networks and helpers shared by the agents: critics, value nets, BC, evaluation."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import nn
from ..datasets import Normalizer, TrajectoryDataset
from ..envs import run_episode
from ..schedules import NoiseSchedule, make_schedule


def resolve_schedule(schedule) -> NoiseSchedule:
    """A schedule object, or a builder name such as ``"linear"``."""
    return schedule if isinstance(schedule, NoiseSchedule) else make_schedule(schedule)


def mse_step(mlp: nn.Mlp, adam: nn.AdamState, x, y, weights=None):
    """One Adam step on mean squared error; returns (loss, new adam state)."""
    out, cache = mlp.forward(x)
    diff = out - y
    w = np.ones(len(x)) if weights is None else weights
    loss = float(np.mean(w[:, None] * diff**2))
    g = 2.0 * w[:, None] * diff / diff.size
    grads, _ = mlp.vjp(cache, g)
    mlp.params, adam = nn.adam_step(adam, mlp.params, grads)
    return loss, adam


def fit_regressor(mlp: nn.Mlp, x, y, steps: int, batch_size: int = 256, lr: float = 1e-3,
                  seed: int = 0) -> np.ndarray:
    """Plain minibatch regression; returns the loss trace."""
    rng = np.random.default_rng(seed)
    adam = nn.AdamState.init(mlp.params, lr=lr)
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float).reshape(len(x), -1)
    trace = np.empty(steps)
    for i in range(steps):
        idx = rng.integers(0, len(x), size=batch_size)
        trace[i], adam = mse_step(mlp, adam, x[idx], y[idx])
    return trace


# ---------------------------------------------------------------------------
# Critics


def critic_loss(spec: nn.MlpSpec, params: nn.ParamSet, s, a, target):
    """Squared Bellman residual of one Q network and its parameter gradients."""
    inp = np.concatenate([s, a], axis=1)
    out, cache = nn.mlp_forward(spec, params, inp, return_cache=True)
    diff = out[:, 0] - target
    loss = float(np.mean(diff**2))
    grads, _ = nn.backprop(spec, params, inp, (2.0 * diff / len(diff))[:, None], cache=cache)
    return loss, grads


def expectile_loss(spec: nn.MlpSpec, params: nn.ParamSet, s, q, tau: float):
    """mean |tau - 1(u < 0)| u^2 with u = q - V(s)."""
    out, cache = nn.mlp_forward(spec, params, s, return_cache=True)
    u = q - out[:, 0]
    w = np.where(u < 0, 1.0 - tau, tau)
    loss = float(np.mean(w * u**2))
    grads, _ = nn.backprop(spec, params, s, (-2.0 * w * u / len(u))[:, None], cache=cache)
    return loss, grads


class QCritic:
    """Twin Q networks with slowly tracking target copies."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(128, 128), gamma: float = 0.99,
                 target_rate: float = 0.005, lr: float = 3e-4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.nets = [nn.Mlp.create(obs_dim + act_dim, hidden, 1, rng) for _ in range(2)]
        self.targets = [nn.copy_params(m.params) for m in self.nets]
        self.adams = [nn.AdamState.init(m.params, lr=lr) for m in self.nets]
        self.gamma, self.rate = gamma, target_rate
        self.act_dim = act_dim

    def q(self, s, a, target: bool = False) -> tuple[np.ndarray, np.ndarray]:
        inp = np.concatenate([s, a], axis=1)
        ps = self.targets if target else [m.params for m in self.nets]
        return tuple(nn.mlp_forward(m.spec, p, inp)[:, 0] for m, p in zip(self.nets, ps))

    def q_min(self, s, a, target: bool = False) -> np.ndarray:
        q1, q2 = self.q(s, a, target)
        return np.minimum(q1, q2)

    def bellman_target(self, r, done, next_value) -> np.ndarray:
        return r + self.gamma * (1.0 - done) * next_value

    def update(self, s, a, target) -> float:
        total = 0.0
        for i, m in enumerate(self.nets):
            loss, grads = critic_loss(m.spec, m.params, s, a, target)
            m.params, self.adams[i] = nn.adam_step(self.adams[i], m.params, grads)
            total += loss
        self.soft_update()
        return total / 2

    def soft_update(self) -> None:
        r = self.rate
        self.targets = [{k: (1 - r) * t[k] + r * m.params[k] for k in t} for t, m in zip(self.targets, self.nets)]

    def action_grad(self, s, a, which: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Q values and dQ/da for one of the two networks."""
        m = self.nets[which]
        inp = np.concatenate([s, a], axis=1)
        out, cache = m.forward(inp)
        _, g = m.vjp(cache, np.ones_like(out))
        return out[:, 0], g[:, -self.act_dim:]

    def state(self) -> dict:
        return {"q1": self.nets[0].params, "q2": self.nets[1].params, "q1t": self.targets[0],
                "q2t": self.targets[1]}

    def load(self, groups: dict) -> None:
        self.nets[0].params, self.nets[1].params = groups["q1"], groups["q2"]
        self.targets = [groups["q1t"], groups["q2t"]]


class ValueNet:
    """State value fitted by expectile regression onto Q."""

    def __init__(self, obs_dim: int, tau: float = 0.7, hidden=(128, 128), lr: float = 3e-4, seed: int = 0):
        if not 0.0 < tau < 1.0:
            raise ValueError("expectile must lie in (0, 1)")
        self.net = nn.Mlp.create(obs_dim, hidden, 1, np.random.default_rng(seed))
        self.adam = nn.AdamState.init(self.net.params, lr=lr)
        self.tau = tau

    def __call__(self, s) -> np.ndarray:
        return self.net(s)[:, 0]

    def update(self, s, q) -> float:
        loss, grads = expectile_loss(self.net.spec, self.net.params, s, q, self.tau)
        self.net.params, self.adam = nn.adam_step(self.adam, self.net.params, grads)
        return loss


def expectile_weights(q, v, tau: float) -> np.ndarray:
    """|f'(u)| / |u| for f(u) = |tau - 1(u<0)| u^2: 2 tau above V, 2 (1 - tau) below."""
    return np.where(np.asarray(q) > np.asarray(v), 2.0 * tau, 2.0 * (1.0 - tau))


class InverseDynamics:
    """a = I(s, s'), trained by least squares and clipped to the action box."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(128, 128), bound: float = 1.0, seed: int = 0):
        self.net = nn.Mlp.create(2 * obs_dim, hidden, act_dim, np.random.default_rng(seed))
        self.bound = bound
        self.in_norm: Normalizer | None = None

    def fit(self, s, s2, a, steps: int = 3000, lr: float = 1e-3, seed: int = 0) -> np.ndarray:
        x = np.concatenate([s, s2], axis=1)
        self.in_norm = Normalizer.fit(x, "gaussian")
        return fit_regressor(self.net, self.in_norm.forward(x), a, steps, lr=lr, seed=seed)

    def __call__(self, s, s2) -> np.ndarray:
        x = self.in_norm.forward(np.concatenate([np.atleast_2d(s), np.atleast_2d(s2)], axis=1))
        return np.clip(self.net(x), -self.bound, self.bound)


# ---------------------------------------------------------------------------
# Agents


class Agent:
    """Common surface: ``fit`` on a dataset, then ``reset`` / ``act`` per episode."""

    name = "agent"

    def fit(self, data: TrajectoryDataset, env=None):
        raise NotImplementedError

    def reset(self, env, rng) -> None:
        self.env = env

    def act(self, obs, rng) -> np.ndarray:
        raise NotImplementedError

    def state(self) -> dict:
        """Named parameter sets for checkpointing."""
        return {}

    def meta(self) -> dict:
        return {}

    def load(self, groups: dict, meta: dict) -> None:
        raise NotImplementedError


class BCAgent(Agent):
    """Deterministic MLP policy fitted by mean squared error."""

    name = "bc"

    def __init__(self, obs_dim: int, act_dim: int, hidden=(128, 128), steps: int = 3000, lr: float = 1e-3,
                 seed: int = 0):
        self.net = nn.Mlp.create(obs_dim, hidden, act_dim, np.random.default_rng(seed))
        self.steps, self.lr, self.seed = steps, lr, seed
        self.obs_norm = Normalizer.identity(obs_dim)
        self.trace = np.zeros(0)

    def fit(self, data, env=None):
        self.obs_norm = Normalizer.fit(data.obs, "gaussian")
        self.trace = fit_regressor(self.net, self.obs_norm.forward(data.obs), data.actions, self.steps,
                                   lr=self.lr, seed=self.seed)
        return self

    def act(self, obs, rng):
        return np.clip(self.net(self.obs_norm.forward(np.atleast_2d(obs)))[0], -1.0, 1.0)

    def state(self):
        return {"pi": self.net.params}

    def meta(self):
        return {"obs_norm": self.obs_norm.to_dict()}

    def load(self, groups, meta):
        self.net.params = groups["pi"]
        self.obs_norm = Normalizer.from_dict(meta["obs_norm"])


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EpisodeResult:
    index: int
    seed: int
    ret: float
    success: bool
    length: int


def _run_one(args):
    agent, env, seed, index = args
    ep = run_episode(env, agent, np.random.default_rng(seed))
    return EpisodeResult(index, seed, ep.ret, bool(ep.success), len(ep))


def evaluate(agent, env, episodes: int, seed: int = 0, workers: int = 1) -> list[EpisodeResult]:
    """Episode ``i`` uses seed ``seed + i`` so serial and parallel runs agree."""
    jobs = [(agent, env, seed + i, i) for i in range(episodes)]
    if workers <= 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    return sorted(results, key=lambda r: r.index)


def success_rate(results: list[EpisodeResult]) -> float:
    return float(np.mean([r.success for r in results])) if results else 0.0
