"""A one-step continuous bandit with a bimodal behaviour dataset.

Reward is ``-|a - a_star|``.  The behaviour policy picks one of two arms
at ``(+-0.5, 0)`` with Gaussian jitter, so its mean action sits near the
origin, away from ``a_star``.  Used to check that policy-improvement terms
move an agent off the behaviour distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datasets import TrajectoryDataset, normalized_score
from ..envs import EnvState

A_STAR = np.array([0.5, 0.1])
ARMS = np.array([[0.5, 0.0], [-0.5, 0.0]])


@dataclass(frozen=True)
class BanditSpec:
    name: str = "bandit"
    obs_dim: int = 1
    act_dim: int = 2
    action_bound: float = 1.0
    max_steps: int = 1
    arm_std: float = 0.15


class BanditEnv:
    def __init__(self, spec: BanditSpec = BanditSpec()):
        self.spec = spec

    def reset(self, rng) -> EnvState:
        return EnvState(np.zeros(1))

    def clip_action(self, a):
        return np.clip(np.asarray(a, dtype=float).reshape(2), -1.0, 1.0)

    def reward(self, a) -> np.ndarray:
        return -np.linalg.norm(np.atleast_2d(a) - A_STAR, axis=1)

    def step(self, state, action) -> EnvState:
        a = self.clip_action(action)
        r = float(self.reward(a)[0])
        return EnvState(np.zeros(1), r, True, False, 1)


def behaviour_actions(n: int, rng, std: float = 0.15) -> np.ndarray:
    arm = ARMS[rng.integers(0, 2, size=n)]
    return np.clip(arm + std * rng.standard_normal((n, 2)), -1.0, 1.0)


def bandit_dataset(n: int = 4000, seed: int = 0) -> TrajectoryDataset:
    rng = np.random.default_rng(seed)
    a = behaviour_actions(n, rng)
    r = BanditEnv().reward(a)
    z = np.zeros((n, 1))
    return TrajectoryDataset(z, a, r, z, np.ones(n, dtype=bool), np.ones(n, dtype=np.int64),
                             meta={"env": "bandit", "policy": "behaviour"})


def random_policy_reward(n: int = 100_000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    return float(BanditEnv().reward(rng.uniform(-1, 1, size=(n, 2))).mean())


def bandit_score(mean_reward: float) -> float:
    """Normalised so a uniform-random policy scores 0 and a_star scores 100."""
    return float(normalized_score(mean_reward, random_policy_reward(), 0.0))


def action_stats(agent, n: int = 256, seed: int = 0) -> tuple[np.ndarray, float]:
    """Mean action and mean reward of ``agent`` over ``n`` independent decisions."""
    env = BanditEnv()
    rng = np.random.default_rng(seed)
    acts = []
    for _ in range(n):
        agent.reset(env, rng)
        acts.append(env.clip_action(agent.act(np.zeros(1), rng)))
    acts = np.array(acts)
    return acts.mean(axis=0), float(env.reward(acts).mean())
