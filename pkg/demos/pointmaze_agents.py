"""Offline RL on the open point maze: collect noisy data, train, evaluate.

Trains plain behaviour cloning and two diffusion agents (IDQL and
DiffusionBC) on 300 episodes of the medium scripted policy and reports
success over 30 evaluation episodes.  Takes a few minutes on one core.

    python demos/pointmaze_agents.py
"""

import numpy as np

from diffkit import datasets, envs
from diffkit.agents import evaluate, make_agent, success_rate


def main():
    env = envs.PointMazeEnv.make("pointmaze-open")
    data = datasets.collect(env, envs.make_policy("medium"), 300, np.random.default_rng(0))
    print(f"dataset: {len(data)} transitions, behaviour success {data.success_rate():.2f}")
    for algo, kw in [("bc", {}), ("idql", {"steps": 2000}), ("diffbc", {"steps": 2000})]:
        agent = make_agent(algo, env.spec.obs_dim, env.spec.act_dim, seed=1, **kw).fit(data, env)
        rate = success_rate(evaluate(agent, env, 30, seed=1000))
        print(f"{algo:<8} success {rate:.2f}")


if __name__ == "__main__":
    main()
