import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffkit import envs
from diffkit.envs import EnvState, PointMazeEnv
from diffkit.errors import ArgumentError, ConfigurationError

PRESETS = ["pointmaze-open", "pointmaze-uwall", "multigoal-k8"]


@pytest.fixture(scope="module")
def uwall():
    return PointMazeEnv.make("pointmaze-uwall")


@pytest.mark.parametrize("name", PRESETS)
def test_reset_contained_and_fresh(name):
    env = PointMazeEnv.make(name)
    rng = np.random.default_rng(0)
    c, r = np.asarray(env.spec.start_center), env.spec.start_radius
    for _ in range(1000):
        s = env.reset(rng)
        assert np.linalg.norm(s.obs - c) <= r + 1e-12
        assert s.steps == 0 and s.reward == 0.0 and not s.terminal
        assert not env.in_wall(s.obs)


def test_reset_deterministic_per_seed(open_env):
    a = open_env.reset(np.random.default_rng(42))
    b = open_env.reset(np.random.default_rng(42))
    np.testing.assert_array_equal(a.obs, b.obs)


def test_zero_action_dense_reward():
    env = PointMazeEnv.make("pointmaze-open", dense=True)
    s = env.reset(np.random.default_rng(0))
    n = env.step(s, [0.0, 0.0])
    np.testing.assert_array_equal(n.obs, s.obs)
    assert n.reward == pytest.approx(-np.linalg.norm(s.obs - env.spec.goals[0]))


def test_motion_stops_at_wall_face(uwall):
    # the wall's lower face is at y = 0.1; moving up 0.1 from y = 0.05 would end at 0.15
    p = np.array([0.0, 0.05])
    out = uwall.move(p, [0.0, 1.0])
    assert out[1] == pytest.approx(0.1, abs=1e-12) and out[0] == pytest.approx(0.0, abs=1e-12)
    # diagonal motion slides along the face by the unobstructed x displacement
    out = uwall.move(p, [0.5, 1.0])
    assert out[1] == pytest.approx(0.1, abs=1e-12) and out[0] == pytest.approx(0.05, abs=1e-12)


def test_motion_blocked_from_side(uwall):
    # left post spans x in [-0.5, -0.4]; approaching from the right stops at x = -0.4
    out = uwall.move([-0.35, -0.2], [-1.0, 0.0])
    assert out[0] == pytest.approx(-0.4, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_never_inside_wall(uwall, x, y, ax, ay):
    p = np.array([x, y])
    if uwall.in_wall(p):
        return
    q = uwall.move(p, [ax, ay])
    assert not uwall.in_wall(q)
    lo, hi = uwall.spec.bounds
    assert np.all(q >= lo) and np.all(q <= hi)


def test_goal_is_terminal_with_sparse_reward(open_env):
    g = open_env.spec.goals[0]
    s = EnvState(g - np.array([0.05, 0.0]))
    n = open_env.step(s, [1.0, 0.0])
    assert n.terminal and n.success and n.reward == 1.0 and n.goal_index == 0
    with pytest.raises(ArgumentError):
        open_env.step(n, [0.0, 0.0])


def test_time_limit(open_env):
    s = open_env.reset(np.random.default_rng(0))
    for _ in range(open_env.spec.max_steps):
        s = open_env.step(s, [0.0, 0.0])
    assert s.terminal and not s.success and s.steps == open_env.spec.max_steps


def test_actions_clipped_and_validated(open_env):
    np.testing.assert_array_equal(open_env.clip_action([5.0, -3.0]), [1.0, -1.0])
    with pytest.raises(ArgumentError):
        open_env.clip_action([np.nan, 0.0])
    with pytest.raises(ArgumentError):
        open_env.clip_action([1.0, 0.0, 0.0])


def test_dynamics_deterministic(uwall):
    p, a = np.array([0.3, -0.3]), np.array([0.2, 0.9])
    assert uwall.move(p, a).tobytes() == uwall.move(p, a).tobytes()


def test_unknown_and_unreachable_envs():
    with pytest.raises(ConfigurationError):
        PointMazeEnv.make("antmaze")
    boxed = envs.Rect(-1.5, -0.3, 1.5, -0.2)
    with pytest.raises(ConfigurationError):
        PointMazeEnv.make("pointmaze-open", walls=(boxed,))


def test_multigoal_hits_any_goal():
    env = PointMazeEnv.make("multigoal-k8")
    assert len(env.spec.goals) == 8
    for i, g in enumerate(env.spec.goals):
        assert env.goal_hit(g) == i


# -- wrappers ----------------------------------------------------------------

def test_repeat_one_matches_base(open_env):
    w = envs.MultiStepWrapper(open_env, 1)
    s = open_env.reset(np.random.default_rng(0))
    a, b = open_env.step(s, [0.3, 0.1]), w.step(s, [0.3, 0.1])
    np.testing.assert_array_equal(a.obs, b.obs)
    assert a.reward == b.reward


def test_repeat_four_sums_rewards():
    env = PointMazeEnv.make("pointmaze-open", dense=True)
    s = env.reset(np.random.default_rng(0))
    single = env.step(s, [0.0, 0.0]).reward
    assert envs.MultiStepWrapper(env, 4).step(s, [0.0, 0.0]).reward == pytest.approx(4 * single)
    with pytest.raises(ArgumentError):
        envs.MultiStepWrapper(env, 0)


def test_parallel_batch_matches_serial(open_env):
    seeds = list(range(1, 9))
    venv, states = envs.parallel_batch(open_env, seeds)
    rngs = [np.random.default_rng(100 + s) for s in seeds]
    serial = []
    for s in seeds:
        state = open_env.reset(np.random.default_rng(s))
        traj = [state.obs]
        r = np.random.default_rng(100 + s)
        while not state.terminal:
            state = open_env.step(state, r.uniform(-1, 1, 2))
            traj.append(state.obs)
        serial.append(np.array(traj))
    batch = [[s.obs] for s in states]
    while not all(s.terminal for s in states):
        acts = [rng.uniform(-1, 1, 2) if not s.terminal else np.zeros(2) for s, rng in zip(states, rngs)]
        new = venv.step(states, acts)
        for i, (old, n) in enumerate(zip(states, new)):
            if not old.terminal:
                batch[i].append(n.obs)
        states = new
    for a, b in zip(serial, batch):
        np.testing.assert_array_equal(a, np.array(b))


# -- scripted policies -------------------------------------------------------

def _success(env, name, n=100, seed=0):
    pol = envs.make_policy(name)
    return np.mean([envs.run_episode(env, pol, np.random.default_rng(seed + i)).success for i in range(n)])


@pytest.mark.parametrize("name", ["pointmaze-open", "pointmaze-uwall"])
def test_policy_tiers(name):
    env = PointMazeEnv.make(name)
    expert, medium, rand = (_success(env, p) for p in ("expert", "medium", "random"))
    assert expert >= 0.95
    assert rand <= 0.2
    assert rand < medium < expert


def test_episode_returns_bounded():
    env = PointMazeEnv.make("pointmaze-uwall", dense=True)
    ep = envs.run_episode(env, envs.make_policy("random"), np.random.default_rng(0))
    assert -env.spec.max_steps * env.spec.diameter <= ep.ret <= 0
    sparse = envs.run_episode(PointMazeEnv.make("pointmaze-uwall"), envs.make_policy("expert"),
                              np.random.default_rng(0))
    assert sparse.ret in (0.0, 1.0)


def test_unknown_policy():
    with pytest.raises(ConfigurationError):
        envs.make_policy("oracle")
