import numpy as np
import pytest

from diffkit import datasets, envs


def fd_grad(f, params, h=1e-5):
    """Central finite differences of scalar ``f(params)`` for every entry of every array."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][i] += h
            minus[name][i] -= h
            g[i] = (f(plus) - f(minus)) / (2 * h)
        out[name] = g
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def max_rel_err(grads, fd) -> float:
    return max(rel_err(grads[k], fd[k]) for k in fd)


@pytest.fixture(scope="session")
def open_env():
    return envs.PointMazeEnv.make("pointmaze-open")


@pytest.fixture(scope="session")
def small_medium_data(open_env):
    """60 medium-policy episodes; enough for smoke-level agent tests."""
    return datasets.collect(open_env, envs.make_policy("medium"), 60, np.random.default_rng(0))


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
