"""Point-mass navigation tasks with axis-aligned walls.

The agent is a point in a bounded 2D arena.  Actions are velocities in
``[-1, 1]^2`` and one step moves the point by ``dt * action``.  Motion that
would enter a wall stops on the wall face.  Three presets ship:

``pointmaze-open``    empty arena, one goal in the far corner
``pointmaze-uwall``   start inside a U-shaped wall that opens downward
``multigoal-k8``      eight goals on a circle around the start
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, ConfigurationError

_GRID_RES = 0.025


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, p, strict: bool = True) -> bool:
        x, y = p
        if strict:
            return self.xmin < x < self.xmax and self.ymin < y < self.ymax
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax

    def inflate(self, m: float) -> "Rect":
        return Rect(self.xmin - m, self.ymin - m, self.xmax + m, self.ymax + m)

    def entry(self, p, d) -> tuple[float, int] | None:
        """First time in [0, 1] at which ``p + s d`` enters the open rectangle.

        Returns ``(s, axis)`` where ``axis`` is the coordinate whose face is
        crossed, or None when the segment misses the interior.
        """
        lo, hi = np.array([self.xmin, self.ymin]), np.array([self.xmax, self.ymax])
        t_in, t_out, axis = -np.inf, np.inf, -1
        for k in range(2):
            if abs(d[k]) < 1e-12:
                if not lo[k] < p[k] < hi[k]:
                    return None
                continue
            a, b = (lo[k] - p[k]) / d[k], (hi[k] - p[k]) / d[k]
            if a > b:
                a, b = b, a
            if a > t_in:
                t_in, axis = a, k
            t_out = min(t_out, b)
        if axis < 0 or t_in >= t_out or t_out <= 0.0 or t_in > 1.0:
            return None
        return max(t_in, 0.0), axis


@dataclass(frozen=True)
class PointMazeSpec:
    name: str
    goals: np.ndarray
    start_center: tuple[float, float] = (0.0, 0.0)
    start_radius: float = 0.1
    goal_radius: float = 0.15
    walls: tuple[Rect, ...] = ()
    bounds: tuple[float, float] = (-1.0, 1.0)
    dense: bool = False
    max_steps: int = 50
    dt: float = 0.1
    action_bound: float = 1.0

    @property
    def obs_dim(self) -> int:
        return 2

    @property
    def act_dim(self) -> int:
        return 2

    @property
    def diameter(self) -> float:
        lo, hi = self.bounds
        return float(np.sqrt(2.0) * (hi - lo))


@dataclass(frozen=True)
class EnvState:
    obs: np.ndarray
    reward: float = 0.0
    terminal: bool = False
    success: bool = False
    steps: int = 0
    goal_index: int = -1


PRESETS = {
    "pointmaze-open": dict(goals=[(0.7, 0.7)], start_center=(-0.7, -0.7), start_radius=0.1,
                           goal_radius=0.15, max_steps=30),
    "pointmaze-uwall": dict(
        goals=[(0.0, 0.7)], start_center=(0.0, -0.15), start_radius=0.08, goal_radius=0.15, max_steps=32,
        walls=(Rect(-0.5, 0.1, 0.5, 0.2), Rect(-0.5, -0.5, -0.4, 0.2), Rect(0.4, -0.5, 0.5, 0.2)),
    ),
    "multigoal-k8": dict(
        goals=[(0.8 * np.cos(a), 0.8 * np.sin(a)) for a in np.arange(8) * 2 * np.pi / 8],
        start_center=(0.0, 0.0), start_radius=0.05, goal_radius=0.15, max_steps=20,
    ),
}


def make_spec(name: str, **overrides) -> PointMazeSpec:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown environment {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    kw["goals"] = np.asarray(kw["goals"], dtype=float).reshape(-1, 2)
    return PointMazeSpec(name=name, **kw)


class PointMazeEnv:
    """Gym-like interface over explicit immutable states."""

    def __init__(self, spec: PointMazeSpec):
        if len(spec.goals) < 1:
            raise ConfigurationError("at least one goal is required")
        if spec.name.startswith("multigoal") and len(spec.goals) < 2:
            raise ConfigurationError("multi-goal tasks need K >= 2 goals")
        self.spec = spec
        self.grid = OccupancyGrid(spec)
        if not self.grid.reachable():
            raise ConfigurationError(f"{spec.name}: no goal is reachable from the start region")

    @classmethod
    def make(cls, name: str, **overrides) -> "PointMazeEnv":
        return cls(make_spec(name, **overrides))

    # -- geometry ----------------------------------------------------------
    def in_wall(self, p) -> bool:
        return any(w.contains(p) for w in self.spec.walls)

    def goal_hit(self, p) -> int:
        d = np.linalg.norm(self.spec.goals - np.asarray(p), axis=1)
        i = int(np.argmin(d))
        return i if d[i] <= self.spec.goal_radius else -1

    def goal_distance(self, p) -> float:
        return float(np.min(np.linalg.norm(self.spec.goals - np.asarray(p), axis=1)))

    def move(self, p, a) -> np.ndarray:
        """Integrate one step.  Motion into a wall stops on its face and the
        remaining displacement slides along that face."""
        p = np.asarray(p, dtype=float).copy()
        d = self.spec.dt * np.asarray(a, dtype=float)
        for _ in range(3):
            best = None
            for w in self.spec.walls:
                hit = w.entry(p, d)
                if hit is not None and (best is None or hit[0] < best[0][0]):
                    best = (hit, w)
            if best is None:
                p = p + d
                break
            (s, axis), w = best
            q = p + s * d
            q[axis] = (w.xmin, w.ymin)[axis] if d[axis] > 0 else (w.xmax, w.ymax)[axis]
            d = (1.0 - s) * d
            d[axis] = 0.0
            p = q
        lo, hi = self.spec.bounds
        return np.clip(p, lo, hi)

    # -- interface ---------------------------------------------------------
    def reset(self, rng: np.random.Generator) -> EnvState:
        c, r = np.asarray(self.spec.start_center), self.spec.start_radius
        while True:
            ang = rng.uniform(0, 2 * np.pi)
            rad = r * np.sqrt(rng.uniform())
            p = c + rad * np.array([np.cos(ang), np.sin(ang)])
            if not self.in_wall(p):
                return EnvState(p)

    def clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.shape != (2,):
            raise ArgumentError(f"actions are 2D, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ArgumentError("action must be finite")
        b = self.spec.action_bound
        return np.clip(a, -b, b)

    def reward_at(self, p, hit: int) -> float:
        if self.spec.dense:
            return -self.goal_distance(p)
        return 1.0 if hit >= 0 else 0.0

    def step(self, state: EnvState, action) -> EnvState:
        if state.terminal:
            raise ArgumentError("episode already finished; call reset")
        a = self.clip_action(action)
        p = self.move(state.obs, a)
        hit = self.goal_hit(p)
        steps = state.steps + 1
        return EnvState(
            obs=p,
            reward=self.reward_at(p, hit),
            terminal=hit >= 0 or steps >= self.spec.max_steps,
            success=hit >= 0,
            steps=steps,
            goal_index=hit,
        )


class OccupancyGrid:
    """Discretised free space used for reachability and expert path planning."""

    def __init__(self, spec: PointMazeSpec, res: float = _GRID_RES, margin: float = 0.08):
        self.spec, self.res = spec, res
        lo, hi = spec.bounds
        self.lo = lo
        self.n = int(round((hi - lo) / res)) + 1
        coords = lo + res * np.arange(self.n)
        X, Y = np.meshgrid(coords, coords, indexing="ij")
        self.centers = np.stack([X, Y], axis=-1)
        free = np.ones((self.n, self.n), dtype=bool)
        for w in spec.walls:
            r = w.inflate(margin)
            free &= ~((X > r.xmin) & (X < r.xmax) & (Y > r.ymin) & (Y < r.ymax))
        self.free = free
        self._dist = None

    def cell(self, p) -> tuple[int, int]:
        ij = np.clip(np.round((np.asarray(p) - self.lo) / self.res).astype(int), 0, self.n - 1)
        return int(ij[0]), int(ij[1])

    def _goal_cells(self):
        d = np.linalg.norm(self.centers[..., None, :] - self.spec.goals, axis=-1).min(-1)
        return (d <= self.spec.goal_radius) & self.free

    def reachable(self) -> bool:
        start = self.nearest_free(self.cell(self.spec.start_center))
        goal = self._goal_cells()
        seen = np.zeros_like(self.free)
        seen[start] = True
        q = deque([start])
        while q:
            i, j = q.popleft()
            if goal[i, j]:
                return True
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if 0 <= a < self.n and 0 <= b < self.n and self.free[a, b] and not seen[a, b]:
                    seen[a, b] = True
                    q.append((a, b))
        return False

    def nearest_free(self, ij):
        if self.free[ij]:
            return ij
        idx = np.argwhere(self.free)
        k = np.argmin(np.sum((idx - np.array(ij)) ** 2, axis=1))
        return tuple(int(v) for v in idx[k])

    def distance_to(self, goal_cells: np.ndarray) -> np.ndarray:
        """Dijkstra distance (8-connected) from every free cell to ``goal_cells``."""
        dist = np.full((self.n, self.n), np.inf)
        heap = []
        for i, j in np.argwhere(goal_cells):
            dist[i, j] = 0.0
            heap.append((0.0, int(i), int(j)))
        heapq.heapify(heap)
        steps = [(a, b, self.res * np.hypot(a, b)) for a in (-1, 0, 1) for b in (-1, 0, 1) if a or b]
        while heap:
            d, i, j = heapq.heappop(heap)
            if d > dist[i, j]:
                continue
            for a, b, c in steps:
                u, v = i + a, j + b
                if 0 <= u < self.n and 0 <= v < self.n and self.free[u, v] and d + c < dist[u, v]:
                    dist[u, v] = d + c
                    heapq.heappush(heap, (d + c, u, v))
        return dist


# ---------------------------------------------------------------------------
# Scripted behaviour policies


class ScriptedPolicy:
    """Base class: ``reset(env, rng)`` at episode start then ``act(obs, rng)``."""

    name = "base"

    def reset(self, env: PointMazeEnv, rng: np.random.Generator) -> None:
        self.env = env

    def act(self, obs, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class RandomPolicy(ScriptedPolicy):
    name = "random"

    def act(self, obs, rng):
        b = self.env.spec.action_bound
        return rng.uniform(-b, b, size=2)


class ExpertPolicy(ScriptedPolicy):
    """Follows the shortest grid path toward one goal at full speed.

    In multi-goal tasks the target goal is drawn uniformly at each reset,
    which makes the behaviour data multimodal.
    """

    name = "expert"
    _fields: dict = {}

    def __init__(self, noise: float = 0.1, lookahead: float = 0.15):
        self.noise, self.lookahead = noise, lookahead
        self.goal = 0

    def _field(self, env: PointMazeEnv, goal: int) -> np.ndarray:
        key = (id(env), goal)
        if key not in self._fields:
            grid = env.grid
            d = np.linalg.norm(grid.centers - env.spec.goals[goal], axis=-1)
            self._fields[key] = grid.distance_to((d <= env.spec.goal_radius * 0.5) & grid.free)
        return self._fields[key]

    def reset(self, env, rng):
        super().reset(env, rng)
        k = len(env.spec.goals)
        self.goal = int(rng.integers(k)) if k > 1 else 0

    def direction(self, obs) -> np.ndarray:
        env = self.env
        grid = env.grid
        goal = env.spec.goals[self.goal]
        p = np.asarray(obs, dtype=float)
        if not env.spec.walls:
            target = goal
        else:
            dist = self._field(env, self.goal)
            # waypoint: the lowest-distance free cell within the lookahead disc
            i, j = grid.cell(p)
            r = int(np.ceil(self.lookahead / grid.res))
            sl = (slice(max(i - r, 0), i + r + 1), slice(max(j - r, 0), j + r + 1))
            local = dist[sl]
            cen = grid.centers[sl]
            within = np.linalg.norm(cen - p, axis=-1) <= self.lookahead
            cand = np.where(within & np.isfinite(local), local, np.inf)
            if not np.isfinite(cand).any():
                target = goal
            else:
                a, b = np.unravel_index(np.argmin(cand), cand.shape)
                target = cen[a, b]
        v = target - p
        n = np.linalg.norm(v)
        if n < 1e-12:
            return np.zeros(2)
        return v / n * min(1.0, n / env.spec.dt)

    def act(self, obs, rng):
        a = self.direction(obs) + self.noise * rng.standard_normal(2)
        return np.clip(a, -1.0, 1.0)


class MediumPolicy(ExpertPolicy):
    name = "medium"

    def __init__(self, noise: float = 0.3, random_frac: float = 0.2):
        super().__init__(noise)
        self.random_frac = random_frac

    def act(self, obs, rng):
        if rng.uniform() < self.random_frac:
            return rng.uniform(-1.0, 1.0, size=2)
        return super().act(obs, rng)


def scripted_policies() -> dict[str, ScriptedPolicy]:
    return {"expert": ExpertPolicy(), "medium": MediumPolicy(), "random": RandomPolicy()}


def make_policy(name: str) -> ScriptedPolicy:
    pols = scripted_policies()
    if name not in pols:
        raise ConfigurationError(f"unknown scripted policy {name!r}")
    return pols[name]


# ---------------------------------------------------------------------------
# Episodes and wrappers


@dataclass
class Episode:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    success: bool
    goal_index: int

    @property
    def ret(self) -> float:
        return float(self.rewards.sum())

    def __len__(self):
        return len(self.actions)


def run_episode(env, policy, rng: np.random.Generator) -> Episode:
    """Roll out ``policy`` (scripted or agent) for one episode."""
    state = env.reset(rng)
    if hasattr(policy, "reset"):
        policy.reset(env, rng)
    obs, acts, rews, nxt, terms = [], [], [], [], []
    while not state.terminal:
        a = policy.act(state.obs, rng)
        new = env.step(state, a)
        obs.append(state.obs)
        acts.append(env.clip_action(a))
        rews.append(new.reward)
        nxt.append(new.obs)
        terms.append(new.success)
        state = new
    return Episode(np.array(obs), np.array(acts), np.array(rews), np.array(nxt), np.array(terms, dtype=bool),
                   state.success, state.goal_index)


class MultiStepWrapper:
    """Applies each action for ``repeat`` inner steps and sums the rewards."""

    def __init__(self, env: PointMazeEnv, repeat: int):
        if repeat < 1:
            raise ArgumentError("repeat must be at least 1")
        self.env, self.repeat = env, int(repeat)
        self.spec = env.spec

    def reset(self, rng):
        return self.env.reset(rng)

    def clip_action(self, a):
        return self.env.clip_action(a)

    def step(self, state: EnvState, action) -> EnvState:
        total = 0.0
        for _ in range(self.repeat):
            state = self.env.step(state, action)
            total += state.reward
            if state.terminal:
                break
        return replace(state, reward=total)


class VectorEnv:
    """A batch of independent copies stepped together."""

    def __init__(self, env: PointMazeEnv, n: int):
        self.env, self.n = env, int(n)

    def reset(self, seeds) -> list[EnvState]:
        return [self.env.reset(np.random.default_rng(s)) for s in seeds]

    def step(self, states: list[EnvState], actions) -> list[EnvState]:
        actions = np.asarray(actions, dtype=float).reshape(len(states), -1)
        return [s if s.terminal else self.env.step(s, a) for s, a in zip(states, actions)]


def parallel_batch(env: PointMazeEnv, seeds) -> tuple[VectorEnv, list[EnvState]]:
    venv = VectorEnv(env, len(seeds))
    return venv, venv.reset(seeds)
