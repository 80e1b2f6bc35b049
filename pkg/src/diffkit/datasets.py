"""Transition datasets: collection, normalisation, horizon windows, storage, metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import run_episode
from .errors import ArgumentError, DomainError, FormatError

_FORMAT = "diffkit.dataset"
METRIC_COLUMNS = ["run_id", "algo", "env", "solver", "steps", "seed", "score", "stderr"]


@dataclass
class TrajectoryDataset:
    """Flat transition arrays plus episode boundaries.

    Arrays are stored as float32 so a save/load round trip is bit exact.
    ``synthetic`` tags rows produced by a generative model.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    episode_lengths: np.ndarray
    synthetic: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rewards)
        def f32(a):
            a = np.asarray(a, dtype=np.float32)
            return np.ascontiguousarray(a.reshape(n, a.shape[-1] if a.ndim > 1 else -1))
        self.obs, self.next_obs, self.actions = f32(self.obs), f32(self.next_obs), f32(self.actions)
        self.rewards = np.asarray(self.rewards, dtype=np.float32).reshape(n)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(n)
        self.episode_lengths = np.asarray(self.episode_lengths, dtype=np.int64).reshape(-1)
        if self.synthetic is None:
            self.synthetic = np.zeros(n, dtype=bool)
        self.synthetic = np.asarray(self.synthetic, dtype=bool).reshape(n)
        if self.episode_lengths.sum() != n:
            raise ArgumentError("episode lengths do not add up to the number of transitions")
        for name in ("obs", "actions", "next_obs"):
            if len(getattr(self, name)) != n:
                raise ArgumentError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.obs.shape[1:] != self.next_obs.shape[1:]:
            raise ArgumentError("obs and next_obs dims disagree")

    @classmethod
    def empty(cls, obs_dim: int, act_dim: int) -> "TrajectoryDataset":
        return cls(np.zeros((0, obs_dim)), np.zeros((0, act_dim)), np.zeros(0), np.zeros((0, obs_dim)),
                   np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64))

    # -- views -------------------------------------------------------------
    def __len__(self):
        return len(self.rewards)

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def n_episodes(self) -> int:
        return len(self.episode_lengths)

    @property
    def episode_starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.episode_lengths)[:-1]]).astype(np.int64)

    @property
    def returns(self) -> np.ndarray:
        """Undiscounted return of each episode."""
        if not self.n_episodes:
            return np.zeros(0)
        return np.add.reduceat(self.rewards.astype(float), self.episode_starts) if len(self) else np.zeros(0)

    def episode_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_episodes), self.episode_lengths)

    def rows(self) -> np.ndarray:
        """(s, a, r, s', d) rows as float64, one per transition."""
        return np.concatenate(
            [self.obs, self.actions, self.rewards[:, None], self.next_obs, self.terminals[:, None]], axis=1
        ).astype(float)

    def success_rate(self) -> float:
        if not self.n_episodes:
            return 0.0
        ends = np.cumsum(self.episode_lengths) - 1
        return float(np.mean(self.terminals[ends]))

    @classmethod
    def from_rows(cls, rows, obs_dim: int, act_dim: int, synthetic: bool = True) -> "TrajectoryDataset":
        """Rows of (s, a, r, s', d), each treated as a length-one episode."""
        rows = np.asarray(rows, dtype=float).reshape(-1, 2 * obs_dim + act_dim + 2)
        o, a = obs_dim, act_dim
        n = len(rows)
        return cls(rows[:, :o], rows[:, o:o + a], rows[:, o + a], rows[:, o + a + 1:2 * o + a + 1],
                   rows[:, -1] > 0.5, np.ones(n, dtype=np.int64), np.full(n, synthetic))

    def concat(self, other: "TrajectoryDataset") -> "TrajectoryDataset":
        cat = lambda f: np.concatenate([getattr(self, f), getattr(other, f)])
        return TrajectoryDataset(cat("obs"), cat("actions"), cat("rewards"), cat("next_obs"), cat("terminals"),
                                 cat("episode_lengths"), cat("synthetic"), dict(self.meta))


def collect(env, policy, episodes: int, rng: np.random.Generator) -> TrajectoryDataset:
    """Roll out ``policy`` for exactly ``episodes`` episodes."""
    if episodes < 0:
        raise ArgumentError("episode count must be non-negative")
    spec = env.spec
    if episodes == 0:
        return TrajectoryDataset.empty(spec.obs_dim, spec.act_dim)
    eps = [run_episode(env, policy, rng) for _ in range(episodes)]
    cat = lambda f: np.concatenate([getattr(e, f) for e in eps])
    return TrajectoryDataset(cat("obs"), cat("actions"), cat("rewards"), cat("next_obs"), cat("terminals"),
                             [len(e) for e in eps], meta={"env": spec.name, "policy": getattr(policy, "name", "")})


# ---------------------------------------------------------------------------
# Normalisation


@dataclass
class Normalizer:
    """Per-dimension affine map ``(x - shift) / scale``.

    ``minmax`` sends the observed range to [-1, 1]; ``gaussian`` standardises.
    """

    shift: np.ndarray
    scale: np.ndarray
    kind: str = "minmax"

    @classmethod
    def fit(cls, data, kind: str = "minmax") -> "Normalizer":
        data = np.asarray(data, dtype=float)
        data = data.reshape(-1, data.shape[-1])
        if kind == "minmax":
            lo, hi = data.min(axis=0), data.max(axis=0)
            shift, scale = 0.5 * (lo + hi), 0.5 * (hi - lo)
        elif kind == "gaussian":
            shift, scale = data.mean(axis=0), data.std(axis=0)
        else:
            raise ArgumentError(f"unknown normalisation {kind!r}")
        scale = np.where(scale > 1e-8, scale, 1.0)
        return cls(shift, scale, kind)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim), "identity")

    def forward(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def inverse(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.scale + self.shift

    def to_dict(self) -> dict:
        return {"kind": self.kind, "shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["shift"], dtype=float), np.asarray(d["scale"], dtype=float), d["kind"])


# ---------------------------------------------------------------------------
# Horizon windows


@dataclass
class Windows:
    obs: np.ndarray          # (W, H, obs_dim)
    actions: np.ndarray      # (W, H, act_dim)
    valid: np.ndarray        # (W, H) bool, False on padded steps
    returns_to_go: np.ndarray  # (W,) return from the window start
    episode: np.ndarray      # (W,)
    start: np.ndarray        # (W,)

    def __len__(self):
        return len(self.valid)

    def __iter__(self):
        for i in range(len(self)):
            yield np.concatenate([self.obs[i], self.actions[i]], axis=1), self.valid[i]

    def flat(self, layout: str = "sa") -> np.ndarray:
        """Windows as flat vectors; ``sa`` interleaves state and action per step, ``s`` keeps states."""
        if layout == "s":
            x = self.obs
        elif layout == "sa":
            x = np.concatenate([self.obs, self.actions], axis=2)
        else:
            raise ArgumentError(f"unknown layout {layout!r}")
        return x.reshape(len(x), -1).astype(float)


def _discounted_tail(r: np.ndarray, gamma: float) -> np.ndarray:
    if gamma == 1.0:
        return np.cumsum(r[::-1])[::-1]
    out = np.empty_like(r)
    acc = 0.0
    for k in range(len(r) - 1, -1, -1):
        acc = r[k] + gamma * acc
        out[k] = acc
    return out


def window(dataset: TrajectoryDataset, H: int, stride: int | None = None, gamma: float = 1.0) -> Windows:
    """Cut each episode into length-``H`` segments starting every ``stride`` steps.

    Segments running past the episode end are padded with the episode's
    final state and zero actions; padded steps are flagged invalid.  The
    default stride ``H`` tiles each episode, so every transition is valid in
    exactly one window.  ``gamma < 1`` discounts the returns-to-go.
    """
    if H < 1:
        raise ArgumentError("horizon must be at least 1")
    stride = H if stride is None else int(stride)
    if stride < 1:
        raise ArgumentError("stride must be at least 1")
    ds, da = dataset.obs_dim, dataset.act_dim
    obs, acts, valid, rtg, epi, starts = [], [], [], [], [], []
    rewards = dataset.rewards.astype(float)
    for e, (s0, L) in enumerate(zip(dataset.episode_starts, dataset.episode_lengths)):
        ep_obs = np.concatenate([dataset.obs[s0:s0 + L], dataset.next_obs[s0 + L - 1:s0 + L]]).astype(float)
        ep_act = dataset.actions[s0:s0 + L].astype(float)
        tail = _discounted_tail(rewards[s0:s0 + L], gamma)
        for k in range(0, L, stride):
            n_valid = min(H, L - k)
            o = np.empty((H, ds))
            o[:n_valid] = ep_obs[k:k + n_valid]
            o[n_valid:] = ep_obs[-1]
            a = np.zeros((H, da))
            a[:n_valid] = ep_act[k:k + n_valid]
            obs.append(o)
            acts.append(a)
            valid.append(np.arange(H) < n_valid)
            rtg.append(tail[k])
            epi.append(e)
            starts.append(k)
    if not obs:
        return Windows(np.zeros((0, H, ds)), np.zeros((0, H, da)), np.zeros((0, H), bool), np.zeros(0),
                       np.zeros(0, int), np.zeros(0, int))
    return Windows(np.array(obs), np.array(acts), np.array(valid), np.array(rtg), np.array(epi), np.array(starts))


# ---------------------------------------------------------------------------
# Scores


def normalized_score(score, random_score, expert_score):
    """100 * (score - random) / (expert - random)."""
    if expert_score == random_score:
        raise DomainError("expert and random scores coincide; normalised score undefined")
    return 100.0 * (np.asarray(score, dtype=float) - random_score) / (expert_score - random_score)


def subtask_score(successes) -> float:
    s = np.asarray(successes, dtype=float).reshape(-1)
    if s.size != 4:
        raise ArgumentError("subtask score needs exactly four success flags")
    return float(s.mean())


def mean_and_stderr(values) -> tuple[float, float | None]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), None
    if v.size == 1:
        return float(v[0]), None
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else _fmt(r.get(k))) for k in METRIC_COLUMNS})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(round(float(v), 10))
    if isinstance(v, np.integer):
        return int(v)
    return v


# ---------------------------------------------------------------------------
# Storage: one JSON header line, then float32 rows (s, a, r, s', d, synthetic)


def _row_width(ds: int, da: int) -> int:
    return 2 * ds + da + 3


def save(dataset: TrajectoryDataset, path, normalizers: dict | None = None) -> None:
    ds, da = dataset.obs_dim, dataset.act_dim
    header = {
        "format": _FORMAT,
        "version": 1,
        "dtype": "<f4",
        "obs_dim": ds,
        "act_dim": da,
        "n_transitions": len(dataset),
        "n_episodes": dataset.n_episodes,
        "episode_lengths": dataset.episode_lengths.tolist(),
        "fields": [["obs", ds], ["action", da], ["reward", 1], ["next_obs", ds], ["terminal", 1],
                   ["synthetic", 1]],
        "normalization": {k: v.to_dict() for k, v in (normalizers or {}).items()},
        "meta": dataset.meta,
    }
    blob = np.concatenate(
        [dataset.obs, dataset.actions, dataset.rewards[:, None], dataset.next_obs,
         dataset.terminals[:, None].astype(np.float32), dataset.synthetic[:, None].astype(np.float32)],
        axis=1,
    ).astype("<f4") if len(dataset) else np.zeros((0, _row_width(ds, da)), "<f4")
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(blob.tobytes())


def load(path, with_normalizers: bool = False):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: header terminator missing (scanned {len(raw)} bytes from offset 0)")
    try:
        h = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupted header at offset 0: {exc}") from None
    if not isinstance(h, dict) or h.get("format") != _FORMAT:
        raise FormatError(f"{path}: not a dataset file (header at offset 0)")
    try:
        ds, da, n = int(h["obs_dim"]), int(h["act_dim"]), int(h["n_transitions"])
        lengths = np.asarray(h["episode_lengths"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: header missing field {exc} (offset 0)") from None
    start = nl + 1
    width = _row_width(ds, da)
    expected = n * width * 4
    got = len(raw) - start
    if got != expected:
        raise FormatError(f"{path}: header promises {expected} blob bytes from offset {start}, file has {got}")
    if lengths.sum() != n or len(lengths) != h.get("n_episodes", len(lengths)):
        raise FormatError(f"{path}: episode lengths inconsistent with transition count (header, offset 0)")
    rows = np.frombuffer(raw, dtype="<f4", offset=start).reshape(n, width)
    o = 0
    parts = {}
    for name, w in (("obs", ds), ("action", da), ("reward", 1), ("next_obs", ds), ("terminal", 1), ("synthetic", 1)):
        parts[name] = rows[:, o:o + w]
        o += w
    data = TrajectoryDataset(parts["obs"], parts["action"], parts["reward"][:, 0], parts["next_obs"],
                             parts["terminal"][:, 0] > 0.5, lengths, parts["synthetic"][:, 0] > 0.5,
                             h.get("meta", {}))
    if with_normalizers:
        return data, {k: Normalizer.from_dict(v) for k, v in h.get("normalization", {}).items()}
    return data
