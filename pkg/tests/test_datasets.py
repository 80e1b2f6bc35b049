import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from diffkit import datasets as D, envs
from diffkit.errors import ArgumentError, DomainError, FormatError


def _toy(lengths, ds=2, da=2, seed=0):
    rng = np.random.default_rng(seed)
    n = int(sum(lengths))
    return D.TrajectoryDataset(rng.normal(size=(n, ds)), rng.uniform(-1, 1, (n, da)), rng.normal(size=n),
                               rng.normal(size=(n, ds)), np.zeros(n, bool), lengths)


# -- collection --------------------------------------------------------------

def test_collect_counts_and_determinism(open_env):
    pol = envs.make_policy("medium")
    a = D.collect(open_env, pol, 12, np.random.default_rng(5))
    b = D.collect(open_env, pol, 12, np.random.default_rng(5))
    assert a.n_episodes == 12 and len(a.returns) == 12
    assert a.rows().tobytes() == b.rows().tobytes()


def test_collect_zero_episodes(open_env):
    d = D.collect(open_env, envs.make_policy("expert"), 0, np.random.default_rng(0))
    assert len(d) == 0 and d.n_episodes == 0 and d.success_rate() == 0.0
    with pytest.raises(ArgumentError):
        D.collect(open_env, envs.make_policy("expert"), -1, np.random.default_rng(0))


def test_expert_returns_beat_random(open_env):
    exp = D.collect(open_env, envs.make_policy("expert"), 50, np.random.default_rng(0))
    rnd = D.collect(open_env, envs.make_policy("random"), 50, np.random.default_rng(0))
    # sparse reward: the margin equals the success-rate gap measured for the scripted tiers
    assert exp.returns.mean() - rnd.returns.mean() >= 0.75


def test_dataset_shape_validation():
    with pytest.raises(ArgumentError):
        D.TrajectoryDataset(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), np.zeros((3, 2)),
                            np.zeros(3, bool), [2])
    with pytest.raises(ArgumentError):
        D.TrajectoryDataset(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), np.zeros((3, 3)),
                            np.zeros(3, bool), [3])


def test_rows_round_trip():
    d = _toy([3, 4])
    back = D.TrajectoryDataset.from_rows(d.rows(), 2, 2, synthetic=False)
    np.testing.assert_array_equal(back.rows(), d.rows())
    assert back.n_episodes == 7 and not back.synthetic.any()
    both = d.concat(D.TrajectoryDataset.from_rows(d.rows()[:2], 2, 2))
    assert len(both) == 9 and both.synthetic.sum() == 2


# -- normalisation -----------------------------------------------------------

@pytest.mark.parametrize("kind", ["minmax", "gaussian"])
@settings(max_examples=40)
@given(x=hnp.arrays(float, (20, 3), elements=st.floats(-1e3, 1e3)))
def test_normalizer_invertible(kind, x):
    n = D.Normalizer.fit(x, kind)
    assert np.all(n.scale > 0)
    np.testing.assert_allclose(n.inverse(n.forward(x)), x, atol=1e-10 * max(1.0, np.abs(x).max()))


def test_minmax_range():
    x = np.random.default_rng(0).normal(size=(100, 2)) * [3.0, 0.1] + [5.0, -2.0]
    y = D.Normalizer.fit(x).forward(x)
    np.testing.assert_allclose(y.min(axis=0), -1.0)
    np.testing.assert_allclose(y.max(axis=0), 1.0)


def test_constant_dimension_keeps_unit_scale():
    n = D.Normalizer.fit(np.ones((5, 2)))
    np.testing.assert_array_equal(n.scale, 1.0)
    with pytest.raises(ArgumentError):
        D.Normalizer.fit(np.ones((5, 2)), "robust")


def test_normalizer_dict_round_trip():
    n = D.Normalizer.fit(np.random.default_rng(0).normal(size=(10, 3)), "gaussian")
    m = D.Normalizer.from_dict(json.loads(json.dumps(n.to_dict())))
    np.testing.assert_array_equal(m.shift, n.shift)
    np.testing.assert_array_equal(m.scale, n.scale)


# -- windows -----------------------------------------------------------------

def test_short_episode_is_padded():
    d = _toy([10])
    w = D.window(d, 16)
    assert len(w) == 1
    assert w.valid[0].sum() == 10 and (~w.valid[0]).sum() == 6
    np.testing.assert_array_equal(w.obs[0, 10:], np.broadcast_to(d.next_obs[-1], (6, 2)))
    np.testing.assert_array_equal(w.actions[0, 10:], 0.0)


def test_exact_length_episode_is_unpadded():
    w = D.window(_toy([16]), 16)
    assert len(w) == 1 and w.valid.all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=6), st.integers(1, 20))
def test_valid_flags_cover_every_transition_once(lengths, H):
    d = _toy(lengths)
    w = D.window(d, H)
    assert int(w.valid.sum()) == len(d)
    # valid steps are a prefix of each window and stay within one episode
    for v in w.valid:
        k = v.sum()
        assert v[:k].all() and not v[k:].any()


def test_overlapping_windows_and_returns_to_go():
    d = _toy([5])
    w = D.window(d, 3, stride=1)
    assert len(w) == 5
    r = d.rewards.astype(float)
    np.testing.assert_allclose(w.returns_to_go, [r[k:].sum() for k in range(5)], rtol=1e-12)
    wg = D.window(d, 3, stride=1, gamma=0.5)
    np.testing.assert_allclose(wg.returns_to_go[3], r[3] + 0.5 * r[4], rtol=1e-12)


def test_windows_round_trip_normalizer():
    w = D.window(_toy([7, 9]), 4)
    flat = w.flat("sa")
    n = D.Normalizer.fit(flat)
    np.testing.assert_allclose(n.inverse(n.forward(flat)), flat, atol=1e-10)
    assert w.flat("s").shape == (len(w), 4 * 2)
    with pytest.raises(ArgumentError):
        w.flat("as")
    with pytest.raises(ArgumentError):
        D.window(_toy([3]), 0)


def test_empty_dataset_windows():
    w = D.window(D.TrajectoryDataset.empty(2, 2), 8)
    assert len(w) == 0 and w.obs.shape == (0, 8, 2)


# -- scores ------------------------------------------------------------------

def test_normalized_score_cases():
    assert D.normalized_score(110, 10, 110) == pytest.approx(100.0)
    assert D.normalized_score(10, 10, 110) == pytest.approx(0.0)
    assert D.normalized_score(60, 10, 110) == pytest.approx(50.0)
    with pytest.raises(DomainError):
        D.normalized_score(1, 2, 2)


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(1, 100), st.floats(0.1, 10), st.floats(-50, 50))
def test_normalized_score_affine_invariant(score, rnd, gap, a, b):
    exp = rnd + gap
    base = D.normalized_score(score, rnd, exp)
    moved = D.normalized_score(a * score + b, a * rnd + b, a * exp + b)
    assert moved == pytest.approx(base, rel=1e-7, abs=1e-7)


def test_subtask_score():
    assert D.subtask_score([1, 1, 1, 1]) == 1.0
    assert D.subtask_score([0, 0, 0, 0]) == 0.0
    assert D.subtask_score([1, 1, 0, 0]) == 0.5
    with pytest.raises(ArgumentError):
        D.subtask_score([1, 0, 1])


def test_mean_and_stderr():
    assert D.mean_and_stderr([4.0]) == (4.0, None)
    m, se = D.mean_and_stderr([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


def test_metrics_csv_schema(tmp_path):
    D.write_metrics(tmp_path / "m.csv", [{"run_id": "r", "algo": "bc", "score": np.float64(0.1 + 0.2), "seed": 3}])
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == D.METRIC_COLUMNS
    assert rows[1][D.METRIC_COLUMNS.index("score")] == "0.3"
    assert rows[1][D.METRIC_COLUMNS.index("stderr")] == ""


# -- storage -----------------------------------------------------------------

def test_save_load_bit_identical(tmp_path, small_medium_data):
    norm = {"obs": D.Normalizer.fit(small_medium_data.obs)}
    D.save(small_medium_data, tmp_path / "d.bin", norm)
    back, nrm = D.load(tmp_path / "d.bin", with_normalizers=True)
    assert back.rows().tobytes() == small_medium_data.rows().tobytes()
    np.testing.assert_array_equal(back.episode_lengths, small_medium_data.episode_lengths)
    np.testing.assert_array_equal(nrm["obs"].shift, norm["obs"].shift)
    D.save(back, tmp_path / "e.bin", norm)
    assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=0, max_size=5), st.integers(0, 10**6))
def test_save_load_bijection(tmp_path_factory, lengths, seed):
    d = _toy(lengths, seed=seed) if lengths else D.TrajectoryDataset.empty(2, 2)
    p = tmp_path_factory.mktemp("ds") / "d.bin"
    D.save(d, p)
    assert D.load(p).rows().tobytes() == d.rows().tobytes()


def _saved(tmp_path):
    p = tmp_path / "d.bin"
    D.save(_toy([4, 5]), p)
    return p, p.read_bytes()


def test_truncated_file(tmp_path):
    p, raw = _saved(tmp_path)
    p.write_bytes(raw[:-7])
    with pytest.raises(FormatError, match="offset"):
        D.load(p)


def test_header_dims_disagree_with_blob(tmp_path):
    p, raw = _saved(tmp_path)
    nl = raw.index(b"\n")
    h = json.loads(raw[:nl])
    h["obs_dim"] = 3
    p.write_bytes(json.dumps(h).encode() + raw[nl:])
    with pytest.raises(FormatError, match="offset"):
        D.load(p)


@pytest.mark.parametrize("payload", [b"not json\n", b"{\"format\": \"other\"}\n", b"no newline at all"])
def test_corrupted_headers(tmp_path, payload):
    p = tmp_path / "bad.bin"
    p.write_bytes(payload)
    with pytest.raises(FormatError):
        D.load(p)


def test_inconsistent_episode_lengths(tmp_path):
    p, raw = _saved(tmp_path)
    nl = raw.index(b"\n")
    h = json.loads(raw[:nl])
    h["episode_lengths"] = [3, 5]
    p.write_bytes(json.dumps(h).encode() + raw[nl:])
    with pytest.raises(FormatError):
        D.load(p)
