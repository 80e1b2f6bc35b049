"""End-to-end acceptance criteria 1-14.

Run with ``pytest tests/test_acceptance.py -v``; a summary with one
PASS/FAIL line per criterion is printed at the end of the session.
"""

import time
import warnings

import numpy as np
import pytest

from diffkit import cli, datasets, envs, nn, schedules, solvers, toy
from diffkit import diffusion as dm
from diffkit import guidance as gd
from diffkit.agents import SynthERAgent, evaluate, make_agent, success_rate, synthetic_residual
from diffkit.agents.common import critic_loss
from diffkit.oracles import GaussianOracle, PointMassOracle
from diffkit.solvers import SampleConfig

from conftest import fd_grad, max_rel_err, record

pytestmark = pytest.mark.acceptance

LIN = schedules.make_schedule("linear")
EDM = schedules.make_schedule("edm")
RF = schedules.make_schedule("rectified")
MU, VAR = np.array([1.0, -1.0]), 0.25

# VP solvers run on the sqrt-t grid (see the ledger); EDM and RF use their own defaults
SOLVER_SETUPS = [(LIN, s, "quadratic") for s in ("ddpm", "ddim", "dpm_solver_1", "sde_dpmpp_1", "ode_dpmpp_2m")]
SOLVER_SETUPS += [(EDM, "edm_euler", None), (EDM, "edm_heun", None), (RF, "rf_euler", None)]


def _fmt(d: dict) -> str:
    return ", ".join(f"{k} {v:.3g}" if isinstance(v, float) else f"{k} {v}" for k, v in d.items())


# ---------------------------------------------------------------------------
# Shared toy models


@pytest.fixture(scope="module")
def gmm():
    """One noise-prediction model on the 8-mode ring, trained exactly once."""
    counter = cli.TrainingCounter()
    x, _ = toy.gmm_data(20_000, np.random.default_rng(2))
    model = dm.Denoiser(2, LIN, "noise", hidden_widths=(128, 128, 128), seed=1)
    counter(model, x, dm.TrainConfig(6000, 256, 1e-3, 0.999, seed=1))
    ref, _ = toy.gmm_data(4096, np.random.default_rng(3))
    return model, x, ref, counter


# ---------------------------------------------------------------------------
# 1-3, 7: solvers against analytic oracles


def test_c01_gaussian_oracle_sampling():
    worst, fails = {}, []
    for sched, solver, spacing in SOLVER_SETUPS:
        o = GaussianOracle(MU, VAR, sched)
        t0 = time.perf_counter()
        x = solvers.sample(o, SampleConfig(solver, 20, n_samples=8192, seed=0, spacing=spacing))
        dt = time.perf_counter() - t0
        m_err = float(np.abs(x.mean(0) - MU).max())
        c_err = float(np.abs(np.cov(x.T) - VAR * np.eye(2)).max())
        worst[solver] = max(m_err, c_err)
        if m_err > 0.05 or c_err > 0.05 or dt > 10:
            fails.append(f"{solver}: mean {m_err:.3f} cov {c_err:.3f} {dt:.1f}s")
    ok = record(1, not fails, "; ".join(fails) or _fmt(worst))
    assert ok, fails


def test_c02_dpm_solver_1_equals_ddim():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        s, t = np.sort(rng.uniform(LIN.t_eps, LIN.t_max, 2))[::-1]
        x, eps = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        a = solvers.ddim_step(x, s, t, eps, LIN)
        b = solvers.dpm_solver_1_step(x, s, t, eps, LIN)
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(a), 1e-12))))
    ok = record(2, worst <= 1e-6, f"max relative difference {worst:.2e}")
    assert ok


def _endpoint_error(sched, solver, n, spacing):
    o = GaussianOracle(MU, VAR, sched)
    x = np.random.default_rng(0).standard_normal((256, 2)) * (sched.t_max if sched.kind == "edm" else 1.0)
    g = sched.time_grid(n, spacing)
    y = solvers.solve(o, x, g, solver, temperature=0.0)
    return float(np.max(np.abs(y - o.ode_solution(x, g[0], g[-1]))))


def test_c03_convergence_order():
    bands = {"ode_dpmpp_2m": (LIN, "quadratic", 3.0, np.inf), "edm_heun": (EDM, None, 3.0, np.inf),
             "ddim": (LIN, "quadratic", 1.3, 3.0), "edm_euler": (EDM, None, 1.3, 3.0),
             "rf_euler": (RF, None, 1.3, 3.0)}
    ratios, fails = {}, []
    for solver, (sched, spacing, lo, hi) in bands.items():
        r = _endpoint_error(sched, solver, 10, spacing) / _endpoint_error(sched, solver, 20, spacing)
        ratios[solver] = r
        if not lo <= r <= hi:
            fails.append(solver)
    ok = record(3, not fails, _fmt(ratios))
    assert ok, ratios


def test_c07_point_mass_exactness():
    c = np.array([0.7, -1.1])
    x = np.random.default_rng(0).normal(size=(64, 2))
    rf = float(np.abs(solvers.rf_euler_step(x, 1.0, 0.0, PointMassOracle(c, RF).predict(x, 1.0)) - c).max())
    xe = x * EDM.t_max
    d = PointMassOracle(c, EDM).predict(xe, EDM.t_max)
    edm = float(np.abs(solvers.edm_euler_step(xe, EDM.t_max, 0.0, d) - c).max())
    s, t = LIN.t_max, LIN.t_eps
    (a_s, s_s), (a_t, s_t) = LIN.alpha_sigma(s), LIN.alpha_sigma(t)
    eps = PointMassOracle(c, LIN).predict(x, s)
    closed = a_t * c + s_t * (x - a_s * c) / s_s
    ddim = float(np.abs(solvers.ddim_step(x, s, t, eps, LIN) - closed).max())
    ok = record(7, rf <= 1e-10 and edm <= 1e-10 and ddim <= 1e-12,
                f"rf_euler {rf:.1e}, edm_euler {edm:.1e}, ddim {ddim:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4, 9, 11: one trained GMM model


def test_c04_cross_solver_without_retraining(gmm):
    model, _, _, counter = gmm
    centers = toy.ring_centers()
    low = {}
    for solver in ("ddpm", "ddim", "sde_dpmpp_1", "ode_dpmpp_2m"):
        x = solvers.sample(model, SampleConfig(solver, 20, n_samples=4096, seed=5))
        low[solver] = float(toy.mode_histogram(x, centers).min())
    ok = record(4, counter.count == 1 and min(low.values()) >= 0.02,
                f"trainings {counter.count}; smallest mode mass " + _fmt(low))
    assert ok


def test_c09_five_steps_suffice(gmm):
    model, _, ref, _ = gmm
    rel = {}
    for solver in ("ddpm", "ddim", "sde_dpmpp_1", "ode_dpmpp_2m"):
        e = {n: toy.energy_distance(solvers.sample(model, SampleConfig(solver, n, n_samples=4096, seed=6,
                                                                 spacing="quadratic")), ref)
             for n in (5, 50)}
        rel[solver] = abs(e[5] - e[50]) / e[50]
    n_ok = sum(r <= 0.10 for r in rel.values())
    ok = record(9, n_ok >= 3, f"{n_ok}/4 within 10%: " + _fmt(rel))
    assert ok


def test_c11_diffusion_x_moves_toward_data(gmm):
    model, x_train, _, _ = gmm
    cfg = dict(n_samples=2048, seed=9, spacing="quadratic")
    d0 = toy.nearest_distance(solvers.sample(model, SampleConfig("ddim", 20, **cfg)), x_train)
    d8 = toy.nearest_distance(solvers.sample(model, SampleConfig("ddim", 20, diffusion_x=8, **cfg)), x_train)
    # paired bootstrap: same starting noise, so compare per-sample differences
    diff = d8 - d0
    rng = np.random.default_rng(0)
    boots = np.array([diff[rng.integers(0, len(diff), len(diff))].mean() for _ in range(2000)])
    upper = float(np.quantile(boots, 0.95))
    ok = record(11, upper <= 0.0, f"M=0 {d0.mean():.4f}, M=8 {d8.mean():.4f}, 95% upper bound of "
                                   f"difference {upper:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 5-6: guidance and inpainting


def test_c05_classifier_free_guidance():
    rng = np.random.default_rng(0)
    centers = np.array([[-1.0, 0.0], [1.0, 0.0]])
    labels = rng.integers(0, 2, 8000)
    x = centers[labels] + 0.1 * rng.standard_normal((8000, 2))
    model = dm.Denoiser(2, LIN, "noise", cond_dim=2, hidden_widths=(64, 64), seed=0)
    dm.train(model, x, dm.TrainConfig(4000, 256, 1e-3, 0.995, cond_dropout=0.25, seed=0), cond=np.eye(2)[labels])
    stats, ok = {}, True
    for w in (1.0, 2.0):
        for k in (0, 1):
            xs = solvers.sample(model, SampleConfig("ddim", 20, n_samples=2048, seed=k), gd.CfgGuide(np.eye(2)[k], w))
            frac = float(toy.mode_histogram(xs, centers)[k])
            stats[f"w={w:g} mode {k}"] = frac
            ok &= frac >= 0.95
    xs = solvers.sample(model, SampleConfig("ddim", 20, n_samples=2048, seed=3), gd.CfgGuide(np.eye(2)[0], 0.0))
    h = toy.mode_histogram(xs, centers)
    stats["w=0 min mode"] = float(h.min())
    ok = record(5, ok and h.min() >= 0.30, _fmt(stats))
    assert ok


def test_c06_inpainting_is_exact():
    rng = np.random.default_rng(0)
    dim = 6
    mean = rng.normal(size=dim)
    models = {LIN.kind: GaussianOracle(mean, 0.3, LIN), EDM.kind: GaussianOracle(mean, 0.3, EDM),
              RF.kind: GaussianOracle(mean, 0.3, RF)}
    bad = 0
    for i in range(100):
        mask = (rng.random(dim) < 0.5).astype(float)
        known = rng.normal(size=(8, dim)) * 3
        for sched, solver, spacing in SOLVER_SETUPS:
            cfg = SampleConfig(solver, 6, n_samples=8, seed=i, spacing=spacing, diffusion_x=i % 3)
            x = solvers.sample(models[sched.kind], cfg, mask=gd.SampleMask(mask, known))
            m = mask.astype(bool)
            bad += int(x[:, m].tobytes() != known[:, m].tobytes())
    ok = record(6, bad == 0, f"{100 * len(SOLVER_SETUPS) - bad}/{100 * len(SOLVER_SETUPS)} masked samples exact")
    assert ok


# ---------------------------------------------------------------------------
# 8, 12: toy offline RL


@pytest.fixture(scope="module")
def maze():
    env = envs.PointMazeEnv.make("pointmaze-open")
    data = datasets.collect(env, envs.make_policy("medium"), 500, np.random.default_rng(0))
    return env, data


def _success(agent, env):
    return success_rate(evaluate(agent, env, 50, seed=1000))


def test_c08_offline_rl(maze):
    env, data = maze
    rates = {}
    for algo in ("bc", "dql", "idql", "edp", "diffbc", "diffpolicy", "dd"):
        agent = make_agent(algo, env.spec.obs_dim, env.spec.act_dim, seed=1).fit(data, env)
        rates[algo] = _success(agent, env)
    # before its evolution round, AdaptDiffuser is exactly Diffuser
    agent = make_agent("adaptdiffuser", env.spec.obs_dim, env.spec.act_dim, rounds=0, seed=1).fit(data, env)
    rates["diffuser"] = _success(agent, env)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        agent.evolve(data, env, 1)
    rates["adaptdiffuser"] = _success(agent, env)
    bc = rates["bc"]
    ok = (min(rates["dql"], rates["idql"]) >= 0.8 and min(rates["diffuser"], rates["dd"]) >= 0.6
          and all(r >= bc - 0.05 for r in rates.values()))
    ok = record(8, ok, _fmt(rates))
    assert ok


def test_c12_synther(maze):
    env, data = maze
    agent = SynthERAgent(env.spec.obs_dim, env.spec.act_dim, n_synthetic=10_000, seed=1).fit(data)
    syn = agent.augmented.rows()[len(data):]
    real = data.rows()
    d_mean = float(np.abs(syn.mean(0) - real.mean(0)).max())
    d_std = float(np.abs(syn.std(0) - real.std(0)).max())
    generated = datasets.TrajectoryDataset.from_rows(syn, env.spec.obs_dim, env.spec.act_dim, synthetic=True)
    res_syn = float(np.median(synthetic_residual(env, generated)))
    res_real = float(np.median(synthetic_residual(env, data)))
    bc = make_agent("bc", env.spec.obs_dim, env.spec.act_dim, seed=1).fit(data)
    s_aug, s_real = _success(agent, env), _success(bc, env)
    checks = {"moments": d_mean <= 0.1 and d_std <= 0.1, "residual": res_syn <= 2 * res_real,
              "bc": s_aug >= s_real - 0.05}
    detail = (f"|dmean| {d_mean:.3f}, |dstd| {d_std:.3f}, residual median syn {res_syn:.2e} vs real "
              f"{res_real:.2e}, success real+syn {s_aug:.2f} vs real {s_real:.2f}; failing: "
              f"{[k for k, v in checks.items() if not v] or 'none'}")
    ok = record(12, all(checks.values()), detail)
    assert ok


# ---------------------------------------------------------------------------
# 10: EMA sweep


def test_c10_ema_smooths_evaluation_loss():
    # exact recursion first
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=3)}
    ema = nn.EmaState.from_params(0.9, p)
    hand = p["w"].copy()
    for _ in range(3):
        p = {"w": p["w"] + rng.normal(size=3)}
        ema = nn.ema_update(ema, p)
        hand = 0.9 * hand + 0.1 * p["w"]
    exact = float(np.abs(ema.shadow["w"] - hand).max())
    x, _ = toy.gmm_data(20_000, np.random.default_rng(2))
    x_eval, _ = toy.gmm_data(4096, np.random.default_rng(4))
    model = dm.Denoiser(2, LIN, "noise", hidden_widths=(64, 64), seed=1)
    # a 0.9999 average has a 10k-step time constant; run long enough to leave the warm-up trend behind
    traces = toy.ema_sweep(model, x, x_eval, dm.TrainConfig(100_000, 128, 1e-3, 0.0, seed=1), [0.9999], 2000)
    raw, smooth = np.std(traces["raw"][-10:]), np.std(traces["ema-0.9999"][-10:])
    ok = record(10, smooth < raw and exact <= 1e-12 and len(traces["raw"]) >= 10,
                f"std over last 10 checkpoints: raw {raw:.2e}, ema-0.9999 {smooth:.2e}; recursion error {exact:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 13: CLI determinism


def test_c13_cli_reruns_are_byte_identical(tmp_path):
    runs = {
        "gen": ["gen-data", "--episodes", "20", "--seed", "4"],
        "train": ["train", "--algo", "diffbc", "--episodes", "20", "--train-steps", "200", "--sample-steps", "5"],
        "sweep": ["sweep", "--solvers", "ddim,ode_dpmpp_2m", "--steps-list", "2,5", "--seeds", "0,1",
                  "--train-steps", "300", "--n-samples", "256"],
        "ema": ["sweep", "--sweep", "ema", "--train-steps", "400", "--checkpoint-every", "100", "--n-samples", "256"],
    }
    for name, argv in runs.items():
        assert cli.run(argv + ["--out", str(tmp_path / name)]) == 0
    assert cli.run(["eval", "--run", str(tmp_path / "train"), "--episodes", "3", "--out", str(tmp_path / "eval")]) == 0
    assert cli.run(["plot", "--csv", str(tmp_path / "sweep/sweep.csv"), "--out", str(tmp_path / "plot")]) == 0
    mismatched, compared = [], 0
    for name in [*runs, "eval", "plot"]:
        first = tmp_path / name
        again = tmp_path / f"{name}-again"
        assert cli.run([_command(first), "--config", str(first / "run_config.json"), "--out", str(again)]) == 0
        for f in sorted(first.iterdir()):
            if f.suffix in (".csv", ".svg", ".dkd"):
                compared += 1
                if f.read_bytes() != (again / f.name).read_bytes():
                    mismatched.append(f"{name}/{f.name}")
    ok = record(13, not mismatched and compared >= 6, f"{compared} output files compared; mismatched: "
                                                      f"{mismatched or 'none'}")
    assert ok


def _command(run_dir):
    return cli.RunConfig.from_file(run_dir / "run_config.json").command


# ---------------------------------------------------------------------------
# 14: gradients


def test_c14_gradients_match_finite_differences():
    errs = {}
    x0 = np.random.default_rng(0).normal(size=(16, 2))
    for name, sched, kind, fn in [("score matching", LIN, "noise", dm.score_matching_loss),
                                  ("edm", EDM, "edm_raw", dm.edm_loss), ("rectified", RF, "rf_velocity", dm.rf_loss)]:
        model = dm.Denoiser(2, sched, kind, hidden_widths=(8,), time_dim=4, seed=2)
        model.params = {k: v + 0.1 * np.random.default_rng(1).standard_normal(v.shape) for k, v in model.params.items()}
        _, g = fn(model, x0, rng=np.random.default_rng(7), params=model.params)
        fd = fd_grad(lambda p: fn(model, x0, rng=np.random.default_rng(7), params=p)[0], model.params)
        errs[name] = max_rel_err(g, fd)
    rng = np.random.default_rng(3)
    q = nn.Mlp.create(4, (8, 8), 1, rng)
    s, a, y = rng.normal(size=(9, 2)), rng.normal(size=(9, 2)), rng.normal(size=9)
    _, g = critic_loss(q.spec, q.params, s, a, y)
    errs["critic"] = max_rel_err(g, fd_grad(lambda p: critic_loss(q.spec, p, s, a, y)[0], q.params))
    reg = gd.NoisyRegressor(2, LIN, hidden=(8,), time_dim=4, seed=3)
    xt, t, yt = rng.normal(size=(10, 2)), rng.uniform(0.01, 1, 10), rng.normal(size=10)
    _, g = gd.classifier_loss(reg, reg.params, xt, t, yt)
    errs["classifier"] = max_rel_err(g, fd_grad(lambda p: gd.classifier_loss(reg, p, xt, t, yt)[0], reg.params))
    ok = record(14, max(errs.values()) < 1e-3, "max relative error " + _fmt(errs))
    assert ok
