import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from diffkit import diffusion as dm, nn, schedules, toy
from diffkit.errors import ConfigurationError, DimensionError

from conftest import fd_grad, max_rel_err

LIN = schedules.make_schedule("linear")
COS = schedules.make_schedule("cosine")
EDM = schedules.make_schedule("edm")
RF = schedules.make_schedule("rectified")
PRE = dm.EdmPrecond(0.5)

finite = st.floats(-5, 5, allow_nan=False)


# -- parameterisation switching ----------------------------------------------

def test_true_noise_recovers_data():
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    t = rng.uniform(LIN.t_eps, LIN.t_max, 6)
    xt = LIN.perturb(x0, t, eps)
    np.testing.assert_allclose(dm.noise_to_data(xt, t, eps, LIN), x0, atol=1e-10)
    np.testing.assert_allclose(dm.data_to_noise(xt, t, x0, LIN), eps, atol=1e-10)


def test_zero_estimates():
    xt = np.array([[0.3, -1.2]])
    a, s = LIN.alpha_sigma(0.5)
    np.testing.assert_allclose(dm.noise_to_data(xt, 0.5, 0.0, LIN), xt / a, rtol=1e-14)
    np.testing.assert_allclose(dm.data_to_noise(xt, 0.5, 0.0, LIN), xt / s, rtol=1e-14)


@pytest.mark.parametrize("sched", [LIN, COS], ids=["linear", "cosine"])
@settings(max_examples=60)
@given(x=hnp.arrays(float, (2, 3), elements=finite), e=hnp.arrays(float, (2, 3), elements=finite),
       u=st.floats(0.0, 1.0))
def test_round_trip_and_reconstruction(sched, x, e, u):
    t = sched.t_eps + u * (sched.t_max - sched.t_eps)
    x0 = dm.noise_to_data(x, t, e, sched)
    np.testing.assert_allclose(dm.data_to_noise(x, t, x0, sched), e, atol=1e-10, rtol=1e-10)
    a, s = sched.alpha_sigma(t)
    np.testing.assert_allclose(a * x0 + s * e, x, atol=1e-10)
    eps = dm.data_to_noise(x, t, e, sched)
    np.testing.assert_allclose(dm.noise_to_data(x, t, eps, sched), e, atol=1e-10, rtol=1e-10)


# -- EDM preconditioning -----------------------------------------------------

def test_edm_coeffs_at_sigma_data():
    c = dm.edm_coeffs(0.5, PRE)
    assert c.c_skip == pytest.approx(0.5, abs=1e-15)
    assert c.c_out == pytest.approx(0.5 / np.sqrt(2), abs=1e-15)
    assert c.c_in == pytest.approx(1 / (0.5 * np.sqrt(2)), abs=1e-15)
    assert c.weight == pytest.approx(2 / 0.25, abs=1e-12)


def test_edm_coeffs_low_noise_limit():
    c = dm.edm_coeffs(1e-9, PRE)
    assert c.c_skip == pytest.approx(1.0, abs=1e-15) and abs(c.c_out) < 1e-8


def test_edm_coeffs_high_noise_against_oracle():
    mpmath.mp.dps = 40
    s, d = mpmath.mpf(80), mpmath.mpf("0.5")
    ref = [d**2 / (s**2 + d**2), s * d / mpmath.sqrt(s**2 + d**2), 1 / mpmath.sqrt(s**2 + d**2),
           mpmath.log(s) / 4, (s**2 + d**2) / (d * s) ** 2]
    for got, want in zip(dm.edm_coeffs(80.0, PRE), ref):
        assert abs(float(got) - float(want)) <= 1e-14 * max(1.0, abs(float(want)))


@given(st.floats(1e-3, 1e3), st.floats(0.05, 5.0))
def test_edm_c_in_unit_variance(sigma, sd):
    c = dm.edm_coeffs(sigma, dm.EdmPrecond(sd))
    assert c.c_in**2 * (sd**2 + sigma**2) == pytest.approx(1.0, abs=1e-12)


def test_edm_precond_rejects_bad_sigma_data():
    for bad in (0.0, -1.0, np.inf):
        with pytest.raises(ValueError):
            dm.EdmPrecond(bad)


def test_edm_denoise_cases():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    c = dm.edm_coeffs(1.3, PRE)
    np.testing.assert_allclose(dm.edm_denoise(lambda u, n: np.zeros_like(u), x, 1.3, PRE), c.c_skip * x)
    bounded = lambda u, n: np.tanh(u) + 1.0
    np.testing.assert_allclose(dm.edm_denoise(bounded, x, 1e-10, PRE), x, atol=1e-9)
    F = lambda u, n: 3.0 * u + n
    sd2, s = 0.25, 1.3
    hand = sd2 / (s * s + sd2) * x + s * 0.5 / np.sqrt(s * s + sd2) * (
        3.0 * x / np.sqrt(s * s + sd2) + np.log(s) / 4)
    np.testing.assert_allclose(dm.edm_denoise(F, x, 1.3, PRE), hand, rtol=0, atol=1e-12)


# -- conditions --------------------------------------------------------------

def test_cfg_dropout_extremes():
    rng = np.random.default_rng(0)
    c = dm.Condition.of(np.ones((50, 2)))
    assert not dm.cfg_dropout(c, 0.0, rng).null.any()
    assert dm.cfg_dropout(c, 1.0, rng).null.all()


def test_cfg_dropout_rate():
    c = dm.Condition.of(np.ones((100_000, 1)))
    frac = dm.cfg_dropout(c, 0.25, np.random.default_rng(1)).null.mean()
    assert abs(frac - 0.25) < 0.01


def test_null_condition_zeroes_payload():
    model = dm.Denoiser(2, LIN, cond_dim=3, hidden_widths=(8,), seed=0)
    x = np.zeros((2, 2))
    a = model.net_input(x, 0.5, dm.Condition.of([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], null=True))
    b = model.net_input(x, 0.5, None)
    np.testing.assert_array_equal(a, b)
    assert model.spec.input_dim == 2 + model.time_dim + 3 + 1


def test_unconditional_model_rejects_condition():
    model = dm.Denoiser(2, LIN, hidden_widths=(8,))
    with pytest.raises(ConfigurationError):
        model.predict(np.zeros((1, 2)), 0.5, cond=np.ones((1, 1)))


def test_incompatible_kind_and_schedule():
    with pytest.raises(ConfigurationError):
        dm.Denoiser(2, EDM, "noise")
    with pytest.raises(ConfigurationError):
        dm.Denoiser(2, LIN, "rf_velocity")


def test_wrong_data_width():
    model = dm.Denoiser(2, LIN, hidden_widths=(8,))
    with pytest.raises(DimensionError):
        model.predict(np.zeros((1, 3)), 0.5)


# -- losses ------------------------------------------------------------------

def _exact(model, fn):
    """Replace the network by a closed-form predictor ``fn(x, t)``."""
    model.raw = lambda x, t, *a, **k: (fn(np.asarray(x, float), np.asarray(t, float)), None)
    model.vjp = lambda cache, up, params=None: ({}, None)
    return model


def test_score_matching_oracle_predictor_gives_zero():
    c = np.array([0.7, -0.4])
    sched = LIN

    def eps(x, t):
        a, s = sched.alpha_sigma(t)
        return (x - a[:, None] * c) / s[:, None]

    model = _exact(dm.Denoiser(2, sched, hidden_widths=(4,)), eps)
    loss, _ = dm.score_matching_loss(model, np.tile(c, (64, 1)), rng=np.random.default_rng(0))
    assert loss < 1e-20


def test_edm_oracle_denoiser_gives_zero():
    c = np.array([0.2, 0.9])
    model = dm.Denoiser(2, EDM, "edm_raw", hidden_widths=(4,))

    def raw(x, sigma):
        k = dm.edm_coeffs(sigma, PRE)
        return (c - k.c_skip[:, None] * x) / k.c_out[:, None]

    loss, _ = dm.edm_loss(_exact(model, raw), np.tile(c, (64, 1)), rng=np.random.default_rng(0))
    assert loss < 1e-18


def test_rf_oracle_velocity_gives_zero():
    c = np.array([1.5, -0.5])

    def v(x, t):
        x1 = (x - (1 - t[:, None]) * c) / t[:, None]
        return c - x1

    model = _exact(dm.Denoiser(2, RF, "rf_velocity", hidden_widths=(4,)), v)
    loss, _ = dm.rf_loss(model, np.tile(c, (64, 1)), rng=np.random.default_rng(3))
    assert loss < 1e-18


def test_zero_predictor_score_matching_loss():
    # losses are averaged over dimensions, so E|eps|^2 = dim becomes 1 per dimension
    dim = 4
    model = dm.Denoiser(dim, LIN, hidden_widths=(8,))
    zero = nn.zeros_like(model.params)
    x0 = np.random.default_rng(0).normal(size=(50_000, dim))
    loss, _ = dm.score_matching_loss(model, x0, rng=np.random.default_rng(1), params=zero)
    assert abs(loss * dim - dim) < 0.05 * dim


def test_zero_predictor_rf_loss():
    dim = 3
    model = dm.Denoiser(dim, RF, "rf_velocity", hidden_widths=(8,))
    x0 = np.random.default_rng(0).normal(size=(50_000, dim))
    loss, _ = dm.rf_loss(model, x0, rng=np.random.default_rng(1), params=nn.zeros_like(model.params))
    assert abs(loss * dim - 2 * dim) < 0.05 * 2 * dim


def test_edm_weight_at_sigma_data():
    assert dm.edm_coeffs(PRE.sigma_data, PRE).weight == pytest.approx(2 / PRE.sigma_data**2)


def test_losses_reject_wrong_kind():
    with pytest.raises(ConfigurationError):
        dm.edm_loss(dm.Denoiser(2, LIN), np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        dm.rf_loss(dm.Denoiser(2, LIN), np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        dm.score_matching_loss(dm.Denoiser(2, RF, "rf_velocity"), np.zeros((2, 2)))


GRAD_CASES = {
    "score_matching_noise": (LIN, "noise", dm.score_matching_loss),
    "score_matching_data": (COS, "data", dm.score_matching_loss),
    "edm": (EDM, "edm_raw", dm.edm_loss),
    "rectified": (RF, "rf_velocity", dm.rf_loss),
}


@pytest.mark.parametrize("case", sorted(GRAD_CASES))
def test_loss_gradients_match_finite_differences(case):
    sched, kind, fn = GRAD_CASES[case]
    model = dm.Denoiser(2, sched, kind, hidden_widths=(8,), time_dim=4, seed=2)
    x0 = np.random.default_rng(0).normal(size=(16, 2))
    _, grads = fn(model, x0, rng=np.random.default_rng(7), params=model.params)
    fd = fd_grad(lambda p: fn(model, x0, rng=np.random.default_rng(7), params=p)[0], model.params)
    assert max_rel_err(grads, fd) < 1e-3


def test_conditional_loss_gradient():
    model = dm.Denoiser(2, LIN, cond_dim=2, hidden_widths=(8,), time_dim=4, seed=1)
    rng = np.random.default_rng(0)
    x0, c = rng.normal(size=(12, 2)), dm.Condition.of(rng.normal(size=(12, 2)), null=rng.random(12) < 0.3)
    _, grads = dm.score_matching_loss(model, x0, c, np.random.default_rng(4), model.params)
    fd = fd_grad(lambda p: dm.score_matching_loss(model, x0, c, np.random.default_rng(4), p)[0], model.params)
    assert max_rel_err(grads, fd) < 1e-3


# -- training ----------------------------------------------------------------

def _small_model(seed=0):
    return dm.Denoiser(2, LIN, hidden_widths=(16, 16), time_dim=8, seed=seed)


def test_zero_steps_leave_params():
    model = _small_model()
    before = {k: v.copy() for k, v in model.params.items()}
    res = dm.train(model, np.zeros((10, 2)), dm.TrainConfig(gradient_steps=0, batch_size=4))
    assert len(res.loss_trace) == 0
    for k in before:
        np.testing.assert_array_equal(res.model.params[k], before[k])


def test_training_is_reproducible():
    x = toy.gmm_data(500, np.random.default_rng(0), k=2)[0]
    cfg = dm.TrainConfig(gradient_steps=50, batch_size=32, lr=1e-3, seed=3)
    a = dm.train(_small_model(), x, cfg)
    b = dm.train(_small_model(), x, cfg)
    assert a.loss_trace.tobytes() == b.loss_trace.tobytes()
    assert all(a.model.params[k].tobytes() == b.model.params[k].tobytes() for k in a.model.params)


def test_ema_equals_unrolled_recursion():
    x = toy.gmm_data(200, np.random.default_rng(0), k=2)[0]
    d = 0.9
    model = _small_model()
    shadow = {k: v.copy() for k, v in model.params.items()}
    seen = []
    cfg = dm.TrainConfig(gradient_steps=10, batch_size=16, lr=1e-2, ema_decay=d)
    res = dm.train(model, x, cfg, callback=lambda i, m: seen.append({k: v.copy() for k, v in m.params.items()}),
                   callback_every=1)
    assert len(seen) == 10
    for theta in seen:
        shadow = {k: d * shadow[k] + (1 - d) * theta[k] for k in shadow}
    for k in shadow:
        assert np.max(np.abs(res.ema.shadow[k] - shadow[k])) <= 1e-12


def test_training_rejects_bad_shapes_and_configs():
    with pytest.raises(DimensionError):
        dm.train(_small_model(), np.zeros((5, 3)), dm.TrainConfig(gradient_steps=1))
    with pytest.raises(ConfigurationError):
        dm.TrainConfig(cond_dropout=1.5)
    with pytest.raises(ConfigurationError):
        dm.TrainConfig(batch_size=0)


def test_two_mode_mixture_beats_zero_baseline():
    rng = np.random.default_rng(0)
    x_train = toy.gmm_data(4000, rng, k=2, radius=1.0, std=0.1)[0]
    x_test = toy.gmm_data(2000, rng, k=2, radius=1.0, std=0.1)[0]
    model = dm.Denoiser(2, LIN, hidden_widths=(64, 64), seed=0)
    res = dm.train(model, x_train, dm.TrainConfig(gradient_steps=20_000, batch_size=128, lr=1e-3, seed=1))
    trained = toy.eval_loss(res.model, x_test, res.model.eval_params())
    baseline = toy.eval_loss(res.model, x_test, nn.zeros_like(res.model.params))
    assert trained <= 0.5 * baseline


def test_config_round_trip():
    model = dm.Denoiser(3, EDM, "edm_raw", cond_dim=2, hidden_widths=(8, 8), use_layernorm=True, seed=4)
    clone = dm.Denoiser.from_config(model.config(), model.params)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(clone.predict(x, 1.0, np.ones((4, 2))), model.predict(x, 1.0, np.ones((4, 2))))
