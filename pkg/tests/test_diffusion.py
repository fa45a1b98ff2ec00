import numpy as np
import pytest

from denoising_markov.diffusion import (
    DiffusionError,
    GaussianMixture1D,
    GbmSpec,
    backward_diffusion_step,
    check_psd,
    diffusion_sm_loss,
    diffusion_sm_terms,
    gbm_backward_step,
    gbm_conditional,
    gbm_conditional_score,
    gbm_diffusion_fields,
    gbm_fields,
    gbm_log_density,
    isotropic_sm_loss,
    ou_conditional,
    ou_conditional_score,
    ou_fields,
)
from denoising_markov.datasets import energy_distance
from denoising_markov.finite_state import uniform_time_sampler

SPEC2 = GbmSpec(np.array([[0.8, 0.3], [-0.2, 0.6]]))


def central_gradient(fn, x, h=1e-6):
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        grad.flat[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return grad


# ---------------------------------------------------------------- OU


def test_ou_limit_is_standard_normal(rng):
    xt, score = ou_conditional(np.zeros((50_000, 1)), 60.0, rng)
    assert xt.mean() == pytest.approx(0.0, abs=0.02)
    assert xt.var() == pytest.approx(1.0, abs=0.03)
    np.testing.assert_allclose(score, -xt)


def test_ou_score_vanishes_at_conditional_mean():
    x0 = np.array([[1.5, -0.3]])
    assert np.abs(ou_conditional_score(x0, x0 * np.exp(-0.35), 0.7)).max() == 0.0


def test_ou_score_matches_finite_difference(rng):
    x0 = rng.normal(size=(1, 3))
    t = 0.6
    xt, score = ou_conditional(x0, t, rng)
    mean, var = x0[0] * np.exp(-t / 2), 1 - np.exp(-t)
    logpdf = lambda x: -0.5 * np.sum((x - mean) ** 2) / var
    np.testing.assert_allclose(score[0], central_gradient(logpdf, xt[0]), rtol=1e-5)


def test_ou_rejects_nonpositive_time(rng):
    with pytest.raises(DiffusionError):
        ou_conditional(np.zeros((1, 1)), 0.0, rng)


def test_gaussian_mixture_score_and_ou_marginal():
    gm = GaussianMixture1D((0.3, 0.7), (-1.0, 2.0), (0.5, 0.2))
    x = np.linspace(-3, 4, 9)

    def logpdf(v):
        w, m, s2 = gm.arrays()
        return np.log(np.sum(w * np.exp(-0.5 * (v - m) ** 2 / s2) / np.sqrt(2 * np.pi * s2)))

    for xi, si in zip(x, gm.score(x)):
        assert si == pytest.approx(central_gradient(logpdf, np.array([xi]))[0], rel=1e-5, abs=1e-7)
    late = gm.ou_marginal(50.0)
    np.testing.assert_allclose(late.variances, 1.0, atol=1e-12)
    np.testing.assert_allclose(late.means, 0.0, atol=1e-10)


# ---------------------------------------------------------------- GBM


def test_gbm_spec_validation():
    with pytest.raises(DiffusionError):
        GbmSpec(np.array([[1.0, 1.0], [1.0, 1.0]]))
    np.testing.assert_allclose(SPEC2.A @ SPEC2.A_inv, np.eye(2), atol=1e-12)


def test_gbm_score_at_zero_noise():
    spec = GbmSpec(np.array([[1.0]]))
    x0 = np.array([[1.7]])
    t = 0.9
    xt = x0 * np.exp(-t / 2)
    np.testing.assert_allclose(gbm_conditional_score(spec, x0, xt, t), -1.0 / xt)


def test_gbm_samples_positive(rng):
    xt, _ = gbm_conditional(SPEC2, np.full((20_000, 2), 0.5), 3.0, rng)
    assert (xt > 0).all()
    with pytest.raises(DiffusionError):
        gbm_conditional(SPEC2, np.array([[0.5, -0.1]]), 1.0, rng)


def test_gbm_score_matches_lognormal_density(rng):
    x0 = np.array([[1.2, 0.7]])
    t = 0.8
    xt, score = gbm_conditional(SPEC2, x0, t, rng)
    logpdf = lambda x: gbm_log_density(SPEC2, x0, x[None], t)[0]
    np.testing.assert_allclose(score[0], central_gradient(logpdf, xt[0], h=1e-6), rtol=1e-5)


def test_gbm_log_moments(rng):
    x0 = np.array([[1.3, 0.4]])
    t = 1.5
    n = 100_000
    xt, _ = gbm_conditional(SPEC2, np.repeat(x0, n, axis=0), t, rng)
    logs = np.log(xt)
    mean = np.log(x0[0]) - 0.5 * t * SPEC2.diag_A
    cov = t * SPEC2.A
    sem = np.sqrt(np.diag(cov) / n)
    assert (np.abs(logs.mean(axis=0) - mean) <= 3 * sem).all()
    emp = np.cov(logs.T)
    # standard error of a sample covariance entry
    se = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
    assert (np.abs(emp - cov) <= 3 * se).all()


def test_gbm_fields_one_dimensional():
    spec = GbmSpec(np.array([[0.7]]))
    x = np.array([[1.9]])
    D, factor, div = gbm_diffusion_fields(spec, x)
    assert D[0, 0, 0] == pytest.approx(0.49 * 1.9**2)
    assert div[0, 0] == pytest.approx(2 * 0.49 * 1.9)
    assert factor[0, 0, 0] == pytest.approx(0.7 * 1.9)


def test_gbm_fields_at_ones():
    D, factor, _ = gbm_diffusion_fields(SPEC2, np.ones((1, 2)))
    np.testing.assert_allclose(D[0], SPEC2.A)
    np.testing.assert_allclose(factor[0] @ factor[0].T, D[0], atol=1e-12)


def test_gbm_divergence_matches_finite_difference(rng):
    sigma = rng.normal(size=(2, 2)) + 2 * np.eye(2)
    spec = GbmSpec(sigma)
    x = rng.uniform(0.3, 2.0, size=2)
    _, _, div = gbm_diffusion_fields(spec, x[None])
    h = 1e-5
    expected = np.zeros(2)
    for i in range(2):
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            Dp = gbm_diffusion_fields(spec, (x + e)[None])[0][0]
            Dm = gbm_diffusion_fields(spec, (x - e)[None])[0][0]
            expected[i] += (Dp[i, j] - Dm[i, j]) / (2 * h)
    np.testing.assert_allclose(div[0], expected, rtol=1e-6)


# ---------------------------------------------------------------- loss


def gbm_conditional_provider(spec):
    return lambda x0, t, rng: gbm_conditional(spec, x0, t, rng)


def test_sm_loss_zero_at_conditional_score(rng):
    spec = GbmSpec(np.array([[1.0]]))
    data = np.abs(rng.normal(2, 0.5, size=100))[:, None]
    fixed = {}

    def conditional(x0, t, r):
        xt, score = gbm_conditional(spec, x0, t, r)
        fixed["score"] = score
        return xt, score

    loss = diffusion_sm_loss(gbm_fields(spec), lambda t, x: fixed["score"], conditional, data,
                             uniform_time_sampler(1e-3, 2.0), 64, rng)
    assert loss == 0.0


def test_identity_diffusion_reduces_to_isotropic_loss(rng):
    s_hat = rng.normal(size=(200, 3))
    target = rng.normal(size=(200, 3))
    D = np.broadcast_to(np.eye(3), (200, 3, 3))
    general = diffusion_sm_terms(s_hat, target, D).data.mean()
    assert general == pytest.approx(isotropic_sm_loss(s_hat, target), rel=1e-13)


def test_sm_terms_nonnegative(rng):
    D, _, _ = gbm_diffusion_fields(SPEC2, rng.uniform(0.01, 5, size=(500, 2)))
    terms = diffusion_sm_terms(rng.normal(size=(500, 2)) * 10, rng.normal(size=(500, 2)), D).data
    assert (terms >= 0).all()


def test_constant_offset_loss_is_half_c2_mean_D(rng):
    spec = GbmSpec(np.array([[0.9]]))
    c = 0.4
    data = np.abs(rng.normal(2, 0.5, size=200))[:, None]
    n = 40_000
    state = {}

    def conditional(x0, t, r):
        xt, score = gbm_conditional(spec, x0, t, r)
        state["score"], state["xt"] = score, xt
        return xt, score

    loss = diffusion_sm_loss(gbm_fields(spec), lambda t, x: state["score"] + c, conditional, data,
                             uniform_time_sampler(1e-3, 1.0), n, np.random.default_rng(3))
    d_values = 0.81 * state["xt"][:, 0] ** 2
    expected = 0.5 * c**2 * d_values
    assert abs(loss - expected.mean()) <= 3 * expected.std() / np.sqrt(n) + 1e-12
    # independent draw of E[D] with a fresh stream
    r2 = np.random.default_rng(4)
    x0 = data[r2.integers(0, len(data), size=n)]
    xt, _ = gbm_conditional(spec, x0, r2.uniform(1e-3, 1.0, size=n), r2)
    direct = 0.5 * c**2 * 0.81 * xt[:, 0] ** 2
    spread = np.sqrt(expected.var() / n + direct.var() / n)
    assert abs(loss - direct.mean()) <= 3 * spread


def test_check_psd_rejects_indefinite():
    with pytest.raises(DiffusionError):
        check_psd(np.array([[[1.0, 0.0], [0.0, -1.0]]]))


# ---------------------------------------------------------------- steppers


def test_step_without_dynamics_is_identity(rng):
    y = rng.normal(size=(5, 2))

    def still(x):
        n, d = x.shape
        return np.zeros((n, d)), np.zeros((n, d, d)), np.zeros((n, d, d)), np.zeros((n, d))

    out = backward_diffusion_step(y, 0.5, 0.1, still, lambda t, x: np.zeros_like(x), rng)
    np.testing.assert_array_equal(out, y)


def test_ou_step_preserves_stationary_mean(rng):
    y = rng.normal(size=(100_000, 1))
    out = backward_diffusion_step(y, 1.0, 0.05, ou_fields, lambda t, x: -x, rng)
    assert abs(out.mean()) <= 3 * out.std() / np.sqrt(len(out))


def test_gbm_step_matches_linear_step_for_small_kappa(rng):
    spec = GbmSpec(np.array([[0.5]]))
    y = np.full((200_000, 1), 1.3)
    score = lambda t, x: -1.0 / x
    kappa = 1e-3
    log_step = gbm_backward_step(spec, y, 1.0, kappa, score, np.random.default_rng(8))
    lin_step = backward_diffusion_step(y, 1.0, kappa, gbm_fields(spec), score, np.random.default_rng(8))
    # drift of the backward SDE: D s + div D = 0.25 y^2 (-1/y) + 0.5 y
    drift = (log_step.mean() - 1.3) / kappa
    assert drift == pytest.approx(0.25 * 1.3, abs=4 * 0.5 * 1.3 / np.sqrt(kappa * 200_000))
    assert np.abs(log_step - lin_step).max() < 5e-3
    assert (log_step > 0).all()


def test_ou_backward_recovers_mixture():
    gm = GaussianMixture1D((0.4, 0.6), (-2.0, 1.5), (0.3, 0.5))
    T, kappa, n = 5.0, 0.01, 10_000
    rng = np.random.default_rng(9)
    y = rng.normal(size=(n, 1))
    for step in range(int(round(T / kappa))):
        t = T - step * kappa
        y = backward_diffusion_step(y, t, kappa, ou_fields, lambda t, x: gm.ou_marginal(t).score(x), rng)
    target = gm.sample(n, np.random.default_rng(10))
    assert energy_distance(y[:, 0], target) < 0.01
