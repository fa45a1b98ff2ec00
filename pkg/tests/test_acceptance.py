"""End-to-end acceptance checks, one per criterion.

Each test prints a ``PASS`` or ``FAIL`` line with the measured value and its
threshold before asserting; the lines are repeated in the terminal summary.
The two training experiments are marked ``slow``; deselect them with
``-m "not slow"``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from denoising_markov import cli
from denoising_markov.datasets import TargetSpec, energy_distance, histogram_tv, histogram_tv_to_law, sample_target
from denoising_markov.diffusion import (
    GbmSpec,
    backward_diffusion_step,
    diffusion_sm_terms,
    gbm_conditional,
    ou_conditional,
    ou_fields,
)
from denoising_markov.finite_state import (
    DiscreteSpace,
    MarginalPath,
    discrete_sm_terms,
    exact_path_kl,
    mc_path_kl,
)
from denoising_markov.generator import DensityVector, RateMatrix, ScoreTable, apply_generator, constant_family
from denoising_markov.generator import kl_integrand_table
from denoising_markov.jump import TorusJumpSpec, forward_jump_sample, jump_sm_terms
from denoising_markov.training import (
    FiniteStateEngine,
    GbmEngine,
    JumpEngine,
    TimeGrid,
    TrainConfig,
    infer,
    train,
)
from denoising_markov.verification import bound_suite, gradient_suite, quadrature_suite, reversal_suite

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    print("\n" + line)
    ACCEPTANCE_LINES.append(line)
    return ok


def check_values(checks):
    return {c.name: c for c in checks}


# ---------------------------------------------------------------------------
# 1. time reversal on finite chains
# ---------------------------------------------------------------------------


def test_01_finite_state_time_reversal():
    start = time.perf_counter()
    checks = check_values(reversal_suite(np.random.default_rng(1), instances=50))
    elapsed = time.perf_counter() - start
    err = checks["reversed marginals max-abs error"].value
    ok = err <= 1e-6 and elapsed < 10.0
    assert verdict(1, ok, f"max-abs reversal error {err:.2e} (<= 1e-6) in {elapsed:.1f} s (< 10 s)")


# ---------------------------------------------------------------------------
# 2. path KL: quadrature, Monte Carlo paths and the generator form
# ---------------------------------------------------------------------------


def generator_form_integrand(rm, p, log_phi):
    """``eta L eta^{-1} + L log eta`` with ``eta = phi / p``, weighted by ``p``."""
    eta = np.exp(log_phi) / p
    return p @ (eta * apply_generator(rm, 1.0 / eta) + apply_generator(rm, np.log(eta)))


def test_02_change_of_measure_identity():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    n, T = 4, 1.0
    off = rng.uniform(0.2, 1.0, size=(n, n))
    rm = RateMatrix.from_off_diagonal(off)
    family = constant_family(rm)
    p0 = DensityVector(rng.dirichlet(np.full(n, 2.0)))
    a, b = rng.normal(scale=0.6, size=n), rng.normal(scale=0.6, size=n)
    log_phi = lambda t: a + t * b
    s_hat = lambda t: ScoreTable.from_potential(log_phi(t))
    marg = MarginalPath(family, p0, T)

    quad = exact_path_kl(family, None, s_hat, p0, T, rtol=1e-13, marginals=marg)
    mean, sem = mc_path_kl(family, None, s_hat, p0, T, 100_000, np.random.default_rng(20), marginals=marg)
    nodes, weights = np.polynomial.legendre.leggauss(256)
    ts = 0.5 * T * (nodes + 1)
    gen = 0.5 * T * sum(w * generator_form_integrand(rm, marg.at(t), log_phi(t)) for w, t in zip(weights, ts))
    elapsed = time.perf_counter() - start

    z = abs(mean - quad) / sem
    ok = z <= 3.0 and abs(gen - quad) <= 1e-10 and elapsed < 60.0
    detail = (
        f"quadrature {quad:.10f}, Monte Carlo {mean:.6f} +- {sem:.1e} ({z:.2f} sigma, <= 3), "
        f"generator form gap {abs(gen - quad):.1e} (<= 1e-10), {elapsed:.1f} s (< 60 s)"
    )
    assert verdict(2, ok, detail)


# ---------------------------------------------------------------------------
# 3. KL error bound
# ---------------------------------------------------------------------------


def test_03_error_bound():
    start = time.perf_counter()
    worst = bound_suite(np.random.default_rng(3), instances=100)[0].value
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-8 and elapsed < 60.0
    assert verdict(3, ok, f"largest bound violation {worst:.2e} (<= 1e-8) over 100 instances in {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 4. loss integrands: nonnegative, zero at the true score
# ---------------------------------------------------------------------------


def loss_parts(rng):
    """``(random-estimate part, true-score part)`` per loss, on sampled points."""
    parts = {}
    B = 512

    # quadratic diffusion losses: OU (identity) and GBM (anisotropic)
    x0, t = rng.normal(size=(B, 2)), rng.uniform(1e-3, 2.0, B)
    _, target = ou_conditional(x0, t, rng)
    eye = np.broadcast_to(np.eye(2), (B, 2, 2))
    parts["ou quadratic"] = (
        diffusion_sm_terms(target + rng.normal(size=(B, 2)), target, eye).data,
        diffusion_sm_terms(target, target, eye).data,
    )
    spec = GbmSpec([[0.8, 0.0], [0.3, 0.5]])
    xt, score = gbm_conditional(spec, rng.uniform(0.2, 3.0, (B, 2)), t, rng)
    D = np.einsum("ni,ij,nj->nij", xt, spec.A, xt)
    parts["gbm quadratic"] = (
        diffusion_sm_terms(score + rng.normal(size=(B, 2)), score, D).data,
        diffusion_sm_terms(score, score, D).data,
    )

    # finite-state loss, Bregman part: loss(s_hat) - loss(conditional ratio)
    engine = FiniteStateEngine(DiscreteSpace(2, 3), lambda n, r: r.integers(0, 9, n), T=2.0)
    batch = engine.sample_batch(B, lambda n, r: r.uniform(1e-3, 2.0, n), rng)
    ratios, lam = batch.extra["ratios"], batch.extra["lam"]
    log_r = np.log(np.where(lam > 0, ratios, 1.0))
    base = discrete_sm_terms(log_r, ratios, lam).data
    parts["finite-state bregman"] = (
        discrete_sm_terms(log_r + rng.normal(size=log_r.shape), ratios, lam).data - base,
        discrete_sm_terms(log_r, ratios, lam).data - base,
    )

    # path-KL integrand on random chains
    rand_tab, zero_tab = [], []
    for _ in range(50):
        n = int(rng.integers(3, 6))
        rm = RateMatrix.from_off_diagonal(rng.uniform(0.1, 1.0, (n, n)) * (rng.random((n, n)) < 0.7))
        s = ScoreTable.from_density(rng.dirichlet(np.ones(n)))
        noisy = np.exp(rng.normal(size=(n, n)))
        np.fill_diagonal(noisy, 1.0)
        rand_tab.append(kl_integrand_table(rm, s, ScoreTable(noisy)))
        zero_tab.append(kl_integrand_table(rm, s, s))
    parts["path-KL integrand"] = (np.concatenate(rand_tab), np.concatenate(zero_tab))

    # torus jump loss, Bregman part: a - b log a minus its minimum b - b log b
    jspec = TorusJumpSpec()
    jengine = JumpEngine(jspec, lambda n, r: sample_target(TargetSpec("moons"), n, r), T=4.0)
    draw = jengine.sample_batch(B, lambda n, r: r.uniform(0.01, 4.0, n), rng).extra["draw"]
    b = draw.ratios
    log_b = np.log(np.maximum(b, 1e-300))
    floor = jump_sm_terms(log_b, b, jspec.rate).data
    parts["jump bregman"] = (
        jump_sm_terms(log_b + rng.normal(size=b.shape), b, jspec.rate).data - floor,
        jump_sm_terms(log_b, b, jspec.rate).data - floor,
    )
    return parts


def test_04_loss_nonnegativity_and_minimizer():
    parts = loss_parts(np.random.default_rng(4))
    lines, ok = [], True
    for name, (random_part, true_part) in parts.items():
        lowest, highest_true = float(random_part.min()), float(np.abs(true_part).max())
        good = lowest >= -1e-12 and highest_true < 1e-10
        ok &= good
        lines.append(f"{name}: min {lowest:.2e} (>= 0), at true score {highest_true:.1e} (< 1e-10)")
    assert verdict(4, ok, "; ".join(lines))


# ---------------------------------------------------------------------------
# 5. reverse-mode gradients
# ---------------------------------------------------------------------------


def test_05_gradients_match_finite_differences():
    start = time.perf_counter()
    checks = gradient_suite(np.random.default_rng(5))
    elapsed = time.perf_counter() - start
    worst = max(c.value for c in checks)
    ok = all(c.passed for c in checks) and elapsed < 30.0
    names = ", ".join(f"{c.name} {c.value:.1e}" for c in checks)
    assert verdict(5, ok, f"{names}; worst {worst:.1e} (<= 1e-4) in {elapsed:.1f} s (< 30 s)")


# ---------------------------------------------------------------------------
# 6. weak order of the backward Euler-Maruyama sampler
# ---------------------------------------------------------------------------


def test_06_euler_maruyama_weak_order():
    # Gaussian data keeps the score closed-form; sampling starts from the exact p_T,
    # so the only error left is discretization
    mu, var, T, n = 2.0, 0.25, 2.0, 1_000_000

    def marginal(t):
        decay = np.exp(-t)
        return mu * np.sqrt(decay), var * decay + 1.0 - decay

    def score(t, x):
        m, v = marginal(t)
        return -(x - m) / v

    kappas = np.array([0.1, 0.05, 0.025])
    errors = []
    for kappa in kappas:
        rng = np.random.default_rng(6)
        m, v = marginal(T)
        y = m + np.sqrt(v) * rng.normal(size=(n, 1))
        for step in range(int(round(T / kappa))):
            y = backward_diffusion_step(y, T - step * kappa, kappa, ou_fields, score, rng)
        errors.append(abs(y.var() - var))
    slope = np.polyfit(np.log(kappas), np.log(errors), 1)[0]
    ok = abs(slope - 1.0) <= 0.3
    detail = f"variance errors {', '.join(f'{e:.4f}' for e in errors)}; slope {slope:.3f} (1 +- 0.3)"
    assert verdict(6, ok, detail)


# ---------------------------------------------------------------------------
# 7. GBM on the absolute-value Gaussian mixture
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_07_gbm_mixture_experiment():
    start = time.perf_counter()
    target = TargetSpec("gmm1d-abs")
    data = sample_target(target, 100_000, np.random.default_rng(0))[:, None]
    engine = GbmEngine(GbmSpec(np.eye(1)), data, T=4.0)
    config = TrainConfig(epochs=5000, batch=1024, T=4.0, t_min=1e-3, time_dist="uniform", seed=3)
    model, _ = train(config, engine)
    grid = TimeGrid.from_step(4.0, 0.01)
    out = infer(grid, engine, engine.score(model), n=10_000, rng=np.random.default_rng(7), record=[grid.steps])
    y = out.states[-1][:, 0]
    elapsed = time.perf_counter() - start
    ed = energy_distance(y, sample_target(target, 10_000, np.random.default_rng(99)))
    positive = float((y > 0).mean())
    ok = ed <= 0.03 and positive == 1.0 and elapsed <= 900.0
    detail = f"energy distance {ed:.4f} (<= 0.03), positivity {positive:.2%} (100%), {elapsed:.0f} s (<= 900 s)"
    assert verdict(7, ok, detail)


# ---------------------------------------------------------------------------
# 8. torus jumps on moons
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_08_torus_jump_moons_experiment():
    start = time.perf_counter()
    cfg = cli.load_config(CONFIGS / "jump_moons.json")
    engine = cli.build_engine(cfg)
    model, _ = train(TrainConfig(**cfg["train"]), engine)
    grid = cli.make_grid(cfg)
    out = infer(grid, engine, engine.score(model), n=2048, rng=np.random.default_rng(7), record=[grid.steps])
    elapsed = time.perf_counter() - start
    target = TargetSpec("moons")
    reference = sample_target(target, 1_000_000, np.random.default_rng(99))
    tv = histogram_tv(out.states[-1], reference)

    # forward marginal at T against the uniform law; 10^6 samples keep the histogram floor near 0.013
    rng = np.random.default_rng(8)
    xT = forward_jump_sample(engine.spec, sample_target(target, 1_000_000, rng), grid.T, rng)
    tv_forward = histogram_tv_to_law(xT, np.full((32, 32), 1.0 / 1024))

    ok = tv <= 0.15 and tv_forward <= 0.05 and elapsed <= 1800.0
    detail = (
        f"backward TV {tv:.4f} (<= 0.15, 2048 samples, 32x32 bins), "
        f"forward TV at T {tv_forward:.4f} (<= 0.05), {elapsed:.0f} s (<= 1800 s)"
    )
    assert verdict(8, ok, detail)


# ---------------------------------------------------------------------------
# 9. FFT quadrature of the backward intensity
# ---------------------------------------------------------------------------


def test_09_fft_quadrature():
    checks = check_values(quadrature_suite(np.random.default_rng(9), potentials=20))
    fft = checks["FFT vs Riemann max relative error"].value
    reuse = checks["reference reuse max relative error"].value
    ok = fft <= 1e-6 and reuse <= 1e-12
    assert verdict(9, ok, f"FFT vs Riemann {fft:.1e} (<= 1e-6), reference reuse {reuse:.1e} (<= 1e-12)")


# ---------------------------------------------------------------------------
# 10. byte-identical reruns through the command line
# ---------------------------------------------------------------------------


def short_config(tmp_path, name, epochs, n):
    cfg = json.loads((CONFIGS / f"{name}.json").read_text())
    cfg["train"].update(epochs=epochs, batch=32, hidden=16, layers=2, checkpoint_every=max(1, epochs // 2))
    cfg["output"] = {"n": n}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.mark.parametrize(
    "name, epochs, n, steps",
    [("finite_demo", 30, 64, 20), ("masked_demo", 30, 64, 20), ("ou_gmm1d", 30, 64, 20),
     ("gbm_gmm1d", 30, 64, 20), ("jump_moons", 10, 32, 4)],
)
def test_10_reproducible_artifacts(tmp_path, name, epochs, n, steps):
    path = short_config(tmp_path, name, epochs, n)
    for run in ("a", "b"):
        assert cli.main(["train", "--config", str(path), "--seed", "17", "--out", str(tmp_path / run)]) == 0
        ckpt = str(tmp_path / run / "checkpoint.dmmk")
        argv = ["sample", "--checkpoint", ckpt, "--steps", str(steps), "--out", str(tmp_path / f"{run}s")]
        assert cli.main(argv) == 0
    same_loss = (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    same_samples = (tmp_path / "as" / "samples.csv").read_bytes() == (tmp_path / "bs" / "samples.csv").read_bytes()
    ok = same_loss and same_samples
    assert verdict(10, ok, f"{name}: loss CSV identical {same_loss}, sample CSV identical {same_samples}")
