"""Oracle suites behind ``dmm verify``.

Each suite returns a list of :class:`Check` records; a suite passes when
every check does. Instances are drawn from a seeded generator, so reports
are reproducible.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import value_and_grad
from .diffusion import GbmSpec, diffusion_sm_terms, gbm_conditional
from .finite_state import (
    MarginalPath,
    backward_family,
    discrete_sm_terms,
    evolve_density,
    exact_path_kl,
    kl_divergence,
)
from .generator import (
    DensityVector,
    RateMatrix,
    ScoreTable,
    apply_adjoint,
    apply_generator,
    backward_rate_matrix,
    constant_family,
)
from .jump import (
    ConvolutionField,
    TorusJumpSpec,
    draw_jump_batch,
    jump_batch_terms,
    reference_reuse_J,
    riemann_intensity,
)
from .nn import Mlp


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def _check(name, value, tolerance):
    value = float(value)
    return Check(name, value, tolerance, bool(value <= tolerance))


def _random_instance(rng, n):
    off = rng.uniform(0.1, 1.0, size=(n, n)) * (rng.random((n, n)) < 0.8)
    p0 = rng.uniform(0.05, 1.0, size=n)
    return RateMatrix.from_off_diagonal(off), DensityVector(p0 / p0.sum())


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


def reversal_suite(rng, instances=50):
    """Backward-chain identity and exact reversal of marginals on random chains."""
    identity_err, reversal_err = 0.0, 0.0
    for _ in range(instances):
        n = int(rng.integers(3, 6))
        rm, p0 = _random_instance(rng, n)
        T = float(rng.uniform(0.3, 1.5))
        family = constant_family(rm)
        path = MarginalPath(family, p0, T)
        t = float(rng.uniform(0, T))
        p, f = path.at(t), rng.normal(size=n)
        back = backward_rate_matrix(rm, path.score(t))
        lhs = p * apply_generator(back, f)
        rhs = apply_adjoint(rm, p * f) - f * apply_adjoint(rm, p)
        identity_err = max(identity_err, np.abs(lhs - rhs).max())
        reverse = backward_family(family, path.score, T)
        for tau in (0.25 * T, 0.5 * T, T):
            q = evolve_density(reverse, DensityVector(path.at(T)), tau).values
            reversal_err = max(reversal_err, np.abs(q - path.at(T - tau)).max())
    return [
        _check("backward generator identity", identity_err, 1e-10),
        _check("reversed marginals max-abs error", reversal_err, 1e-6),
    ]


def bound_suite(rng, instances=100):
    """``KL(p_0 || q_T) <= KL(p_T || q_0) + path KL`` with random positive scores."""
    worst = -np.inf
    for _ in range(instances):
        n = int(rng.integers(3, 6))
        rm, p0 = _random_instance(rng, n)
        T = float(rng.uniform(0.3, 1.5))
        family = constant_family(rm)
        table = np.exp(rng.normal(scale=0.7, size=(n, n)))
        np.fill_diagonal(table, 1.0)
        s_hat = ScoreTable(table)
        path = MarginalPath(family, p0, T)
        path_kl = exact_path_kl(family, None, lambda t: s_hat, p0, T, marginals=path)
        q0 = rng.uniform(0.05, 1.0, size=n)
        q0 /= q0.sum()
        qT = evolve_density(backward_family(family, lambda t: s_hat, T), DensityVector(q0), T).values
        slack = kl_divergence(p0.values, qT) - kl_divergence(path.at(T), q0) - path_kl
        worst = max(worst, slack)
    return [_check("error bound violation", worst, 1e-8)]


def quadrature_suite(rng, potentials=20, spec=None):
    """FFT intensity against brute-force Riemann sums; reference reuse on the grid."""
    spec = spec or TorusJumpSpec()
    pts = spec.grid_points()
    fft_err, reuse_err = 0.0, 0.0
    for _ in range(potentials):
        g = rng.normal(scale=0.7, size=len(pts))
        field = ConvolutionField(spec, g, version=0)
        idx = rng.integers(0, len(pts), size=16)
        brute = riemann_intensity(spec, g, pts[idx], g[idx])
        fft_err = max(fft_err, np.abs(field.grid_intensity(g)[idx] / brute - 1).max())
        ref = int(rng.integers(0, len(pts)))
        J_ref = field.grid_intensity(g)[ref]
        reused = reference_reuse_J(field, pts[ref], J_ref, g[ref], pts[idx], g[idx], 0)
        reuse_err = max(reuse_err, np.abs(reused / field.grid_intensity(g)[idx] - 1).max())
    return [
        _check("FFT vs Riemann max relative error", fft_err, 1e-6),
        _check("reference reuse max relative error", reuse_err, 1e-12),
    ]


def _fd_check(loss, params, h=1e-6):
    """Largest per-coordinate relative gap between reverse mode and central differences."""
    _, grad = value_and_grad(loss, params)
    worst = 0.0
    scale = np.abs(grad).max()
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        fd = (loss(params + e).item() - loss(params - e).item()) / (2 * h)
        worst = max(worst, abs(fd - grad[i]) / max(abs(fd), 1e-3 * scale, 1e-12))
    return worst


def mini_loss_closures(rng):
    """One closure per implemented loss, each over a mini-net with about 20 parameters."""
    closures = {}

    # diffusion loss with a full diffusion matrix
    net = Mlp((3, 4, 2))
    x, t = rng.normal(size=(32, 2)), rng.uniform(0.1, 1.0, 32)
    target = rng.normal(size=(32, 2))
    L = rng.normal(size=(32, 2, 2))
    D = L @ L.transpose(0, 2, 1)
    feats = np.column_stack([x, t])
    closures["diffusion"] = (lambda p: diffusion_sm_terms(net.forward(p, feats), target, D).mean(), net)

    # GBM loss in scaled form
    spec = GbmSpec([[0.7]])
    x0 = rng.uniform(0.5, 3.0, size=(32, 1))
    tg = rng.uniform(0.05, 1.0, 32)
    xt, score = gbm_conditional(spec, x0, tg, rng)
    feats_g = np.column_stack([np.log(xt), tg])
    A = np.broadcast_to(spec.A, (32, 1, 1))
    net_g = Mlp((2, 5, 1))
    closures["gbm"] = (lambda p: diffusion_sm_terms(net_g.forward(p, feats_g), xt * score, A).mean(), net_g)

    # discrete loss on three states
    net_d = Mlp((2, 3, 3))
    idx = rng.integers(0, 3, size=32)
    feats_d = np.column_stack([idx / 2.0, rng.uniform(0.1, 1.0, 32)])
    ratios = rng.uniform(0.2, 2.0, size=(32, 3))
    lam = rng.uniform(0.1, 1.0, size=(32, 3))
    lam[np.arange(32), idx] = 0.0
    closures["discrete"] = (lambda p: discrete_sm_terms(net_d.forward(p, feats_d), ratios, lam).mean(), net_d)

    # torus jump loss through a scalar potential
    tspec = TorusJumpSpec()
    draw = draw_jump_batch(tspec, rng.random((20, 2)), lambda n, r: r.uniform(0.05, 1.0, n), 16, 3, rng)
    net_j = Mlp((3, 4, 1))

    def jump_loss(p):
        pot = lambda tt, xx: net_j.forward(p, np.column_stack([np.cos(2 * np.pi * xx), tt])).reshape(-1)
        return jump_batch_terms(tspec, pot, draw).mean()

    closures["jump"] = (jump_loss, net_j)
    return closures


def gradient_suite(rng):
    checks = []
    for name, (loss, net) in mini_loss_closures(rng).items():
        params = net.init(rng) + 0.1 * rng.normal(size=net.n_params)
        checks.append(_check(f"{name} loss gradient ({net.n_params} parameters)", _fd_check(loss, params), 1e-4))
    return checks


SUITES = {
    "reversal": reversal_suite,
    "bound": bound_suite,
    "quadrature": quadrature_suite,
    "gradients": gradient_suite,
}


def run_suite(name, seed=0):
    """Run one suite (or ``"all"``) and return a JSON-ready report."""
    names = list(SUITES) if name == "all" else [name]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite {unknown[0]!r}; choose from {sorted(SUITES)} or 'all'")
    rng = np.random.default_rng(seed)
    checks = [c for n in names for c in SUITES[n](rng)]
    return {
        "suite": name,
        "seed": seed,
        "passed": all(c.passed for c in checks),
        "checks": [c.to_dict() for c in checks],
    }
