"""Diffusion forward processes, conditional scores, the anisotropic
score-matching loss and Euler-Maruyama backward steps.

Two forward processes are covered: the Ornstein-Uhlenbeck process
``dx = -x/2 dt + dw`` and geometric Brownian motion ``dx = diag(x) Sigma dw``.
Backward steppers take the *forward* time at which the score is evaluated;
the caller maps backward time ``tau`` to ``T - tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class DiffusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck
# ---------------------------------------------------------------------------


def ou_conditional_score(x0, xt, t):
    """``-(x_t - x_0 e^{-t/2}) / (1 - e^{-t})``."""
    if np.any(np.asarray(t) <= 0):
        raise DiffusionError("t must be positive")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return -(np.asarray(xt) - np.asarray(x0) * np.exp(-t / 2)) / (-np.expm1(-t))


def ou_conditional(x0, t, rng):
    """Sample ``x_t | x_0`` and return it with the conditional score.

    ``x0`` has shape ``(n, d)``; ``t`` is a scalar or a length-``n`` array.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr <= 0):
        raise DiffusionError("t must be positive")
    tc = t_arr[:, None] if t_arr.ndim == 1 else t_arr
    xt = x0 * np.exp(-tc / 2) + np.sqrt(-np.expm1(-tc)) * rng.normal(size=x0.shape)
    return xt, ou_conditional_score(x0, xt, t_arr)


def ou_fields(x):
    """``(b, D, factor, div D)`` of the OU process at states ``x`` of shape ``(n, d)``."""
    x = np.atleast_2d(x)
    n, d = x.shape
    eye = np.broadcast_to(np.eye(d), (n, d, d))
    return -0.5 * x, eye, eye, np.zeros_like(x)


@dataclass(frozen=True)
class GaussianMixture1D:
    """Weights, means and variances of a one-dimensional Gaussian mixture."""

    weights: tuple
    means: tuple
    variances: tuple

    def arrays(self):
        return (np.asarray(self.weights, float), np.asarray(self.means, float), np.asarray(self.variances, float))

    def sample(self, n, rng):
        w, m, v = self.arrays()
        comp = rng.choice(w.size, size=n, p=w / w.sum())
        return m[comp] + np.sqrt(v[comp]) * rng.normal(size=n)

    def ou_marginal(self, t):
        """The OU marginal at time ``t`` is again a Gaussian mixture."""
        w, m, v = self.arrays()
        decay = np.exp(-t)
        return GaussianMixture1D(tuple(w), tuple(m * np.sqrt(decay)), tuple(v * decay + 1 - decay))

    def score(self, x):
        w, m, v = self.arrays()
        x = np.asarray(x, dtype=np.float64)[..., None]
        logs = np.log(w) - 0.5 * np.log(2 * np.pi * v) - 0.5 * (x - m) ** 2 / v
        resp = np.exp(logs - logs.max(axis=-1, keepdims=True))
        resp /= resp.sum(axis=-1, keepdims=True)
        return (resp * (-(x - m) / v)).sum(axis=-1)


# ---------------------------------------------------------------------------
# geometric Brownian motion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GbmSpec:
    """``dx = diag(x) Sigma dw``; ``A = Sigma Sigma^T``."""

    sigma: np.ndarray
    A: np.ndarray = field(init=False, repr=False)
    A_inv: np.ndarray = field(init=False, repr=False)
    diag_A: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sigma = np.atleast_2d(np.array(self.sigma, dtype=np.float64))
        if sigma.shape[0] != sigma.shape[1]:
            raise DiffusionError("volatility matrix must be square")
        A = sigma @ sigma.T
        eig = np.linalg.eigvalsh(A)
        if eig.min() <= 1e-12 * eig.max():
            raise DiffusionError("Sigma Sigma^T must be positive definite")
        A_inv = np.linalg.inv(A)
        if np.abs(A @ A_inv - np.eye(len(A))).max() > 1e-10:
            raise DiffusionError("volatility matrix is too ill-conditioned")
        for name, value in [("sigma", sigma), ("A", A), ("A_inv", A_inv), ("diag_A", np.diag(A).copy())]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def dim(self):
        return self.sigma.shape[0]


def _positive(x, name="x"):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not (x > 0).all():
        raise DiffusionError(f"{name} must be strictly positive")
    return x


def gbm_conditional_score(spec: GbmSpec, x0, xt, t):
    """``-x_t^{-1} (1 + (1/t) A^{-1}(log x_t - log x_0 + (t/2) diag A))``."""
    x0 = _positive(x0, "x0")
    xt = _positive(xt, "xt")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise DiffusionError("t must be positive")
    tc = t[:, None] if t.ndim == 1 else t
    u = np.log(xt) - np.log(x0) + 0.5 * tc * spec.diag_A
    return -(1.0 + (u @ spec.A_inv.T) / tc) / xt


def gbm_conditional(spec: GbmSpec, x0, t, rng):
    """Exact draw ``x_0 exp(Sigma w_t - diag(A) t / 2)`` and its conditional score."""
    x0 = _positive(x0, "x0")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise DiffusionError("t must be positive")
    tc = t[:, None] if t.ndim == 1 else t
    w = np.sqrt(tc) * rng.normal(size=x0.shape)
    xt = x0 * np.exp(w @ spec.sigma.T - 0.5 * spec.diag_A * tc)
    return xt, gbm_conditional_score(spec, x0, xt, t)


def gbm_log_density(spec: GbmSpec, x0, xt, t):
    """Log of the lognormal conditional density ``p_{t|0}(x_t | x_0)``."""
    x0 = _positive(x0, "x0")
    xt = _positive(xt, "xt")
    u = np.log(xt) - np.log(x0) + 0.5 * t * spec.diag_A
    quad = np.einsum("ni,ij,nj->n", u, spec.A_inv, u) / t
    _, logdet = np.linalg.slogdet(2 * np.pi * t * spec.A)
    return -np.log(xt).sum(axis=1) - 0.5 * quad - 0.5 * logdet


def gbm_diffusion_fields(spec: GbmSpec, x):
    """``D = diag(x) A diag(x)``, factor ``diag(x) Sigma`` and ``(div D)_i = x_i (A_ii + sum_j A_ij)``."""
    x = _positive(x)
    D = x[:, :, None] * spec.A[None] * x[:, None, :]
    factor = x[:, :, None] * spec.sigma[None]
    div = x * (spec.diag_A + spec.A.sum(axis=1))
    return D, factor, div


def gbm_fields(spec):
    """Field provider with the same signature as :func:`ou_fields` (zero drift)."""

    def fields(x):
        D, factor, div = gbm_diffusion_fields(spec, x)
        return np.zeros_like(np.atleast_2d(x)), D, factor, div

    return fields


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def check_psd(D, tol=1e-10):
    """Raise if any matrix in the batch has a clearly negative eigenvalue."""
    eig = np.linalg.eigvalsh(D)
    scale = np.maximum(1.0, np.abs(eig).max(axis=-1))
    if (eig.min(axis=-1) < -tol * scale).any():
        raise DiffusionError("diffusion matrix is not positive semidefinite at a sampled point")


def diffusion_sm_terms(s_hat, target, D):
    """Per-sample ``1/2 (s_hat - target)^T D (s_hat - target)``; returns a tensor."""
    s_hat = s_hat if isinstance(s_hat, Tensor) else Tensor(s_hat)
    diff = s_hat - np.asarray(target, dtype=np.float64)
    n, d = diff.shape
    D_diff = (diff.reshape(n, 1, d) * np.asarray(D)).sum(axis=2)
    return (diff * D_diff).sum(axis=1) * 0.5


def diffusion_sm_loss(fields, score_fn, conditional, dataset, time_sampler, batch, rng):
    """Monte Carlo estimate of the anisotropic score-matching objective.

    ``fields(x)`` returns ``(b, D, factor, div D)``; ``score_fn(t, x)`` the
    estimate ``s_hat``; ``conditional(x0, t, rng)`` a draw of ``x_t`` with its
    conditional score.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    x0 = data[rng.integers(0, len(data), size=batch)]
    t = time_sampler(batch, rng)
    xt, target = conditional(x0, t, rng)
    _, D, _, _ = fields(xt)
    check_psd(D)
    s_hat = np.asarray(score_fn(t, xt), dtype=np.float64)
    if not np.isfinite(s_hat).all():
        raise DiffusionError("score estimate is not finite")
    terms = diffusion_sm_terms(s_hat, target, D).data
    return float(terms.mean())


def isotropic_sm_loss(s_hat, target):
    """Mean of ``1/2 |s_hat - target|^2``, the identity-diffusion special case."""
    s_hat = np.asarray(s_hat, dtype=np.float64)
    return float(0.5 * np.mean(np.sum((s_hat - target) ** 2, axis=-1)))


# ---------------------------------------------------------------------------
# backward steppers
# ---------------------------------------------------------------------------


def backward_diffusion_step(y, t_forward, kappa, fields, score_fn, rng):
    """One Euler-Maruyama step of ``dy = (-b + D s_hat + div D) dt + Sigma dw``.

    Coefficients are frozen at ``t_forward``, the forward time matching the
    start of the backward step.
    """
    if kappa <= 0:
        raise DiffusionError("step must be positive")
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    b, D, factor, div = fields(y)
    s_hat = np.asarray(score_fn(t_forward, y), dtype=np.float64)
    drift = -b + np.einsum("nij,nj->ni", D, s_hat) + div
    noise = np.einsum("nij,nj->ni", factor, rng.normal(size=y.shape))
    return y + drift * kappa + np.sqrt(kappa) * noise


def gbm_backward_step_log(spec: GbmSpec, z, t_forward, kappa, scaled_score_fn, rng):
    """Backward GBM step in ``z = log y``.

    ``scaled_score_fn(t, z)`` returns ``y * s_hat`` (componentwise), which
    stays bounded near the origin where ``s_hat`` itself blows up. The drift
    ``A (y s_hat) + diag(A)/2 + A 1`` is the Ito image of the backward SDE.
    """
    if kappa <= 0:
        raise DiffusionError("step must be positive")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if not np.isfinite(z).all():
        raise DiffusionError("log-state is not finite")
    u = np.asarray(scaled_score_fn(t_forward, z), dtype=np.float64)
    drift = u @ spec.A.T + 0.5 * spec.diag_A + spec.A.sum(axis=1)
    noise = rng.normal(size=z.shape) @ spec.sigma.T
    return z + drift * kappa + np.sqrt(kappa) * noise


def gbm_backward_step(spec: GbmSpec, y, t_forward, kappa, score_fn, rng):
    """Positive-preserving backward step on ``y`` driven by a plain score ``s_hat(t, y)``."""
    y = _positive(y, "y")
    scaled = lambda t, z: np.exp(z) * np.asarray(score_fn(t, np.exp(z)))
    return np.exp(gbm_backward_step_log(spec, np.log(y), t_forward, kappa, scaled, rng))
