"""Pure-jump denoising on the unit torus ``[0, 1)^2``.

The forward process is compound Poisson: jumps arrive at total rate ``M``
and displacements are Gaussian with standard deviation ``sigma`` per axis,
wrapped onto the torus. The jump score is carried by a potential ``g``:
``s_hat(x, y) = exp(g(y) - g(x))``.

Conditional laws ``p_{t|0}(. | x0)`` have an atom of mass ``exp(-t M)`` at
``x0`` (no jump yet) plus an absolutely continuous part. Densities in this
module refer to that continuous part; the atom is carried separately.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import gammaln

from .autodiff import Tensor

log = logging.getLogger(__name__)


class JumpError(RuntimeError):
    pass


class StaleFieldError(JumpError):
    pass


@dataclass(frozen=True)
class TorusJumpSpec:
    sigma: float = 0.15
    rate: float = 3.0
    grid: int = 64
    modes: int = 32

    def __post_init__(self):
        if self.sigma <= 0 or self.rate <= 0:
            raise ValueError("sigma and rate must be positive")
        if self.grid < 4 or self.modes < 1 or 2 * self.modes > self.grid:
            raise ValueError("need 2 * modes <= grid")

    def kernel_hat(self, k1, k2):
        """Fourier coefficients ``M exp(-2 pi^2 sigma^2 |k|^2)`` of the wrapped kernel."""
        return self.rate * np.exp(-2 * np.pi**2 * self.sigma**2 * (np.square(k1) + np.square(k2)))

    def kernel(self, z):
        """Jump intensity ``lambda(z)`` at displacement ``z`` (shape ``(..., 2)``)."""
        z = np.asarray(z, dtype=np.float64)
        var = self.sigma**2
        return self.rate * wrapped_normal_pdf(z[..., 0], var) * wrapped_normal_pdf(z[..., 1], var)

    def grid_points(self):
        u = np.arange(self.grid) / self.grid
        return np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1).reshape(-1, 2)

    def frequencies(self):
        k = np.fft.fftfreq(self.grid, d=1.0 / self.grid)
        return np.meshgrid(k, k, indexing="ij")

    def active_modes(self, floor=1e-18):
        """Integer modes ``|k_i| <= K`` whose kernel coefficient exceeds ``floor * M``."""
        kmax = min(self.modes, int(np.ceil(np.sqrt(-np.log(floor) / (2 * np.pi**2 * self.sigma**2)))))
        k = np.arange(-kmax, kmax + 1)
        return np.meshgrid(k, k, indexing="ij")


def wrapped_normal_pdf(z, var):
    """Density of ``N(0, var)`` wrapped onto the unit circle, evaluated at ``z``.

    Image sums are used for narrow laws and the Fourier series for wide ones;
    both are truncated far below double precision.
    """
    z = np.mod(np.asarray(z, dtype=np.float64) + 0.5, 1.0) - 0.5
    var = np.broadcast_to(np.asarray(var, dtype=np.float64), z.shape)
    out = np.empty(z.shape)
    narrow = var <= 0.09
    if narrow.any():
        zn, vn = z[narrow], var[narrow]
        images = np.arange(-4, 5)[:, None]
        out[narrow] = np.exp(-((zn + images) ** 2) / (2 * vn)).sum(axis=0) / np.sqrt(2 * np.pi * vn)
    if (~narrow).any():
        zw, vw = z[~narrow], var[~narrow]
        k = np.arange(1, 13)[:, None]
        out[~narrow] = 1 + 2 * (np.exp(-2 * np.pi**2 * k**2 * vw) * np.cos(2 * np.pi * k * zw)).sum(axis=0)
    return out


# ---------------------------------------------------------------------------
# forward process and conditionals
# ---------------------------------------------------------------------------


def forward_jump_sample(spec: TorusJumpSpec, x0, t, rng, return_counts=False):
    """``x0 + sum of N_t Gaussian jumps (mod 1)``, ``N_t ~ Poisson(t M)``."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x0),))
    if (t < 0).any():
        raise ValueError("t must be nonnegative")
    counts = rng.poisson(t * spec.rate)
    xt = np.mod(x0 + spec.sigma * np.sqrt(counts)[:, None] * rng.normal(size=x0.shape), 1.0)
    xt = np.where(counts[:, None] == 0, x0, xt)
    return (xt, counts) if return_counts else xt


def _series_terms(tM):
    tM = np.max(tM)
    return int(max(6, np.ceil(tM + 12 * np.sqrt(tM) + 12)))


def _prepare(x0, x, t):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x0),))
    shape = (len(x0),) + (1,) * (x.ndim - 2)
    return x - x0.reshape(shape + (2,)), t, shape


def continuous_density_series(spec: TorusJumpSpec, x0, x, t):
    """Absolutely continuous part of ``p_{t|0}(x | x0)`` summed over jump counts.

    ``sum_{n >= 1} Pois(n; t M) * wrapped N(x - x0; 0, n sigma^2 I)``.
    ``x`` may carry extra leading axes relative to ``x0``; ``t`` broadcasts
    against ``x0``'s rows.
    """
    z, t, shape = _prepare(x0, x, t)
    tM = (t * spec.rate).reshape(shape)
    total = np.zeros(z.shape[:-1])
    with np.errstate(divide="ignore"):
        log_tM = np.log(tM)
    for n in range(1, _series_terms(tM) + 1):
        weight = np.exp(n * log_tM - tM - gammaln(n + 1))
        var = n * spec.sigma**2
        total += weight * wrapped_normal_pdf(z[..., 0], var) * wrapped_normal_pdf(z[..., 1], var)
    return total


def continuous_density(spec: TorusJumpSpec, x0, x, t):
    """Same quantity as :func:`continuous_density_series` from its Fourier series.

    Mode ``k`` carries ``e^{-tM}(e^{t lambda_hat(k)} - 1)``; modes whose kernel
    coefficient is below ``1e-18 M`` are dropped. The two-axis phase factors
    are separable, so each point costs two short vectors and one contraction.
    """
    z, t, shape = _prepare(x0, x, t)
    k1, k2 = spec.active_modes()
    k = k1[:, 0]
    coef = np.exp(-t * spec.rate)[:, None, None] * np.expm1(t[:, None, None] * spec.kernel_hat(k1, k2)[None])
    coef = coef.reshape(shape[:1] + (1,) * (len(shape) - 1) + coef.shape[1:])
    a = np.exp(2j * np.pi * z[..., 0, None] * k)
    b = np.exp(2j * np.pi * z[..., 1, None] * k)
    return np.real(np.einsum("...j,...jk,...k->...", a, coef, b))


class TorusConditional:
    """``p_{t|0}(. | x0)`` on the torus: an atom at ``x0`` plus a smooth density."""

    def __init__(self, spec: TorusJumpSpec, x0, t):
        if t < 0:
            raise ValueError("t must be nonnegative")
        self.spec = spec
        self.x0 = np.asarray(x0, dtype=np.float64).reshape(2)
        self.t = float(t)
        self.atom = float(np.exp(-t * spec.rate))
        self.is_delta = t == 0
        self.clamped_mass = 0.0

    def density(self, x):
        """Continuous part at arbitrary points ``x`` of shape ``(n, 2)``."""
        x = np.atleast_2d(x)
        return continuous_density_series(self.spec, self.x0[None], x[None], self.t)[0]

    def coefficients(self, k1, k2):
        """Fourier coefficients of the continuous part at integer modes."""
        t, M = self.t, self.spec.rate
        chi = np.exp(-t * M) * np.expm1(t * self.spec.kernel_hat(k1, k2))
        return chi * np.exp(-2j * np.pi * (k1 * self.x0[0] + k2 * self.x0[1]))

    def grid_density(self, clamp_tol=1e-8):
        """Continuous part on the ``N x N`` grid from its truncated Fourier series."""
        spec = self.spec
        if self.is_delta:
            return np.zeros((spec.grid, spec.grid))
        k1, k2 = spec.frequencies()
        keep = (np.abs(k1) <= spec.modes) & (np.abs(k2) <= spec.modes)
        coef = np.where(keep, self.coefficients(k1, k2), 0.0)
        values = np.real(np.fft.ifft2(coef)) * spec.grid**2
        negative = values < 0
        self.clamped_mass = float(-values[negative].sum() / spec.grid**2)
        if self.clamped_mass > clamp_tol:
            raise JumpError(f"Fourier ringing removed mass {self.clamped_mass:.2e}; raise modes or grid")
        return np.where(negative, 1e-300, values)

    def total_mass(self):
        return self.atom + self.grid_density().mean()


# ---------------------------------------------------------------------------
# score-matching loss
# ---------------------------------------------------------------------------


@dataclass
class JumpBatch:
    """One Monte Carlo batch for the jump score-matching loss.

    ``y[b, j] = xt[b] + xi[b, j]`` are draws from ``lambda(. - xt) / M`` and
    ``shifted[b, j] = x0[b] + xi[b, j]`` feed the atom correction.
    """

    x0: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    on_atom: np.ndarray
    y: np.ndarray
    shifted: np.ndarray
    ratios: np.ndarray
    atom_weight: np.ndarray


def _draw_x0(dataset, n, rng):
    if callable(dataset):
        return np.atleast_2d(dataset(n, rng))
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    return data[rng.integers(0, len(data), size=n)]


def draw_jump_batch(spec: TorusJumpSpec, dataset, time_sampler, batch, n_kernel, rng, max_retries=10):
    """Sample ``(x0, t, x_t)`` and kernel draws; compute conditional ratios.

    ``dataset`` is an array of points or a sampler ``(n, rng) -> points``.
    Ratios ``p(y | x0) / p(x_t | x0)`` use the continuous part; they are zero
    when ``x_t`` sits on the atom. Rows whose denominator underflows are
    redrawn.
    """
    x0 = _draw_x0(dataset, batch, rng)
    t = np.asarray(time_sampler(batch, rng), dtype=np.float64)
    xt, counts = forward_jump_sample(spec, x0, t, rng, return_counts=True)
    on_atom = counts == 0
    for _ in range(max_retries):
        denom = continuous_density(spec, x0, xt, t)
        bad = ~on_atom & ~(denom > 1e-300)
        if not bad.any():
            break
        log.warning("redrawing %d samples with vanishing conditional density", bad.sum())
        xt[bad], counts[bad] = forward_jump_sample(spec, x0[bad], t[bad], rng, return_counts=True)
        on_atom = counts == 0
    else:
        raise JumpError("conditional density underflow persisted after redraws")
    xi = spec.sigma * rng.normal(size=(batch, n_kernel, 2))
    y = np.mod(xt[:, None, :] + xi, 1.0)
    numer = continuous_density(spec, x0, y, t)
    ratios = np.where(on_atom[:, None], 0.0, numer / np.where(on_atom, 1.0, denom)[:, None])
    shifted = np.mod(x0[:, None, :] + xi, 1.0)
    return JumpBatch(x0, t, xt, on_atom, y, shifted, ratios, np.exp(-t * spec.rate))


def jump_sm_terms(log_s, ratios, rate):
    """Per-sample ``M * mean_j (s_j - r_j log s_j)``; ``log_s`` may be a tensor."""
    log_s = log_s if isinstance(log_s, Tensor) else Tensor(log_s)
    return (log_s.exp() - log_s * np.asarray(ratios)).mean(axis=1) * rate


def jump_atom_terms(g_x0, g_shifted, atom_weight, rate):
    """``-e^{-tM} M mean_j (g(x0) - g(x0 + xi_j))``: the atom's share of the cross term."""
    g_x0 = g_x0 if isinstance(g_x0, Tensor) else Tensor(g_x0)
    diff = g_x0.reshape(-1, 1) - g_shifted
    return diff.mean(axis=1) * (-rate * np.asarray(atom_weight))


def jump_batch_terms(spec, potential, batch: JumpBatch):
    """Per-sample loss for a potential ``(t, x) -> g`` returning arrays or tensors."""
    B, m, _ = batch.y.shape
    t_rep = np.repeat(batch.t, m)
    g_xt = potential(batch.t, batch.xt)
    g_y = potential(t_rep, batch.y.reshape(-1, 2))
    g_x0 = potential(batch.t, batch.x0)
    g_sh = potential(t_rep, batch.shifted.reshape(-1, 2))
    if not isinstance(g_y, Tensor):
        g_xt, g_y, g_x0, g_sh = (Tensor(np.asarray(v)) for v in (g_xt, g_y, g_x0, g_sh))
    log_s = g_y.reshape(B, m) - g_xt.reshape(B, 1)
    main = jump_sm_terms(log_s, batch.ratios, spec.rate)
    return main + jump_atom_terms(g_x0, g_sh.reshape(B, m), batch.atom_weight, spec.rate)


def jump_sm_loss(spec, potential, dataset, time_sampler, batch, n_kernel, rng):
    """Monte Carlo estimate of the jump score-matching objective for ``s_hat = exp(g(y) - g(x))``."""
    draw = draw_jump_batch(spec, dataset, time_sampler, batch, n_kernel, rng)
    return float(jump_batch_terms(spec, potential, draw).data.mean())


# ---------------------------------------------------------------------------
# backward intensity
# ---------------------------------------------------------------------------


class ConvolutionField:
    """``C(x) = int exp(g(y)) lambda(x - y) dy`` from potential values on the grid.

    The integral is the grid Riemann sum, evaluated on the grid by FFT and off
    the grid by its trigonometric interpolant (exact for the Riemann sum, up to
    kernel coefficients below ``1e-18 M``). Values are stored relative to
    ``exp(g_max)`` to avoid overflow.
    """

    def __init__(self, spec: TorusJumpSpec, g_grid, version=None):
        self.spec = spec
        N = spec.grid
        g_grid = np.asarray(g_grid, dtype=np.float64).reshape(N, N)
        self.version = version
        self.g_max = float(g_grid.max())
        weights = np.exp(g_grid - self.g_max)
        u = np.arange(N) / N
        kern = spec.kernel(np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1)) / N**2
        self._w_hat = np.fft.fft2(weights) / N**2
        self.grid_values = np.real(np.fft.ifft2(np.fft.fft2(weights) * np.fft.fft2(kern)))
        k1, k2 = spec.active_modes()
        self._k1, self._k2 = k1.ravel(), k2.ravel()
        self._coef = (self._w_hat[self._k1 % N, self._k2 % N] * spec.kernel_hat(self._k1, self._k2))

    def scaled(self, x):
        """``C(x) exp(-g_max)`` at arbitrary points."""
        return _trig_sum(np.atleast_2d(x), self._k1, self._k2, self._coef)

    def intensity(self, x, g_x):
        """``J(x) = C(x) / exp(g(x))``."""
        return self.scaled(x) * np.exp(self.g_max - np.asarray(g_x))

    def grid_intensity(self, g_grid):
        return self.grid_values.ravel() * np.exp(self.g_max - np.asarray(g_grid).ravel())


def backward_intensity_integral(spec, potential, t_forward, x, version=None):
    """``J = int s_hat(x, y) lambda(y - x) dy`` for ``s_hat = exp(g(y) - g(x))``."""
    g_grid = potential(t_forward, spec.grid_points())
    field = ConvolutionField(spec, g_grid, version)
    x = np.atleast_2d(x)
    return field.intensity(x, potential(t_forward, x)), field


def riemann_intensity(spec, g_grid, x, g_x):
    """Brute-force double loop over the grid; an oracle for :class:`ConvolutionField`."""
    pts = spec.grid_points()
    w = np.exp(np.asarray(g_grid).ravel())
    out = np.empty(len(x))
    for i, xi in enumerate(np.atleast_2d(x)):
        out[i] = (w * spec.kernel(pts - xi)).sum() / spec.grid**2 / np.exp(g_x[i])
    return out


def reference_reuse_J(field: ConvolutionField, y_ref, J_ref, g_ref, x, g_x, version=None):
    """Reuse ``J(y_ref)`` at ``x``: ``J_ref * (C(x)/C(y_ref)) / s_hat(y_ref, x)``.

    For a translation-invariant kernel the convolution field carries all the
    ``x`` dependence of the numerator, so the identity is exact on the grid.
    """
    if version is not None and field.version != version:
        raise StaleFieldError(f"field version {field.version!r} does not match {version!r}")
    x = np.atleast_2d(x)
    c_ratio = field.scaled(x) / field.scaled(np.atleast_2d(y_ref))[0]
    s_ref_x = np.exp(np.asarray(g_x) - g_ref)
    return J_ref * c_ratio / s_ref_x


# ---------------------------------------------------------------------------
# backward stepping
# ---------------------------------------------------------------------------


@dataclass
class StepStats:
    proposals: int = 0
    accepted: int = 0
    jumps: int = 0
    clipped: int = 0


def sample_backward_jumps(spec, potential_t, y, n_jumps, g_max, rng, safety=1.1, min_rate=1e-3, stats=None):
    """Apply ``n_jumps[i]`` sequential jumps to each ``y[i]`` by rejection.

    Proposals come from the kernel around the current point and are accepted
    with probability ``exp(g(y') - g_max) / safety``; the ``g(y_cur)`` factors
    of ``s_hat`` cancel against the bound.
    """
    y = np.atleast_2d(np.array(y, dtype=np.float64))
    remaining = np.asarray(n_jumps, dtype=np.int64).copy()
    stats = stats if stats is not None else StepStats()
    while (remaining > 0).any():
        idx = np.flatnonzero(remaining > 0)
        proposal = np.mod(y[idx] + spec.sigma * rng.normal(size=(idx.size, 2)), 1.0)
        accept_p = np.exp(potential_t(proposal) - g_max) / safety
        if (accept_p > 1).any():
            stats.clipped += int((accept_p > 1).sum())
        accept = rng.random(idx.size) < accept_p
        stats.proposals += idx.size
        stats.accepted += int(accept.sum())
        if stats.proposals >= 10_000 and stats.accepted < min_rate * stats.proposals:
            raise JumpError(
                f"rejection acceptance {stats.accepted / stats.proposals:.2e} below {min_rate}; bound too loose"
            )
        y[idx[accept]] = proposal[accept]
        remaining[idx[accept]] -= 1
    return y, stats


def backward_jump_step(spec, potential, y, t_forward, kappa, rng, field=None, safety=1.1):
    """Frozen-intensity backward step of length ``kappa``.

    The jump count is ``Poisson(kappa J(y))`` with ``J`` and ``s_hat`` frozen at
    ``t_forward``; jumps are then placed one after another by rejection.
    Returns ``(y_next, stats)``.
    """
    if kappa <= 0:
        raise ValueError("step must be positive")
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    potential_t = lambda pts: np.asarray(potential(np.full(len(pts), t_forward), pts))
    if field is None:
        field = ConvolutionField(spec, potential_t(spec.grid_points()), version=t_forward)
    J = field.intensity(y, potential_t(y))
    n_jumps = rng.poisson(kappa * J)
    stats = StepStats(jumps=int(n_jumps.sum()))
    y_next, stats = sample_backward_jumps(spec, potential_t, y, n_jumps, field.g_max, rng, safety, stats=stats)
    return y_next, stats


def reference_potential(spec, centers, jitter=0.0, modes=None):
    """Exact ``g_t = log p_t`` when ``p_0`` is a wrapped Gaussian blur of ``centers``.

    ``p_t = e^{-tM} p_0 + (continuous part)``; the continuous part is smooth at
    the kernel scale and comes from the empirical characteristic function of
    the centers. The ``p_0`` term is summed in space, so narrow blurs need no
    extra modes. With ``jitter=0`` the atoms are dropped and only the
    continuous part remains.
    """
    centers = np.mod(np.atleast_2d(np.asarray(centers, dtype=np.float64)), 1.0)
    if modes is None:
        k1, k2 = spec.active_modes()
    else:
        k = np.arange(-modes, modes + 1)
        k1, k2 = np.meshgrid(k, k, indexing="ij")
    k1, k2 = k1.ravel(), k2.ravel()
    phases = np.exp(-2j * np.pi * (np.outer(centers[:, 0], k1) + np.outer(centers[:, 1], k2))).mean(axis=0)
    phases = phases * np.exp(-2 * np.pi**2 * jitter**2 * (k1**2 + k2**2))
    lam = spec.kernel_hat(k1, k2)
    if jitter > 0.05:
        raise ValueError("spatial blur summation assumes jitter <= 0.05")
    tree = cKDTree(centers, boxsize=1.0)

    def p0(x):
        # neighbours beyond 8 jitter contribute below exp(-32) relative
        query = cKDTree(np.mod(x, 1.0), boxsize=1.0)
        pairs = query.sparse_distance_matrix(tree, 8 * jitter, output_type="coo_matrix")
        w = np.exp(-0.5 * pairs.data**2 / jitter**2) / (2 * np.pi * jitter**2)
        return np.bincount(pairs.row, weights=w, minlength=len(x)) / len(centers)

    def potential(t, x):
        t = float(np.atleast_1d(t)[0])
        x = np.atleast_2d(x)
        coef = np.exp(-t * spec.rate) * np.expm1(t * lam) * phases
        vals = _trig_sum(x, k1, k2, coef)
        if jitter > 0:
            vals = vals + np.exp(-t * spec.rate) * p0(x)
        return np.log(np.maximum(vals, 1e-300))

    return potential


def _trig_sum(x, k1, k2, coef, chunk=8192):
    """``Re sum_k coef_k exp(2 pi i k.x)`` in chunks over ``x``."""
    out = np.empty(len(x))
    for s in range(0, len(x), chunk):
        xs = x[s : s + chunk]
        out[s : s + chunk] = np.real(np.exp(2j * np.pi * (np.outer(xs[:, 0], k1) + np.outer(xs[:, 1], k2))) @ coef)
    return out


def write_grid_csv(path, values):
    """Export an ``N x N`` grid as ``i,j,value`` rows."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("expected a 2-D grid")
    i, j = np.indices(values.shape)
    table = np.column_stack([i.ravel(), j.ravel(), values.ravel()])
    np.savetxt(path, table, delimiter=",", header="i,j,value", comments="", fmt=["%d", "%d", "%.17g"])
