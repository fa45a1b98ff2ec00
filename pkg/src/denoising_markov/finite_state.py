"""Finite-state discrete diffusion: rate builders, closed-form conditionals,
Kolmogorov-forward integration, Gillespie simulation, the discrete
score-matching loss and the exact path KL.

States of ``[S]^d`` are enumerated lexicographically (first coordinate most
significant). Symbols are ``0..S-1`` for the uniform chain; the masked chain
adds the null symbol ``0`` and uses ``1..S`` for data.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .generator import (
    DensityVector,
    RateMatrix,
    ScoreTable,
    backward_rate_matrix,
    constant_family,
    kl_integrand_table,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# state spaces and forward chains
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteSpace:
    dims: int
    states_per_dim: int
    masked: bool = False

    def __post_init__(self):
        if self.dims < 1 or self.states_per_dim < 1:
            raise ValueError("dims and states_per_dim must be positive")

    @property
    def alphabet(self):
        return self.states_per_dim + 1 if self.masked else self.states_per_dim

    @property
    def size(self):
        return self.alphabet**self.dims

    def encode(self, states):
        """Lexicographic index of each state row."""
        states = np.atleast_2d(np.asarray(states, dtype=np.int64))
        if states.shape[-1] != self.dims:
            raise ValueError(f"states must have {self.dims} coordinates")
        if (states < 0).any() or (states >= self.alphabet).any():
            raise ValueError("state coordinate out of range")
        weights = self.alphabet ** np.arange(self.dims - 1, -1, -1)
        return states @ weights

    def decode(self, index):
        index = np.asarray(index, dtype=np.int64)
        out = np.empty(index.shape + (self.dims,), dtype=np.int64)
        rest = index.copy()
        for k in range(self.dims - 1, -1, -1):
            out[..., k] = rest % self.alphabet
            rest //= self.alphabet
        return out

    def all_states(self):
        return self.decode(np.arange(self.size))


def build_uniform_rate(space: DiscreteSpace):
    """Rate ``1/d`` between states at Hamming distance one."""
    if space.masked:
        raise ValueError("uniform rate needs an unmasked space")
    states = space.all_states()
    hamming = (states[:, None, :] != states[None, :, :]).sum(axis=-1)
    off = np.where(hamming == 1, 1.0 / space.dims, 0.0)
    return constant_family(RateMatrix.from_off_diagonal(off))


def build_masked_rate(space: DiscreteSpace):
    """Rate one from ``x`` to ``x`` with a single non-null coordinate nulled."""
    if not space.masked:
        raise ValueError("masked rate needs a masked space")
    states = space.all_states()
    diff = states[:, None, :] != states[None, :, :]  # [y, x, k]
    single = diff.sum(axis=-1) == 1
    to_null = ((states[:, None, :] == 0) & (states[None, :, :] != 0) & diff).any(axis=-1)
    off = np.where(single & to_null, 1.0, 0.0)
    return constant_family(RateMatrix.from_off_diagonal(off))


def _uniform_keep(space, t):
    # per-coordinate decay rate is S/d for the 1/d neighbour rate
    return np.exp(-space.states_per_dim * t / space.dims)


def uniform_conditional(space: DiscreteSpace, x0, xt, t) -> float:
    """``prod_i (k delta(x0_i, xt_i) + (1 - k) / S)``, ``k = exp(-S t / d)``."""
    if space.masked:
        raise ValueError("uniform conditional needs an unmasked space")
    if t < 0:
        raise ValueError("t must be nonnegative")
    x0 = np.asarray(x0)
    xt = np.asarray(xt)
    keep = _uniform_keep(space, t)
    per_dim = keep * (x0 == xt) + (1.0 - keep) / space.states_per_dim
    return float(np.prod(per_dim, axis=-1))


def masked_conditional(space: DiscreteSpace, x0, xt, t) -> float:
    """``prod_i (e^{-t} delta(x0_i, xt_i) + (1 - e^{-t}) delta(0, xt_i))``."""
    if not space.masked:
        raise ValueError("masked conditional needs a masked space")
    if t < 0:
        raise ValueError("t must be nonnegative")
    x0 = np.asarray(x0)
    xt = np.asarray(xt)
    if (x0 == 0).any():
        raise ValueError("x0 must not contain the null symbol")
    keep = np.exp(-t)
    per_dim = keep * (x0 == xt) + (1.0 - keep) * (xt == 0)
    return float(np.prod(per_dim, axis=-1))


class ConditionalLawDiscrete:
    """Closed-form ``p_{t|0}`` of the uniform or masked chain."""

    def __init__(self, space: DiscreteSpace):
        self.space = space
        self.kind = "masked" if space.masked else "uniform"
        self._states = space.all_states()

    def prob(self, x0, xt, t):
        fn = masked_conditional if self.space.masked else uniform_conditional
        return fn(self.space, x0, xt, t)

    def _per_dim(self, t):
        """``table[a, b] = p(x_t^i = b | x_0^i = a)`` for one coordinate."""
        A = self.space.alphabet
        if self.space.masked:
            keep = np.exp(-t)
            table = keep * np.eye(A)
            table[:, 0] += 1.0 - keep
            return table
        keep = _uniform_keep(self.space, t)
        return keep * np.eye(A) + (1.0 - keep) / A

    def table(self, x0_index, t):
        """Vector over all states of ``p_{t|0}(. | x0)``; ``x0_index`` may be an array."""
        per_dim = self._per_dim(t)
        x0 = self.space.decode(np.atleast_1d(x0_index))
        out = np.ones((x0.shape[0], self.space.size))
        for k in range(self.space.dims):
            out *= per_dim[x0[:, k][:, None], self._states[None, :, k]]
        return out

    def sample(self, x0_index, t, rng):
        """Independent per-coordinate draws; returns state indices."""
        x0 = self.space.decode(np.atleast_1d(x0_index))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), x0.shape[:1])[:, None]
        u = rng.random(x0.shape)
        if self.space.masked:
            keep = np.exp(-t)
            xt = np.where(u < keep, x0, 0)
        else:
            keep = _uniform_keep(self.space, t)
            noise = rng.integers(0, self.space.states_per_dim, size=x0.shape)
            xt = np.where(u < keep, x0, noise)
        return self.space.encode(xt)


class ExactConditional:
    """``p_{t|0}`` of an arbitrary rate family by forward integration."""

    def __init__(self, family, size):
        self.family = family
        self.size = size

    def table(self, x0_index, t):
        rows = []
        for i in np.atleast_1d(x0_index):
            p0 = np.zeros(self.size)
            p0[i] = 1.0
            rows.append(evolve_density(self.family, DensityVector(p0), t).values)
        return np.array(rows)

    def sample(self, x0_index, t, rng):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), np.shape(np.atleast_1d(x0_index)))
        out = []
        for i, ti in zip(np.atleast_1d(x0_index), t):
            row = self.table([i], ti)[0]
            out.append(rng.choice(self.size, p=row / row.sum()))
        return np.array(out)


# ---------------------------------------------------------------------------
# Kolmogorov forward integration
# ---------------------------------------------------------------------------


class IntegrationError(RuntimeError):
    pass


def _rk4(rates_at, p, t, h):
    k1 = rates_at(t) @ p
    k2 = rates_at(t + h / 2) @ (p + h / 2 * k1)
    k3 = rates_at(t + h / 2) @ (p + h / 2 * k2)
    k4 = rates_at(t + h) @ (p + h * k3)
    return p + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_linear(rates_at, p0, t0, t1, tol=1e-10, max_steps=200_000, h0=None):
    """Adaptive RK4 (step doubling) for ``dp/dt = rates_at(t) @ p``."""
    p = np.array(p0, dtype=np.float64)
    span = t1 - t0
    if span < 0:
        raise ValueError("integration runs forward in time only")
    if span == 0:
        return p
    t = t0
    h = min(span, h0 if h0 is not None else 0.05)
    steps = 0
    while t < t1:
        if steps > max_steps:
            raise IntegrationError(f"tolerance {tol} not reached within {max_steps} steps")
        h = min(h, t1 - t)
        full = _rk4(rates_at, p, t, h)
        half = _rk4(rates_at, _rk4(rates_at, p, t, h / 2), t + h / 2, h / 2)
        err = np.abs(half - full).max() / 15.0
        steps += 1
        if err <= tol or h < 1e-12:
            t += h
            p = half + (half - full) / 15.0
            grow = 2.0 if err == 0 else min(2.0, 0.9 * (tol / err) ** 0.2)
            h *= max(grow, 0.2)
        else:
            h *= max(0.2, 0.9 * (tol / err) ** 0.2)
    return p


def evolve_density(family, p0: DensityVector, t, t0=0.0, tol=1e-10) -> DensityVector:
    """Solve ``dp/dt = Lambda_t p`` from ``t0`` to ``t`` and renormalize."""
    values = p0.values if isinstance(p0, DensityVector) else np.asarray(p0, dtype=np.float64)
    p = integrate_linear(lambda s: family(s).rates, values, t0, t, tol=tol)
    total = p.sum()
    if abs(total - 1.0) > 1e-8:
        raise IntegrationError(f"probability drifted to {total!r}")
    p = np.clip(p, 0.0, None)
    return DensityVector(p / p.sum(), time=t)


class MarginalPath:
    """Forward marginals ``p_t`` on ``[0, T]``, cached at checkpoints."""

    def __init__(self, family, p0: DensityVector, T, spacing=0.05, tol=1e-11):
        self.family = family
        self.T = T
        self.tol = tol
        n = max(1, int(np.ceil(T / spacing)))
        self.times = np.linspace(0.0, T, n + 1)
        rates_at = lambda s: family(s).rates
        checkpoints = [np.asarray(p0.values, dtype=np.float64)]
        for a, b in zip(self.times[:-1], self.times[1:]):
            checkpoints.append(integrate_linear(rates_at, checkpoints[-1], a, b, tol=tol))
        self.checkpoints = np.array(checkpoints)
        self._cache = {}

    def at(self, t):
        t = float(t)
        hit = self._cache.get(t)
        if hit is not None:
            return hit.copy()
        value = self._at(t)
        if len(self._cache) < 100_000:
            self._cache[t] = value
        return value.copy()

    def _at(self, t):
        if t < -1e-14 or t > self.T + 1e-12:
            raise ValueError(f"time {t} outside [0, {self.T}]")
        t = min(max(t, 0.0), self.T)
        i = min(int(np.searchsorted(self.times, t, side="right")) - 1, len(self.times) - 1)
        start = self.checkpoints[i]
        if t == self.times[i]:
            return start.copy()
        return integrate_linear(
            lambda s: self.family(s).rates, start, self.times[i], t, tol=self.tol
        )

    def score(self, t):
        return ScoreTable.from_density(self.at(t))


def backward_family(family, score_at, T):
    """Rate family of the backward chain: ``tau -> bar_Lambda`` at forward time ``T - tau``."""

    def rates(tau):
        t = T - tau
        return backward_rate_matrix(family(t), score_at(t))

    return rates


def kl_divergence(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


# ---------------------------------------------------------------------------
# Gillespie simulation
# ---------------------------------------------------------------------------


class UnboundedRateError(RuntimeError):
    pass


@dataclass
class TrajectoryBatch:
    """Flat event records; every path starts at time 0 and ends with a record at ``T``."""

    path_id: np.ndarray
    time: np.ndarray
    state: np.ndarray
    horizon: float

    def paths(self):
        order = np.lexsort((self.time, self.path_id))
        pid, tm, st = self.path_id[order], self.time[order], self.state[order]
        splits = np.flatnonzero(np.diff(pid)) + 1
        return [list(zip(t.tolist(), s.tolist())) for t, s in zip(np.split(tm, splits), np.split(st, splits))]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path_id", "time", "state_index"])
            for row in zip(self.path_id.tolist(), self.time.tolist(), self.state.tolist()):
                writer.writerow([row[0], repr(row[1]), row[2]])


def _rate_bound(family, T, grid=256):
    times = np.linspace(0.0, T, grid)
    return 1.5 * max(float(family(t).exit_rates().max(initial=0.0)) for t in times)


def gillespie_sample(family, x0, T, rng, rate_bound=None):
    """One exact path on ``[0, T]`` as a list of ``(time, state)`` records.

    Time-dependent families are simulated by thinning against ``rate_bound``
    (estimated from a time grid when omitted); a rate above the bound raises.
    """
    constant = getattr(family, "constant", None)
    path = [(0.0, int(x0))]
    t, x = 0.0, int(x0)
    if constant is not None:
        lam = constant.intensity()
        exits = lam.sum(axis=0)
        while True:
            rate = exits[x]
            if rate <= 0:
                break
            t += rng.exponential(1.0 / rate)
            if t >= T:
                break
            x = int(rng.choice(lam.shape[0], p=lam[:, x] / rate))
            path.append((t, x))
    else:
        bound = rate_bound if rate_bound is not None else _rate_bound(family, T)
        if not np.isfinite(bound):
            raise UnboundedRateError("rate bound is not finite")
        if bound <= 0:
            path.append((T, x))
            return path
        while True:
            t += rng.exponential(1.0 / bound)
            if t >= T:
                break
            lam = family(t).intensity()
            rate = lam[:, x].sum()
            if rate > bound * (1 + 1e-12):
                raise UnboundedRateError(f"exit rate {rate} exceeds bound {bound} at t={t}")
            if rng.random() * bound < rate:
                x = int(rng.choice(lam.shape[0], p=lam[:, x] / rate))
                path.append((t, x))
    path.append((T, x))
    return path


def gillespie_batch(family, x0, T, rng, rate_bound=None) -> TrajectoryBatch:
    """Many independent paths; vectorized when the family is time-constant."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=np.int64))
    constant = getattr(family, "constant", None)
    if constant is None:
        if rate_bound is None:
            rate_bound = _rate_bound(family, T)
        pid, tm, st = [], [], []
        for k, start in enumerate(x0):
            for time, state in gillespie_sample(family, start, T, rng, rate_bound):
                pid.append(k)
                tm.append(time)
                st.append(state)
        return TrajectoryBatch(np.array(pid), np.array(tm), np.array(st), T)

    lam = constant.intensity()
    exits = lam.sum(axis=0)
    cum = np.cumsum(lam / np.where(exits > 0, exits, 1.0)[None, :], axis=0)
    n = x0.size
    ids = np.arange(n)
    pid, tm, st = [ids], [np.zeros(n)], [x0.copy()]
    state = x0.copy()
    time = np.zeros(n)
    active = exits[state] > 0
    while active.any():
        idx = ids[active]
        rate = exits[state[idx]]
        time[idx] += rng.exponential(1.0, size=idx.size) / rate
        done = time[idx] >= T
        idx = idx[~done]
        active[ids[active][done]] = False
        if idx.size == 0:
            break
        u = rng.random(idx.size)
        cols = cum[:, state[idx]]
        new = (u[None, :] > cols).sum(axis=0)
        new = np.minimum(new, lam.shape[0] - 1)
        state[idx] = new
        pid.append(idx)
        tm.append(time[idx].copy())
        st.append(new.copy())
        active[idx] = exits[new] > 0
    pid.append(ids)
    tm.append(np.full(n, float(T)))
    st.append(state.copy())
    return TrajectoryBatch(np.concatenate(pid), np.concatenate(tm), np.concatenate(st), T)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def uniform_time_sampler(t_min, T):
    def sample(n, rng):
        return rng.uniform(t_min, T, size=n)

    sample.density = lambda t: np.full(np.shape(t), 1.0 / (T - t_min))
    return sample


def discrete_sm_terms(log_score_rows, cond_ratio_rows, lam_rows):
    """Per-sample ``sum_y (s_hat - r log s_hat) lambda`` with ``s_hat = exp(log_score_rows)``.

    ``lam_rows[k, y]`` is the forward rate from ``y`` into the sample's state;
    entries with zero rate are ignored. Accepts arrays or tensors and returns
    a :class:`Tensor` of shape ``(batch,)``.
    """
    log_s = log_score_rows if isinstance(log_score_rows, Tensor) else Tensor(log_score_rows)
    lam = np.asarray(lam_rows, dtype=np.float64)
    r = np.where(lam > 0, np.asarray(cond_ratio_rows, dtype=np.float64), 0.0)
    return ((log_s.exp() - log_s * r) * lam).sum(axis=1)


def conditional_ratio_rows(conditional, x0_index, xt_index, t):
    """``p_{t|0}(y | x0) / p_{t|0}(x_t | x0)`` for every ``y``, one row per sample."""
    rows = []
    for a, b, ti in zip(np.atleast_1d(x0_index), np.atleast_1d(xt_index), np.atleast_1d(t)):
        table = conditional.table([a], ti)[0]
        rows.append(table / table[b])
    return np.array(rows)


def discrete_sm_loss(score_fn, space, dataset, family, time_sampler, batch, rng, conditional=None):
    """Monte Carlo estimate of the discrete score-matching objective.

    ``score_fn(t, xt_index)`` returns ``s_hat(x_t, .)`` rows of shape
    ``(len(xt_index), |X|)``. ``dataset`` is a multiset of state indices.
    """
    dataset = np.asarray(dataset, dtype=np.int64)
    if conditional is None:
        conditional = ConditionalLawDiscrete(space)
    x0 = dataset[rng.integers(0, dataset.size, size=batch)]
    t = time_sampler(batch, rng)
    xt = conditional.sample(x0, t, rng)
    rows = np.asarray(score_fn(t, xt), dtype=np.float64)
    if not (rows > 0).all():
        raise ValueError("score estimate must be strictly positive")
    ratios = conditional_ratio_rows(conditional, x0, xt, t)
    lam = np.array([family(ti).rates[b] for ti, b in zip(t, xt)])
    idx = np.arange(batch)
    lam[idx, xt] = 0.0
    terms = discrete_sm_terms(np.log(rows), ratios, lam).data
    return float(terms.mean())


def exact_path_kl(family, s_true_at, s_hat_at, p0, T, nodes=64, rtol=1e-6, max_nodes=4096, marginals=None):
    """``int_0^T sum_x p_t(x) I_t(x) dt`` by Gauss-Legendre with node doubling.

    ``s_true_at`` may be ``None``, in which case the true ratios come from the
    forward marginals.
    """
    if marginals is None:
        marginals = MarginalPath(family, p0, T)
    if s_true_at is None:
        s_true_at = marginals.score

    def integrand(t):
        p = marginals.at(t)
        return float(p @ kl_integrand_table(family(t), s_true_at(t), s_hat_at(t)))

    def quad(n):
        x, w = np.polynomial.legendre.leggauss(n)
        ts = 0.5 * T * (x + 1.0)
        return 0.5 * T * sum(wi * integrand(ti) for wi, ti in zip(w, ts))

    prev = quad(nodes)
    n = nodes
    while True:
        n *= 2
        if n > max_nodes:
            raise IntegrationError("path KL quadrature did not converge")
        cur = quad(n)
        if abs(cur - prev) <= rtol * max(abs(cur), 1e-300) or abs(cur - prev) < 1e-15:
            return max(cur, 0.0)
        prev = cur


def mc_path_kl(family, s_true_at, s_hat_at, p0, T, n_paths, rng, grid=4001, marginals=None):
    """Average of ``int_0^T I_t(x_t) dt`` along Gillespie paths started from ``p0``.

    The integrand is tabulated per state on a uniform time grid and integrated
    by cumulative trapezoid, so each path costs one lookup per segment.
    Returns ``(mean, standard_error)``.
    """
    if marginals is None:
        marginals = MarginalPath(family, p0, T)
    if s_true_at is None:
        s_true_at = marginals.score
    times = np.linspace(0.0, T, grid)
    table = np.array([kl_integrand_table(family(t), s_true_at(t), s_hat_at(t)) for t in times]).T
    steps = np.diff(times)
    cumulative = np.concatenate(
        [np.zeros((table.shape[0], 1)), np.cumsum(0.5 * (table[:, 1:] + table[:, :-1]) * steps, axis=1)],
        axis=1,
    )
    values = np.asarray(p0.values if isinstance(p0, DensityVector) else p0)
    starts = rng.choice(values.size, size=n_paths, p=values)
    batch = gillespie_batch(family, starts, T, rng)
    order = np.lexsort((batch.time, batch.path_id))
    pid, tm, st = batch.path_id[order], batch.time[order], batch.state[order]
    same = pid[1:] == pid[:-1]
    a, b, x = tm[:-1][same], tm[1:][same], st[:-1][same]
    per_segment = np.empty(a.size)
    for state in np.unique(x):
        sel = x == state
        per_segment[sel] = np.interp(b[sel], times, cumulative[state]) - np.interp(
            a[sel], times, cumulative[state]
        )
    totals = np.bincount(pid[:-1][same], weights=per_segment, minlength=n_paths)
    return float(totals.mean()), float(totals.std(ddof=1) / np.sqrt(n_paths))
