"""Exact generator algebra on finite state spaces.

Convention: a rate matrix acts on column vectors, ``dp/dt = Lambda @ p``.
``rates[y, x]`` is the rate of jumping *from* ``x`` *to* ``y``; each column
sums to zero. Every transpose in this package follows from that choice, so
``rates[x, y]`` is the rate into ``x`` from ``y``.

Functions on the state space are length-``n`` arrays. All operations are
pure and return fresh arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

_TOL = 1e-12


class RateMatrixError(ValueError):
    pass


@dataclass(frozen=True)
class RateMatrix:
    rates: np.ndarray

    def __post_init__(self):
        rates = np.array(self.rates, dtype=np.float64)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
            raise RateMatrixError(f"rate matrix must be square, got {rates.shape}")
        off = rates - np.diag(np.diag(rates))
        if (off < -_TOL).any():
            raise RateMatrixError("negative off-diagonal rate")
        scale = max(1.0, float(np.abs(rates).max(initial=0.0)))
        if np.abs(rates.sum(axis=0)).max(initial=0.0) > 1e-9 * scale:
            raise RateMatrixError("columns of a rate matrix must sum to zero")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @classmethod
    def from_off_diagonal(cls, off):
        """Build a valid matrix from off-diagonal intensities, rebuilding the diagonal."""
        off = np.array(off, dtype=np.float64)
        np.fill_diagonal(off, 0.0)
        return cls(off - np.diag(off.sum(axis=0)))

    @property
    def size(self):
        return self.rates.shape[0]

    def intensity(self):
        """``lambda(y, x) = Lambda(y, x)`` off the diagonal, zero on it."""
        off = self.rates.copy()
        np.fill_diagonal(off, 0.0)
        return off

    def exit_rates(self):
        return -np.diag(self.rates).copy()


RateFamily = Callable[[float], RateMatrix]


def constant_family(rm: RateMatrix) -> RateFamily:
    """A time-independent rate family; marked so samplers can skip thinning."""

    def family(t):
        return rm

    family.constant = rm
    return family


class ScoreTableError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreTable:
    """Full table of ratios ``ratios[x, y] ~ p(y) / p(x)``.

    A learned table need not be consistent with any density, so only the
    diagonal and positivity are enforced here.
    """

    ratios: np.ndarray

    def __post_init__(self):
        ratios = np.array(self.ratios, dtype=np.float64)
        if ratios.ndim != 2 or ratios.shape[0] != ratios.shape[1]:
            raise ScoreTableError(f"score table must be square, got {ratios.shape}")
        if not (ratios > 0).all() or not np.isfinite(ratios).all():
            raise ScoreTableError("score ratios must be finite and strictly positive")
        if np.abs(np.diag(ratios) - 1.0).max(initial=0.0) > 1e-12:
            raise ScoreTableError("score table diagonal must be 1")
        ratios.setflags(write=False)
        object.__setattr__(self, "ratios", ratios)

    @classmethod
    def from_density(cls, p):
        p = np.asarray(p, dtype=np.float64)
        if not (p > 0).all():
            raise ScoreTableError("density must be strictly positive to form ratios")
        return cls(p[None, :] / p[:, None])

    @classmethod
    def from_potential(cls, log_phi):
        log_phi = np.asarray(log_phi, dtype=np.float64)
        return cls(np.exp(log_phi[None, :] - log_phi[:, None]))

    @classmethod
    def ones(cls, n):
        return cls(np.ones((n, n)))

    @property
    def size(self):
        return self.ratios.shape[0]


@dataclass(frozen=True)
class DensityVector:
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("density must be a vector")
        if (values < -1e-15).any():
            raise ValueError("density has negative entries")
        if abs(values.sum() - 1.0) > 1e-9:
            raise ValueError(f"density sums to {values.sum()!r}, expected 1")
        if self.time < 0:
            raise ValueError("time must be nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def _check_fn(rm, f, name="f"):
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (rm.size,):
        raise ValueError(f"{name} has shape {f.shape}, expected ({rm.size},)")
    return f


def apply_generator(rm: RateMatrix, f) -> np.ndarray:
    """``(L f)(x) = sum_y (f(y) - f(x)) lambda(y, x)``."""
    f = _check_fn(rm, f)
    lam = rm.intensity()
    return (lam * (f[:, None] - f[None, :])).sum(axis=0)


def apply_adjoint(rm: RateMatrix, g) -> np.ndarray:
    """``(L* g)(x) = sum_y g(y) lambda(x, y) - g(x) lambda(y, x)``, i.e. ``Lambda @ g``."""
    g = _check_fn(rm, g, "g")
    lam = rm.intensity()
    return lam @ g - g * lam.sum(axis=0)


def carre_du_champ(rm: RateMatrix, f, g) -> np.ndarray:
    """``Gamma(f, g)(x) = sum_y (f(y) - f(x)) (g(y) - g(x)) lambda(y, x)``."""
    f = _check_fn(rm, f)
    g = _check_fn(rm, g, "g")
    lam = rm.intensity()
    df = f[:, None] - f[None, :]
    dg = g[:, None] - g[None, :]
    return (lam * df * dg).sum(axis=0)


def backward_rate_matrix(rm: RateMatrix, score: ScoreTable) -> RateMatrix:
    """Reverse-time rates ``bar_Lambda(y, x) = s(x, y) Lambda(x, y)`` for ``y != x``.

    Both arguments refer to the same forward time ``t``; the result drives the
    backward chain at backward time ``T - t``. Choosing that time is the
    caller's job.
    """
    if score.size != rm.size:
        raise ValueError("score table and rate matrix sizes differ")
    lam = rm.intensity()
    # bar[y, x] = s[x, y] * lam[x, y]
    return RateMatrix.from_off_diagonal((score.ratios * lam).T)


def bregman(r):
    """``r - 1 - log r``, the pointwise Bregman integrand of the jump losses."""
    r = np.asarray(r, dtype=np.float64)
    return r - 1.0 - np.log(r)


def kl_integrand_table(rm: RateMatrix, s_true: ScoreTable, s_hat: ScoreTable) -> np.ndarray:
    """Vector over ``x`` of ``sum_y (r - 1 - log r) s(x, y) lambda(x, y)``, ``r = s_hat / s``.

    Edges with ``lambda(x, y) = 0`` contribute nothing whatever the scores are.
    """
    if s_true.size != rm.size or s_hat.size != rm.size:
        raise ValueError("score table and rate matrix sizes differ")
    lam = rm.intensity()
    weight = s_true.ratios * lam  # weight[x, y] = s(x, y) lambda(x, y)
    r = s_hat.ratios / s_true.ratios
    terms = np.where(weight > 0, bregman(r) * weight, 0.0)
    return terms.sum(axis=1)


def kl_path_integrand(rm: RateMatrix, s_true: ScoreTable, s_hat: ScoreTable, x: int) -> float:
    """Path-KL integrand at a single state ``x``; nonnegative."""
    return float(kl_integrand_table(rm, s_true, s_hat)[x])
