"""Target distributions and sample-set distances.

Torus targets live on ``[0, 1)^2``. The moons and swiss-roll shapes use
fixed parametric constructions scaled into the unit square with small
Gaussian jitter; their constants are declared below.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

TARGET_NAMES = ("gmm1d-abs", "gmm2d-abs", "chessboard", "swiss-roll", "moons", "finite-random")
TORUS_TARGETS = ("chessboard", "swiss-roll", "moons")

JITTER = 0.01
CHESS_CELLS = 4
MOONS_SCALE = 0.8 / 3.0  # x-extent of the two arcs is 3 before scaling
SWISS_TURNS = (1.5 * np.pi, 4.5 * np.pi)

GMM1D = dict(weights=(0.7, 0.3), means=(2.0, 4.0), variances=(0.25, 0.64))
GMM2D = dict(weights=(0.6, 0.4), means=((2.5, 5.0), (5.5, 2.5)))


@dataclass(frozen=True)
class TargetSpec:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in TARGET_NAMES:
            raise ValueError(f"unknown target {self.name!r}; expected one of {TARGET_NAMES}")

    @property
    def on_torus(self):
        return self.name in TORUS_TARGETS


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def _gmm1d(n, rng, weights, means, variances):
    comp = rng.choice(len(weights), size=n, p=np.asarray(weights) / np.sum(weights))
    return np.asarray(means)[comp] + np.sqrt(np.asarray(variances))[comp] * rng.normal(size=n)


def _chessboard(n, rng):
    cells = [(i, j) for i in range(CHESS_CELLS) for j in range(CHESS_CELLS) if (i + j) % 2 == 0]
    pick = np.asarray(cells)[rng.integers(0, len(cells), size=n)]
    return (pick + rng.random((n, 2))) / CHESS_CELLS


def _moons(n, rng):
    upper = rng.random(n) < 0.5
    theta = np.pi * rng.random(n)
    x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([0.1 + (x + 1.0) * MOONS_SCALE, 0.5 + (y - 0.25) * MOONS_SCALE], axis=1)
    return pts


def _swiss_roll(n, rng):
    lo, hi = SWISS_TURNS
    theta = lo + (hi - lo) * np.sqrt(rng.random(n))  # uniform along arc length, roughly
    r = 0.4 / hi
    return 0.5 + r * np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1)


def sample_target(spec: TargetSpec, n, rng):
    """``n`` i.i.d. draws; shape ``(n,)`` for 1-D targets, ``(n, 2)`` otherwise.

    ``finite-random`` returns state indices drawn from ``params["probs"]``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    p = spec.params
    if spec.name == "gmm1d-abs":
        cfg = {**GMM1D, **p}
        return np.abs(_gmm1d(n, rng, cfg["weights"], cfg["means"], cfg["variances"]))
    if spec.name == "gmm2d-abs":
        cfg = {**GMM2D, **p}
        w = np.asarray(cfg["weights"])
        comp = rng.choice(w.size, size=n, p=w / w.sum())
        return np.abs(np.asarray(cfg["means"])[comp] + rng.normal(size=(n, 2)))
    if spec.name == "finite-random":
        probs = np.asarray(p["probs"], dtype=np.float64)
        return rng.choice(probs.size, size=n, p=probs / probs.sum())
    if spec.name == "chessboard":
        return _chessboard(n, rng)
    base = _moons(n, rng) if spec.name == "moons" else _swiss_roll(n, rng)
    jitter = p.get("jitter", JITTER)
    return np.mod(base + jitter * rng.normal(size=base.shape), 1.0)


def target_density(spec: TargetSpec, x):
    """Density where it is available in closed form (abs-mixtures, chessboard)."""
    p = spec.params
    if spec.name == "gmm1d-abs":
        cfg = {**GMM1D, **p}
        x = np.asarray(x, dtype=np.float64)
        out = np.zeros_like(x)
        for w, m, v in zip(cfg["weights"], cfg["means"], cfg["variances"]):
            s = np.sqrt(v)
            out += w * (norm.pdf(x, m, s) + norm.pdf(-x, m, s))
        return np.where(x >= 0, out, 0.0)
    if spec.name == "gmm2d-abs":
        cfg = {**GMM2D, **p}
        x = np.atleast_2d(x)
        out = np.zeros(len(x))
        for w, m in zip(cfg["weights"], cfg["means"]):
            per_axis = [norm.pdf(x[:, k], m[k]) + norm.pdf(-x[:, k], m[k]) for k in range(2)]
            out += w * per_axis[0] * per_axis[1]
        return np.where((x >= 0).all(axis=1), out, 0.0)
    if spec.name == "chessboard":
        x = np.atleast_2d(x)
        cell = np.floor(np.mod(x, 1.0) * CHESS_CELLS).astype(int)
        return np.where(cell.sum(axis=1) % 2 == 0, 2.0, 0.0)
    raise ValueError(f"no closed-form density for {spec.name!r}")


def chessboard_black(x):
    cell = np.floor(np.mod(np.atleast_2d(x), 1.0) * CHESS_CELLS).astype(int)
    return cell.sum(axis=1) % 2 == 0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _as_2d(a):
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("sample set is empty")
    return a[:, None] if a.ndim == 1 else a


def _sum_abs_diff_sorted(a):
    """``sum_{i<j} |a_i - a_j|`` for a sorted 1-D array."""
    n = a.size
    return float(np.sum(a * (2 * np.arange(n) - n + 1)))


def _mean_cross_1d(a, b):
    """``mean |a_i - b_j|`` in ``O((n + m) log(n + m))``."""
    b = np.sort(b)
    csum = np.concatenate([[0.0], np.cumsum(b)])
    k = np.searchsorted(b, a)
    left = a * k - csum[k]
    right = (csum[-1] - csum[k]) - a * (b.size - k)
    return float((left + right).sum() / (a.size * b.size))


def _pair_sum(a, b, torus, chunk=2048):
    total = 0.0
    for start in range(0, len(a), chunk):
        diff = np.abs(a[start : start + chunk, None, :] - b[None, :, :])
        if torus:
            diff = np.minimum(diff, 1.0 - diff)
        total += np.sqrt((diff**2).sum(axis=-1)).sum()
    return total


def energy_distance(A, B, torus=False, unbiased=True):
    """``2 E|a - b| - E|a - a'| - E|b - b'|``.

    Within-set terms use the U-statistic (distinct pairs) by default, so the
    estimate may dip slightly below zero when both sets share a law. With
    ``unbiased=False`` the V-statistic is used and identical sets give 0.
    ``torus=True`` measures distances on the unit torus.
    """
    a, b = _as_2d(A), _as_2d(B)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimensions")
    n, m = len(a), len(b)
    if a.shape[1] == 1 and not torus:
        sa, sb = np.sort(a[:, 0]), np.sort(b[:, 0])
        cross = _mean_cross_1d(sa, sb)
        within_a, within_b = 2 * _sum_abs_diff_sorted(sa), 2 * _sum_abs_diff_sorted(sb)
    else:
        cross = _pair_sum(a, b, torus) / (n * m)
        within_a, within_b = _pair_sum(a, a, torus), _pair_sum(b, b, torus)
    if unbiased:
        if n < 2 or m < 2:
            raise ValueError("U-statistic needs at least two samples per set")
        return 2 * cross - within_a / (n * (n - 1)) - within_b / (m * (m - 1))
    return 2 * cross - within_a / n**2 - within_b / m**2


def histogram(A, bins=32, bounds=(0.0, 1.0)):
    a = _as_2d(A)
    counts, _ = np.histogramdd(a, bins=[bins] * a.shape[1], range=[bounds] * a.shape[1])
    return counts / len(a)


def histogram_tv(A, B, bins=32, bounds=(0.0, 1.0)):
    """``1/2 sum |p_A - p_B|`` between two sample sets on a common grid."""
    return histogram_tv_to_law(A, histogram(B, bins, bounds), bounds)


def histogram_tv_to_law(A, probs, bounds=(0.0, 1.0)):
    """Total variation between the histogram of ``A`` and exact bin probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    if (probs < 0).any() or not np.isclose(probs.sum(), 1.0):
        raise ValueError("bin probabilities must be nonnegative and sum to 1")
    pa = histogram(A, probs.shape[0], bounds)
    if pa.shape != probs.shape:
        raise ValueError(f"histogram shape {pa.shape} does not match {probs.shape}")
    return float(0.5 * np.abs(pa - probs).sum())
