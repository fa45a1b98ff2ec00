"""Generic training and sampling loops over the four engines.

Every engine provides the same small interface:

``network(hidden, layers)``
    an :class:`~denoising_markov.nn.Mlp` of the right input/output size;
``sample_batch(batch, time_sampler, rng)``
    ``x_0``, ``t`` and ``x_t`` plus whatever the loss needs;
``terms(mlp, params, batch)``
    per-sample loss values as a tensor;
``score(model)``
    the callable consumed by ``one_step``;
``prior(n, rng)`` and ``one_step(score, state, t_forward, kappa, rng)``.

``train`` runs the sample/estimate/update loop with Adam; ``infer`` draws
from the prior and applies ``one_step`` on a uniform time grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .autodiff import value_and_grad
from .diffusion import (
    DiffusionError,
    GbmSpec,
    backward_diffusion_step,
    diffusion_sm_terms,
    gbm_backward_step_log,
    gbm_conditional,
    ou_conditional,
    ou_fields,
)
from .finite_state import (
    ConditionalLawDiscrete,
    DiscreteSpace,
    IntegrationError,
    MarginalPath,
    build_masked_rate,
    build_uniform_rate,
    conditional_ratio_rows,
    discrete_sm_terms,
    integrate_linear,
    kl_divergence,
    exact_path_kl,
    uniform_time_sampler,
)
from .generator import DensityVector, backward_rate_matrix
from .jump import JumpError, TorusJumpSpec, backward_jump_step, draw_jump_batch, jump_batch_terms

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class InferenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def log_uniform_time_sampler(t_min, T):
    lo, hi = np.log(t_min), np.log(T)

    def sample(n, rng):
        return np.exp(rng.uniform(lo, hi, size=n))

    sample.density = lambda t: 1.0 / (np.asarray(t) * (hi - lo))
    return sample


TIME_DISTRIBUTIONS = {"uniform": uniform_time_sampler, "log-uniform": log_uniform_time_sampler}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch: int = 256
    T: float = 1.0
    t_min: float = 1e-3
    time_dist: str = "uniform"
    lr: float = 1e-3
    lr_final: float | None = None
    seed: int = 0
    hidden: int = 128
    layers: int = 5
    checkpoint_every: int = 500

    def __post_init__(self):
        if not 0 < self.t_min < self.T:
            raise ValueError("need 0 < t_min < T")
        if self.lr <= 0 or (self.lr_final is not None and self.lr_final <= 0):
            raise ValueError("learning rates must be positive")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be positive and epochs nonnegative")
        if self.time_dist not in TIME_DISTRIBUTIONS:
            raise ValueError(f"time distribution must be one of {sorted(TIME_DISTRIBUTIONS)}")

    def time_sampler(self):
        return TIME_DISTRIBUTIONS[self.time_dist](self.t_min, self.T)

    def learning_rate(self, epoch):
        """Constant ``lr``, or a cosine decay from ``lr`` to ``lr_final`` over the run."""
        if self.lr_final is None or self.epochs <= 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + np.cos(np.pi * frac))


@dataclass(frozen=True)
class TimeGrid:
    """``L`` backward steps of length ``kappa`` covering ``[0, T]``."""

    T: float
    steps: int

    def __post_init__(self):
        if self.steps < 0 or self.T <= 0:
            raise ValueError("need T > 0 and a nonnegative step count")

    @classmethod
    def from_step(cls, T, kappa):
        steps = int(round(T / kappa))
        if steps < 1 or abs(steps * kappa - T) > 1e-12 * max(1.0, T):
            raise ValueError(f"step {kappa} does not divide horizon {T}")
        return cls(T, steps)

    @property
    def kappa(self):
        return self.T / self.steps if self.steps else 0.0

    def forward_times(self):
        """Forward time at the start of each backward step: ``T - l kappa``."""
        return self.T - self.kappa * np.arange(self.steps)


@dataclass
class ScoreModel:
    mlp: nn.Mlp
    params: np.ndarray


def _draw(dataset, n, rng):
    if callable(dataset):
        return np.asarray(dataset(n, rng))
    data = np.asarray(dataset)
    return data[rng.integers(0, len(data), size=n)]


@dataclass
class Batch:
    x0: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------


class FiniteStateEngine:
    """Uniform or masked chain on a product space; the network outputs ``log s_hat(x, .)``."""

    name = "finite-state"

    def __init__(self, space: DiscreteSpace, dataset, T, max_events=10_000):
        self.space = space
        self.dataset = dataset
        self.T = T
        self.family = (build_masked_rate if space.masked else build_uniform_rate)(space)
        self.rates = self.family.constant
        self.conditional = ConditionalLawDiscrete(space)
        self.max_events = max_events

    def features(self, t, idx):
        states = self.space.decode(np.atleast_1d(idx))
        onehot = np.eye(self.space.alphabet)[states].reshape(len(states), -1)
        return np.concatenate([onehot, nn.time_embedding(t, self.T)], axis=1)

    def network(self, hidden=128, layers=5):
        return nn.Mlp.build(self.space.dims * self.space.alphabet + nn.TIME_DIM, self.space.size, hidden, layers)

    def lam_rows(self, idx):
        """``rates[x, y]`` for each sample state ``x``, with the diagonal zeroed."""
        idx = np.atleast_1d(idx)
        lam = self.rates.rates[idx].copy()
        lam[np.arange(idx.size), idx] = 0.0
        return lam

    def sample_batch(self, batch, time_sampler, rng):
        x0 = np.asarray(_draw(self.dataset, batch, rng), dtype=np.int64)
        t = np.asarray(time_sampler(batch, rng), dtype=np.float64)
        xt = self.conditional.sample(x0, t, rng)
        ratios = conditional_ratio_rows(self.conditional, x0, xt, t)
        return Batch(x0, t, xt, {"ratios": ratios, "lam": self.lam_rows(xt)})

    def terms(self, mlp, params, batch):
        log_rows = mlp.forward(params, self.features(batch.t, batch.xt))
        return discrete_sm_terms(log_rows, batch.extra["ratios"], batch.extra["lam"])

    def score(self, model: ScoreModel):
        """``(t, idx) -> s_hat(x, .)`` rows from a trained network."""
        return lambda t, idx: np.exp(model.mlp(model.params, self.features(np.full(len(idx), t), idx)))

    def exact_score(self, p0):
        """Rows of the true ratios ``p_t(y) / p_t(x)`` for data law ``p0``."""
        path = MarginalPath(self.family, DensityVector(p0), self.T)

        def rows(t, idx):
            p = path.at(t)
            here = p[np.atleast_1d(idx)][:, None]
            # states of zero mass are never occupied; their rows are arbitrary
            return np.where(here > 0, p[None, :] / np.where(here > 0, here, 1.0), 1.0)

        return rows

    def prior(self, n, rng):
        if self.space.masked:
            return np.zeros(n, dtype=np.int64)
        return rng.integers(0, self.space.size, size=n)

    def one_step(self, score, state, t_forward, kappa, rng):
        """Exponential-clock simulation of the frozen backward rates for time ``kappa``."""
        state = np.array(state, dtype=np.int64, copy=True)
        remaining = np.full(state.size, float(kappa))
        active = np.arange(state.size)
        for _ in range(self.max_events):
            if active.size == 0:
                return state
            rows = np.asarray(score(t_forward, state[active])) * self.lam_rows(state[active])
            total = rows.sum(axis=1)
            with np.errstate(divide="ignore"):
                wait = rng.exponential(1.0, size=active.size) / total
            jump = wait < remaining[active]
            active, rows, total, wait = active[jump], rows[jump], total[jump], wait[jump]
            cum = np.cumsum(rows, axis=1)
            u = rng.random(active.size) * total
            state[active] = np.minimum((cum <= u[:, None]).sum(axis=1), self.space.size - 1)
            remaining[active] -= wait
        raise InferenceError(f"more than {self.max_events} events in one step; rates too large")


class OuEngine:
    """``dx = -x/2 dt + dw`` in ``R^d``; the network outputs ``s_hat`` directly."""

    name = "ou"

    def __init__(self, dataset, T, dim=None):
        self.dataset = dataset
        self.T = T
        self.dim = dim if dim is not None else np.atleast_2d(np.asarray(dataset).reshape(len(dataset), -1)).shape[1]

    def features(self, t, x):
        return np.concatenate([np.atleast_2d(x), nn.time_embedding(t, self.T)], axis=1)

    def network(self, hidden=128, layers=5):
        return nn.Mlp.build(self.dim + nn.TIME_DIM, self.dim, hidden, layers)

    def sample_batch(self, batch, time_sampler, rng):
        x0 = np.asarray(_draw(self.dataset, batch, rng), dtype=np.float64).reshape(batch, self.dim)
        t = np.asarray(time_sampler(batch, rng), dtype=np.float64)
        xt, target = ou_conditional(x0, t, rng)
        return Batch(x0, t, xt, {"target": target})

    def terms(self, mlp, params, batch):
        s_hat = mlp.forward(params, self.features(batch.t, batch.xt))
        eye = np.broadcast_to(np.eye(self.dim), (len(batch.t), self.dim, self.dim))
        return diffusion_sm_terms(s_hat, batch.extra["target"], eye)

    def score(self, model: ScoreModel):
        return lambda t, x: model.mlp(model.params, self.features(np.full(len(x), t), x))

    def prior(self, n, rng):
        return rng.normal(size=(n, self.dim))

    def one_step(self, score, state, t_forward, kappa, rng):
        return backward_diffusion_step(state, t_forward, kappa, ou_fields, score, rng)


class GbmEngine:
    """Geometric Brownian motion; the network reads ``log x`` and outputs ``x * s_hat``.

    With ``u = x s_hat`` and ``v = x s`` the weighted loss
    ``1/2 (s_hat - s)^T diag(x) A diag(x) (s_hat - s)`` equals
    ``1/2 (u - v)^T A (u - v)``, which stays bounded as ``x -> 0``.
    States are kept in log space during sampling, so they stay positive.
    """

    name = "gbm"

    def __init__(self, spec: GbmSpec, dataset, T, prior_scale=np.sqrt(2.0)):
        self.spec = spec
        self.dataset = dataset
        self.T = T
        self.prior_scale = prior_scale
        self.dim = spec.dim

    def features(self, t, log_x):
        return np.concatenate([np.atleast_2d(log_x), nn.time_embedding(t, self.T)], axis=1)

    def network(self, hidden=128, layers=5):
        return nn.Mlp.build(self.dim + nn.TIME_DIM, self.dim, hidden, layers)

    def sample_batch(self, batch, time_sampler, rng):
        x0 = np.asarray(_draw(self.dataset, batch, rng), dtype=np.float64).reshape(batch, self.dim)
        t = np.asarray(time_sampler(batch, rng), dtype=np.float64)
        xt, score = gbm_conditional(self.spec, x0, t, rng)
        return Batch(x0, t, xt, {"target": xt * score})

    def terms(self, mlp, params, batch):
        u = mlp.forward(params, self.features(batch.t, np.log(batch.xt)))
        A = np.broadcast_to(self.spec.A, (len(batch.t), self.dim, self.dim))
        return diffusion_sm_terms(u, batch.extra["target"], A)

    def score(self, model: ScoreModel):
        """``(t, log y) -> y * s_hat``, the form used by the log-space stepper."""
        return lambda t, z: model.mlp(model.params, self.features(np.full(len(z), t), z))

    def prior(self, n, rng):
        """``|N(0, prior_scale^2 I)|``; exact zeros are redrawn."""
        y = np.abs(self.prior_scale * rng.normal(size=(n, self.dim)))
        while (y == 0).any():
            y[y == 0] = np.abs(self.prior_scale * rng.normal(size=int((y == 0).sum())))
        return y

    def one_step(self, score, state, t_forward, kappa, rng):
        z = gbm_backward_step_log(self.spec, np.log(state), t_forward, kappa, score, rng)
        y = np.exp(z)
        if not (np.isfinite(y).all() and (y > 0).all()):
            raise DiffusionError("backward state left (0, inf)")
        return y


class JumpEngine:
    """Compound-Poisson jumps on the unit torus; the network outputs a potential ``g``."""

    name = "jump"

    def __init__(self, spec: TorusJumpSpec, dataset, T, fourier_modes=16, n_kernel=4):
        self.spec = spec
        self.dataset = dataset
        self.T = T
        self.embedding = nn.FourierEmbedding(fourier_modes)
        self.n_kernel = n_kernel

    def features(self, t, x):
        return np.concatenate([self.embedding(np.atleast_2d(x)), nn.time_embedding(t, self.T)], axis=1)

    def network(self, hidden=128, layers=5):
        return nn.Mlp.build(self.embedding.dim(2) + nn.TIME_DIM, 1, hidden, layers)

    def sample_batch(self, batch, time_sampler, rng):
        draw = draw_jump_batch(self.spec, self.dataset, time_sampler, batch, self.n_kernel, rng)
        return Batch(draw.x0, draw.t, draw.xt, {"draw": draw})

    def _potential(self, mlp, params):
        def potential(t, x):
            return mlp.forward(params, self.features(t, x)).reshape(-1)

        return potential

    def terms(self, mlp, params, batch):
        return jump_batch_terms(self.spec, self._potential(mlp, params), batch.extra["draw"])

    def score(self, model: ScoreModel):
        """Potential ``(t, x) -> g``; the score is ``exp(g(y) - g(x))``."""
        return lambda t, x: model.mlp(model.params, self.features(np.atleast_1d(t), x)).reshape(-1)

    def prior(self, n, rng):
        return rng.random((n, 2))

    def one_step(self, score, state, t_forward, kappa, rng):
        return backward_jump_step(self.spec, score, state, t_forward, kappa, rng)[0]


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


def train(config: TrainConfig, engine, rng=None, checkpoint=None, init=None):
    """Minimize the engine's score-matching loss with Adam, one batch per epoch.

    Returns ``(ScoreModel, history)`` with one loss value per epoch.
    ``checkpoint(epoch, model)`` is called every ``config.checkpoint_every``
    epochs and once at the end. Non-finite losses abort with the offending
    ``t`` and ``x_t``.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    mlp = engine.network(config.hidden, config.layers)
    params = mlp.init(rng) if init is None else np.array(init, dtype=np.float64)
    adam = nn.AdamState.zeros(mlp.n_params, lr=config.lr)
    sampler = config.time_sampler()
    history = []
    for epoch in range(config.epochs):
        batch = engine.sample_batch(config.batch, sampler, rng)
        seen = {}

        def loss(p):
            seen["terms"] = engine.terms(mlp, p, batch)
            return seen["terms"].mean()

        try:
            value, grad = value_and_grad(loss, params)
        except FloatingPointError as err:
            terms = seen["terms"].data
            bad = int(np.flatnonzero(~np.isfinite(terms))[0]) if (~np.isfinite(terms)).any() else 0
            raise TrainingError(
                f"non-finite loss at epoch {epoch}: t={batch.t[bad]!r}, x_t={batch.xt[bad]!r}"
            ) from err
        if not np.isfinite(grad).all():
            raise TrainingError(f"non-finite gradient at epoch {epoch}")
        if config.lr_final is not None:
            adam = replace(adam, lr=config.learning_rate(epoch))
        params, adam = nn.adam_step(adam, params, grad)
        history.append(value)
        if checkpoint is not None and (epoch + 1) % config.checkpoint_every == 0 and epoch + 1 < config.epochs:
            checkpoint(epoch + 1, ScoreModel(mlp, params))
    model = ScoreModel(mlp, params)
    if checkpoint is not None:
        checkpoint(config.epochs, model)
    return model, history


def evaluate_loss(engine, model: ScoreModel, time_sampler, n, rng, chunk=4096):
    """Loss of a fixed model on ``n`` fresh samples (no gradient)."""
    total = 0.0
    for start in range(0, n, chunk):
        size = min(chunk, n - start)
        batch = engine.sample_batch(size, time_sampler, rng)
        total += float(engine.terms(model.mlp, model.params, batch).data.sum())
    return total / n


@dataclass
class Snapshots:
    """States after selected backward steps; ``times`` are backward times ``l kappa``."""

    times: np.ndarray
    states: list


def infer(grid: TimeGrid, engine, score, n=None, rng=None, initial=None, record=None):
    """Draw from the prior (or use ``initial``) and apply ``grid.steps`` backward steps.

    ``record`` lists the step indices to keep (``0`` is the prior draw);
    by default every step is kept.
    """
    rng = np.random.default_rng() if rng is None else rng
    state = engine.prior(n, rng) if initial is None else np.array(initial, copy=True)
    keep = set(range(grid.steps + 1)) if record is None else {int(r) for r in record}
    times, states = [], []
    if 0 in keep:
        times.append(0.0)
        states.append(np.array(state, copy=True))
    for step, t_forward in enumerate(grid.forward_times()):
        try:
            state = engine.one_step(score, state, t_forward, grid.kappa, rng)
        except (DiffusionError, JumpError, InferenceError, FloatingPointError) as err:
            raise InferenceError(f"backward step {step} (forward time {t_forward:.6g}) failed: {err}") from err
        if step + 1 in keep:
            times.append((step + 1) * grid.kappa)
            states.append(np.array(state, copy=True))
    return Snapshots(np.array(times), states)


# ---------------------------------------------------------------------------
# error decomposition on finite state spaces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorReport:
    truncation: float
    estimation: float
    numerical: float
    total: float

    @property
    def bound(self):
        return self.truncation + self.estimation


def frozen_backward_law(family, s_hat_at, q0, grid: TimeGrid, tol=1e-12):
    """Exact law of the grid sampler: rates frozen at each step's start, integrated exactly."""
    q = np.asarray(q0, dtype=np.float64)
    for t_forward in grid.forward_times():
        rates = backward_rate_matrix(family(t_forward), s_hat_at(t_forward)).rates
        q = integrate_linear(lambda s, r=rates: r, q, 0.0, grid.kappa, tol=tol)
    q = np.clip(q, 0.0, None)
    return q / q.sum()


def error_decomposition_report(family, p0, s_hat_at, q0, grid: TimeGrid, marginals=None):
    """Truncation, estimation and discretization parts of ``KL(p_0 || q_hat_T)``.

    ``truncation = KL(p_T || q_0)``, ``estimation`` is the path KL of the score
    estimate, ``total`` is the exact KL of the grid sampler's terminal law and
    ``numerical = total - truncation - estimation`` is the residual.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    marginals = MarginalPath(family, DensityVector(p0), grid.T) if marginals is None else marginals
    truncation = kl_divergence(marginals.at(grid.T), q0)
    estimation = exact_path_kl(family, None, s_hat_at, DensityVector(p0), grid.T, marginals=marginals)
    try:
        q_hat = frozen_backward_law(family, s_hat_at, q0, grid)
    except IntegrationError as err:
        raise InferenceError(f"backward law integration failed: {err}") from err
    total = kl_divergence(p0, q_hat)
    return ErrorReport(truncation, estimation, total - truncation - estimation, total)
