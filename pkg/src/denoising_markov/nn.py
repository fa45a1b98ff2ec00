"""Small feed-forward networks, input embeddings, Adam and checkpoints.

Parameters live in one flat float64 vector; :class:`Mlp` only records the
layer sizes and slices that vector. Inputs are plain arrays (embeddings carry
no gradient), so only the parameters flow through the autodiff graph.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"DMMK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FourierEmbedding:
    """``u -> (cos 2 pi k u, sin 2 pi k u)`` for ``k = 1..modes`` on every axis."""

    modes: int

    def __call__(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        k = np.arange(1, self.modes + 1)
        phase = 2 * np.pi * u[:, :, None] * k  # (n, axes, modes)
        return np.concatenate([np.cos(phase), np.sin(phase)], axis=2).reshape(len(u), -1)

    def dim(self, axes):
        return 2 * self.modes * axes


TIME_FREQUENCIES = 4


def time_embedding(t, T):
    """``t/T`` followed by ``sin, cos(2^j pi t/T)`` for ``j < 4``."""
    s = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freq = np.pi * 2.0 ** np.arange(TIME_FREQUENCIES)
    return np.concatenate([s[:, None], np.sin(s[:, None] * freq), np.cos(s[:, None] * freq)], axis=1)


TIME_DIM = 1 + 2 * TIME_FREQUENCIES


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mlp:
    """Fully connected network with SiLU between layers and a linear output."""

    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError("an MLP needs at least an input and an output size")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def build(cls, in_dim, out_dim, hidden=128, layers=5):
        """``layers`` linear maps, ``layers - 1`` hidden layers of width ``hidden``."""
        return cls((in_dim,) + (hidden,) * (layers - 1) + (out_dim,))

    @property
    def n_params(self):
        return sum((a + 1) * b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def init(self, rng):
        """Weights ``N(0, 2 / fan_in)``, biases zero."""
        parts = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            parts.append(rng.normal(scale=np.sqrt(2.0 / a), size=a * b))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def _slices(self):
        offset = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            yield (offset, offset + a * b, a, b), (offset + a * b, offset + a * b + b)
            offset += (a + 1) * b

    def forward(self, params, inputs):
        """Evaluate on ``inputs`` of shape ``(n, sizes[0])``; ``params`` may be a tensor."""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        if inputs.shape[1] != self.sizes[0]:
            raise ValueError(f"input has {inputs.shape[1]} features, network expects {self.sizes[0]}")
        p = params if isinstance(params, Tensor) else Tensor(params)
        if p.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {p.shape}")
        h = Tensor(inputs)
        layers = list(self._slices())
        for i, ((w0, w1, a, b), (b0, b1)) in enumerate(layers):
            h = h @ p[w0:w1].reshape(a, b) + p[b0:b1]
            if i < len(layers) - 1:
                h = h.silu()
        return h

    def __call__(self, params, inputs):
        return self.forward(np.asarray(params), inputs).data


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kwargs):
        return cls(np.zeros(n), np.zeros(n), **kwargs)


def adam_step(state: AdamState, params, gradient):
    """One bias-corrected Adam update; returns ``(params', state')``."""
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * gradient
    v = state.beta2 * state.v + (1 - state.beta2) * gradient**2
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=step)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def config_hash(config):
    """SHA-256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, mlp: Mlp, params, config=None, extra=None):
    """Write ``path`` (binary) and ``path.json`` (sidecar with the config hash)."""
    path = Path(path)
    params = np.asarray(params, dtype="<f8")
    if params.shape != (mlp.n_params,):
        raise CheckpointError("parameter count does not match the layer sizes")
    header = MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(mlp.sizes))
    header += struct.pack(f"<{len(mlp.sizes)}I", *mlp.sizes)
    path.write_bytes(header + params.tobytes())
    sidecar = {"sizes": list(mlp.sizes), "n_params": mlp.n_params}
    if config is not None:
        sidecar["config_hash"] = config_hash(config)
        sidecar["config"] = config
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Return ``(mlp, params, sidecar)``; the sidecar is ``{}`` when absent."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n_layers}I", blob, 12)
    mlp = Mlp(sizes)
    start = 12 + 4 * n_layers
    params = np.frombuffer(blob, dtype="<f8", offset=start).astype(np.float64)
    if params.size != mlp.n_params:
        raise CheckpointError("truncated checkpoint")
    side = Path(str(path) + ".json")
    sidecar = json.loads(side.read_text()) if side.exists() else {}
    return mlp, params, sidecar
