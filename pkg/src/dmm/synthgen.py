"""Synthetic series with known latent states.

Latents follow a lag-L leaky-ReLU transition with instantaneous
upper-triangular couplings and noise entering both multiplicatively and
additively; observations are an invertible leaky-ReLU MLP of the latents.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import SeriesBatch
from .errors import GenerationError, ShapeError
from .numcore import MlpParams, mlp_forward_np, parameter
from .rng import KEY_LATENT, KEY_MIXING, stream

NoiseLaw = Callable[[np.random.Generator, tuple], np.ndarray]

# sequences per independent RNG stream; parallel workers split on these chunks
CHUNK = 1024
LEAK = 0.2


def standard_normal(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.standard_normal(shape)


def zero_noise(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return np.zeros(shape)


W_A = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])


def v_chain(n: int) -> np.ndarray:
    """Instantaneous coupling with V[i-1, i] = 1 and zeros elsewhere."""
    v = np.zeros((n, n))
    for i in range(1, n):
        v[i - 1, i] = 1.0
    return v


@dataclass
class GenProcessSpec:
    n: int = 3
    T: int = 5
    L: int = 1
    W: np.ndarray = field(default_factory=lambda: W_A.copy())
    V: np.ndarray = field(default_factory=lambda: v_chain(3))
    mixing_widths: tuple[int, ...] = (3, 3, 3)
    noise: NoiseLaw = standard_normal
    seed: int = 0

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.mixing_widths = tuple(int(w) for w in self.mixing_widths)
        n = self.n
        if self.W.shape != (n, n) or self.V.shape != (n, n):
            raise ShapeError(f"W and V must be {n}x{n}")
        if np.any(np.tril(self.V) != 0.0):
            raise ShapeError("V may only have entries above the diagonal")
        if self.L < 1:
            raise ShapeError("lag must be at least 1")
        if self.T <= self.L:
            raise ShapeError("sequence length must exceed the lag")
        w = self.mixing_widths
        if len(w) < 2 or w[0] != n or w[-1] != n:
            raise ShapeError(f"mixing widths must start and end with {n}, got {w}")

    @classmethod
    def dataset_a(cls, seed: int = 0, **kw) -> "GenProcessSpec":
        return cls(n=3, W=W_A.copy(), V=v_chain(3), seed=seed, **kw)


@dataclass
class LatentTrajectory:
    z: np.ndarray
    c_truth: np.ndarray | None = None


def _latent_chunk(spec: GenProcessSpec, eps: np.ndarray) -> np.ndarray:
    b, t_len, n = eps.shape
    z = np.zeros_like(eps)
    z[:, : spec.L] = eps[:, : spec.L]
    for t in range(spec.L, t_len):
        drive = z[:, t - spec.L] @ spec.W.T
        drive = np.where(drive > 0.0, drive, LEAK * drive)
        for i in range(n):
            inst = z[:, t, :i] @ spec.V[:i, i] if i > 0 else 0.0
            z[:, t, i] = (drive[:, i] + inst) * eps[:, t, i] + eps[:, t, i]
    return z


def gen_latent_sequence(spec: GenProcessSpec, batch: int) -> LatentTrajectory:
    """Sample ``batch`` latent trajectories of shape (batch, T, n).

    Sequences are produced in chunks of :data:`CHUNK`, each from its own
    stream keyed by chunk index.
    """
    if batch < 1:
        raise ShapeError("batch must be at least 1")
    parts = []
    for k, start in enumerate(range(0, batch, CHUNK)):
        size = min(CHUNK, batch - start)
        rng = stream(spec.seed, KEY_LATENT, k)
        eps = np.asarray(spec.noise(rng, (size, spec.T, spec.n)), dtype=np.float64)
        parts.append(_latent_chunk(spec, eps))
    return LatentTrajectory(np.concatenate(parts, axis=0))


def gen_mixing(spec: GenProcessSpec, max_tries: int = 100) -> MlpParams:
    """Random leaky-ReLU MLP whose weight matrices are all well away from singular."""
    rng = stream(spec.seed, KEY_MIXING)
    widths = spec.mixing_widths
    layers = []
    for k in range(len(widths) - 1):
        fan_in, fan_out = widths[k], widths[k + 1]
        if fan_in != fan_out:
            raise GenerationError("mixing layers must be square to stay invertible")
        bound = 1.0 / np.sqrt(fan_in)
        for _ in range(max_tries):
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if np.linalg.svd(w, compute_uv=False).min() > 1e-6:
                break
        else:
            raise GenerationError(f"layer {k}: no full-rank weight after {max_tries} draws")
        b = rng.uniform(-bound, bound, size=(fan_out,))
        layers.append((parameter(w), parameter(b)))
    return MlpParams(layers, slope=LEAK)


def mix(mixing: MlpParams, z: np.ndarray) -> np.ndarray:
    return mlp_forward_np(mixing, z)


def generate_dataset(
    spec: GenProcessSpec, batch: int, mixing: MlpParams | None = None
) -> tuple[SeriesBatch, LatentTrajectory]:
    latents = gen_latent_sequence(spec, batch)
    mixing = gen_mixing(spec) if mixing is None else mixing
    x = mix(mixing, latents.z)
    if not np.all(np.isfinite(x)):
        raise GenerationError("non-finite observations generated")
    return SeriesBatch(x), latents


def train_val_split(n_total: int, n_val: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays for (train, validation); validation is the last ``n_val``."""
    n_val = min(n_val, max(n_total // 5, 1)) if n_total <= n_val else n_val
    idx = np.arange(n_total)
    return idx[: n_total - n_val], idx[n_total - n_val:]
