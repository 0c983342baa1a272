"""Observation masks under MCAR, MAR, MNAR and mixed mechanisms.

Masks use 1 for observed and 0 for missing.  The MAR and MNAR generators
score entries with a frozen random MLP and return those raw scores as the
ground-truth missing-cause signal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SeriesBatch
from .errors import MaskError, ShapeError, ValidationError
from .numcore import MlpParams, mlp_forward_np
from .rng import KEY_MASK, KEY_MASK_MLP, stream

MECHANISMS = ("MCAR", "MAR", "MNAR", "MNAR-future", "mixed")

MIN_SCORE_STD = 0.1
PROBE_ROWS = 512
MLP_HIDDEN = 32


@dataclass
class MaskTensor:
    r: np.ndarray
    mechanism: str = "MCAR"

    def __post_init__(self):
        r = np.asarray(self.r)
        if r.ndim != 3:
            raise ShapeError(f"mask must be (batch, T, channels), got {r.shape}")
        if not np.all((r == 0) | (r == 1)):
            raise ValidationError("mask entries must be 0 or 1")
        self.r = r.astype(np.int8)
        if self.mechanism not in MECHANISMS:
            raise ValidationError(f"unknown mechanism {self.mechanism!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.r.shape

    @property
    def achieved_rate(self) -> float:
        return 1.0 - float(self.r.mean())

    @property
    def observed(self) -> np.ndarray:
        return self.r.astype(bool)

    @property
    def missing(self) -> np.ndarray:
        return ~self.r.astype(bool)

    def subset(self, idx) -> "MaskTensor":
        return MaskTensor(self.r[idx], self.mechanism)


@dataclass
class MaskMlp:
    """Frozen scoring network used as the missingness mechanism."""

    net: MlpParams
    seed: int
    attempt: int

    def scores(self, inputs: np.ndarray) -> np.ndarray:
        """Per-channel standardised MLP outputs, so one global ranking
        spreads missingness across channels instead of emptying one."""
        return _standardize(mlp_forward_np(self.net, inputs))


def make_mask_mlp(seed: int, n_in: int, n_out: int, max_attempts: int = 100) -> MaskMlp:
    """Draw seeded MLPs until their scores on a probe batch are dispersed
    (std > :data:`MIN_SCORE_STD`), which rules out near-constant mechanisms."""
    probe = stream(seed, KEY_MASK_MLP, n_in, n_out).standard_normal((PROBE_ROWS, n_in))
    for attempt in range(max_attempts):
        rng = stream(seed, KEY_MASK_MLP, n_in, n_out, attempt + 1)
        net = MlpParams.init(rng, [n_in, MLP_HIDDEN, n_out])
        if mlp_forward_np(net, probe).std(axis=0).min() > MIN_SCORE_STD:
            return MaskMlp(net, seed, attempt)
    raise MaskError(f"no dispersed mask MLP found in {max_attempts} attempts")


def _standardize(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(-1, x.shape[-1])
    std = flat.std(axis=0)
    std[std < 1e-12] = 1.0
    return (x - flat.mean(axis=0)) / std


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, SeriesBatch) else np.asarray(x, dtype=np.float64)


def _check_rate(rate: float, open_low: bool) -> None:
    if rate >= 1.0 or rate < 0.0 or (open_low and rate <= 0.0):
        bound = "(0, 1)" if open_low else "[0, 1)"
        raise ValidationError(f"missing rate must lie in {bound}, got {rate}")


def mask_mcar(shape: tuple[int, int, int], rate: float, seed: int) -> MaskTensor:
    """Each entry missing independently with probability ``rate``."""
    _check_rate(rate, open_low=False)
    rng = stream(seed, KEY_MASK, 0)
    r = (rng.random(shape) >= rate).astype(np.int8)
    return MaskTensor(r, "MCAR")


def provisional_rate(rate: float) -> float:
    """Fraction dropped by the random first-stage mask before the MLP filter."""
    return 0.5 * (1.0 + rate)


def mask_mar(x, rate: float, seed: int, tol: float = 0.01) -> tuple[MaskTensor, np.ndarray]:
    """Missing-at-random mask.

    A random provisional mask drops a fraction of entries; a frozen MLP scores
    every entry from the provisionally observed values at the same step, and an
    entry goes missing only if it was provisionally dropped AND the MLP flags
    it.  A dropped entry is zero-filled before scoring, so the final
    missingness never depends on the missing value itself.

    The MLP flags the round(rate*N) highest-scoring dropped entries.  Steps
    where every channel was dropped all receive the same score, so flagging
    is done by ranking (ties to the lower flat index) rather than by a bare
    threshold, which could not split such a plateau.
    """
    _check_rate(rate, open_low=True)
    values = _values(x)
    c = values.shape[2]
    rng = stream(seed, KEY_MASK, 1)
    r_hat = (rng.random(values.shape) >= provisional_rate(rate)).astype(np.int8)
    x_obs = _standardize(values) * r_hat
    mlp = make_mask_mlp(seed, 2 * c, c)
    scores = mlp.scores(np.concatenate([x_obs, r_hat], axis=-1))

    k = int(np.floor(rate * scores.size + 0.5))
    dropped = np.flatnonzero(r_hat.reshape(-1) == 0)
    if dropped.size < k:
        raise MaskError(f"provisional mask dropped {dropped.size} entries, {k} needed")
    order = np.argsort(-scores.reshape(-1)[dropped], kind="stable")
    r_hat_o = np.ones(scores.size, dtype=np.int8)
    r_hat_o[dropped[order[:k]]] = 0
    r = combine_masks(r_hat, r_hat_o.reshape(scores.shape)).astype(np.int8)
    mask = MaskTensor(r, "MAR")
    if abs(mask.achieved_rate - rate) > tol:
        raise MaskError(f"MAR calibration reached {mask.achieved_rate:.4f} for target {rate}")
    return mask, scores


def combine_masks(r_hat: np.ndarray, r_hat_o: np.ndarray) -> np.ndarray:
    """Missing only where both the provisional mask and the MLP mask say missing."""
    return 1 - (1 - np.asarray(r_hat)) * (1 - np.asarray(r_hat_o))


def _shifted(values: np.ndarray, lag: int) -> np.ndarray:
    """values[:, t - lag] at position t, zero where t - lag is out of range."""
    out = np.zeros_like(values)
    t_len = values.shape[1]
    if lag > 0:
        out[:, lag:] = values[:, : t_len - lag]
    elif lag < 0:
        out[:, : t_len + lag] = values[:, -lag:]
    else:
        out[:] = values
    return out


def rank_mask(scores: np.ndarray, rate: float) -> np.ndarray:
    """Mask the round(rate*N) highest scores; ties go to the lower flat index."""
    flat = scores.reshape(-1)
    k = int(np.floor(rate * flat.size + 0.5))
    order = np.argsort(-flat, kind="stable")
    r = np.ones(flat.size, dtype=np.int8)
    r[order[:k]] = 0
    return r.reshape(scores.shape)


def mask_mnar(x, rate: float, seed: int, future_dependent: bool = False) -> tuple[MaskTensor, np.ndarray]:
    """Missing-not-at-random mask.

    Scores at step t come from the full previous step x_{t-1} (zero before the
    first step), or from x_{t-1}, x_t and x_{t+1} when ``future_dependent``.
    The top-scoring entries are masked, so the rate is exact up to rounding.
    """
    _check_rate(rate, open_low=True)
    values = _values(x)
    if values.shape[1] < 2:
        raise ShapeError("MNAR masks need at least two time steps")
    c = values.shape[2]
    z = _standardize(values)
    if future_dependent:
        inputs = np.concatenate([_shifted(z, 1), z, _shifted(z, -1)], axis=-1)
    else:
        inputs = _shifted(z, 1)
    mlp = make_mask_mlp(seed, inputs.shape[-1], c)
    scores = mlp.scores(inputs)
    mech = "MNAR-future" if future_dependent else "MNAR"
    return MaskTensor(rank_mask(scores, rate), mech), scores


def partition_sizes(total: int, ratios) -> list[int]:
    """Largest-remainder split of ``total`` items by ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    ideal = ratios * total
    sizes = np.floor(ideal).astype(int)
    short = total - sizes.sum()
    order = np.argsort(-(ideal - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes.tolist()


def mask_mixed(x, rate: float, seed: int, ratios=(1 / 3, 1 / 3, 1 / 3)) -> MaskTensor:
    """Split the batch into consecutive MCAR, MAR and MNAR blocks by ``ratios``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError("ratios must be three nonnegative proportions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {sum(ratios)}")
    values = _values(x)
    sizes = partition_sizes(values.shape[0], ratios)
    bounds = np.cumsum([0] + sizes)
    parts = []
    for kind, lo, hi in zip(("MCAR", "MAR", "MNAR"), bounds[:-1], bounds[1:]):
        if hi == lo:
            continue
        chunk = values[lo:hi]
        if kind == "MCAR":
            parts.append(mask_mcar(chunk.shape, rate, seed).r)
        elif kind == "MAR":
            parts.append(mask_mar(chunk, rate, seed)[0].r)
        else:
            parts.append(mask_mnar(chunk, rate, seed)[0].r)
    mech = "MCAR" if sizes[1] == sizes[2] == 0 else "mixed"
    return MaskTensor(np.concatenate(parts, axis=0), mech)


def parse_mechanism(text: str) -> tuple[str, tuple[float, float, float] | None]:
    """'mcar' | 'mar' | 'mnar' | 'mnar-future' | 'mixed:a:b:c' (ratios normalised)."""
    t = text.strip().lower()
    simple = {"mcar": "MCAR", "mar": "MAR", "mnar": "MNAR", "mnar-future": "MNAR-future"}
    if t in simple:
        return simple[t], None
    if t.startswith("mixed:"):
        try:
            parts = [float(p) for p in t.split(":")[1:]]
        except ValueError as exc:
            raise ValidationError(f"bad mixture ratios in {text!r}") from exc
        if len(parts) != 3 or any(p < 0 for p in parts) or sum(parts) <= 0:
            raise ValidationError(f"mixed needs three nonnegative ratios, got {text!r}")
        s = sum(parts)
        return "mixed", tuple(p / s for p in parts)
    raise ValidationError(f"unknown mechanism {text!r}")


def make_mask(x, mechanism: str, rate: float, seed: int) -> tuple[MaskTensor, np.ndarray | None]:
    """Dispatch on a mechanism string; returns (mask, ground-truth scores or None)."""
    mech, ratios = parse_mechanism(mechanism)
    values = _values(x)
    if mech == "MCAR":
        return mask_mcar(values.shape, rate, seed), None
    if mech == "MAR":
        return mask_mar(values, rate, seed)
    if mech == "MNAR":
        return mask_mnar(values, rate, seed)
    if mech == "MNAR-future":
        return mask_mnar(values, rate, seed, future_dependent=True)
    _check_rate(rate, open_low=True)
    return mask_mixed(values, rate, seed, ratios), None
