"""Imputation error, latent identifiability (MCC) and the mean baseline."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import SeriesBatch
from .errors import ShapeError, ValidationError
from .model import DmmParams, posterior_means, reconstruct

REPORT_FIELDS = ("dataset", "mechanism", "ratio", "variant", "regime", "mse", "mae", "mcc_z", "mcc_c", "seed")


@dataclass
class MetricsReport:
    mse: float
    mae: float
    mcc_z: float | None = None
    mcc_c: float | None = None
    n_eval: int = 0

    def __post_init__(self):
        if not (self.mse >= 0 and self.mae >= 0):
            raise ValidationError(f"errors must be nonnegative, got mse={self.mse}, mae={self.mae}")
        for name in ("mcc_z", "mcc_c"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0 + 1e-12:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.n_eval <= 0:
            raise ValidationError("a report needs at least one scored entry")

    def row(self, **context) -> dict:
        d = {k: context.get(k, "") for k in REPORT_FIELDS}
        d.update({k: v for k, v in asdict(self).items() if k in REPORT_FIELDS})
        for k in ("mcc_z", "mcc_c"):
            if d[k] is None:
                d[k] = ""
        return d


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", getattr(x, "r", x)), dtype=np.float64)


def impute(params: DmmParams, x, mask) -> SeriesBatch:
    """Observed entries verbatim; missing entries from the decoder applied to
    posterior means."""
    values, r = _values(x), _values(mask)
    if values.shape != r.shape:
        raise ShapeError(f"data {values.shape} and mask {r.shape} shapes differ")
    if values.ndim != 3 or values.shape[2] != params.config.n_obs:
        raise ShapeError(f"model was trained on {params.config.n_obs} channels, data has shape {values.shape}")
    obs = r > 0
    filled = np.where(obs, values, 0.0)
    x_hat = reconstruct(params, filled, r)
    out = np.where(obs, values, x_hat)
    if isinstance(x, SeriesBatch):
        return SeriesBatch(out, x.mean, x.std)
    return SeriesBatch(out)


def imputation_metrics(x_true, x_imputed, mask) -> tuple[float, float]:
    """(MSE, MAE) over missing entries only."""
    a, b, r = _values(x_true), _values(x_imputed), _values(mask)
    if not a.shape == b.shape == r.shape:
        raise ShapeError(f"shapes differ: {a.shape}, {b.shape}, {r.shape}")
    miss = r == 0
    if not miss.any():
        raise ValidationError("mask has no missing entries to score")
    err = a[miss] - b[miss]
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def correlation_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|Pearson| between every column of ``a`` and every column of ``b``."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    sa = np.sqrt((a * a).sum(axis=0))
    sb = np.sqrt((b * b).sum(axis=0))
    for name, s in (("true", sa), ("estimated", sb)):
        bad = np.flatnonzero(s <= 1e-12 * max(1.0, float(s.max(initial=0.0))))
        if bad.size:
            raise ValidationError(f"{name} component {int(bad[0])} has zero variance")
    return np.abs((a.T @ b) / np.outer(sa, sb))


def mcc(true_latents, est_latents) -> float:
    """Mean absolute Pearson correlation after the best one-to-one matching."""
    t, e = _values(true_latents), _values(est_latents)
    if t.shape != e.shape:
        raise ShapeError(f"latent shapes differ: {t.shape} vs {e.shape}")
    d = t.shape[-1]
    corr = correlation_matrix(t.reshape(-1, d), e.reshape(-1, d))
    rows, cols = linear_sum_assignment(corr, maximize=True)
    return float(np.clip(corr[rows, cols].mean(), 0.0, 1.0))


def mean_baseline(x, mask) -> SeriesBatch:
    """Missing entries replaced by their channel's observed mean."""
    values, r = _values(x), _values(mask)
    if values.shape != r.shape:
        raise ShapeError("data and mask shapes differ")
    obs = r > 0
    counts = obs.sum(axis=(0, 1))
    if np.any(counts == 0):
        raise ValidationError(f"channel {int(np.flatnonzero(counts == 0)[0])} has no observed entries")
    means = np.where(obs, values, 0.0).sum(axis=(0, 1)) / counts
    return SeriesBatch(np.where(obs, values, means))


def evaluate(params: DmmParams, x, mask, truth, z_true=None, c_true=None) -> MetricsReport:
    """Imputation error at missing entries plus MCC when ground truth exists."""
    r = _values(mask)
    imputed = impute(params, x, r)
    mse, mae = imputation_metrics(truth, imputed, r)
    mcc_z = mcc_c = None
    if z_true is not None or c_true is not None:
        mu_z, mu_c = posterior_means(params, np.where(r > 0, _values(x), 0.0), r)
        if z_true is not None:
            mcc_z = mcc(z_true, mu_z)
        if c_true is not None and _values(c_true).shape == mu_c.shape:
            mcc_c = mcc(c_true, mu_c)
    mcc_z = None if mcc_z is None or math.isnan(mcc_z) else mcc_z
    return MetricsReport(mse, mae, mcc_z, mcc_c, int((r == 0).sum()))
