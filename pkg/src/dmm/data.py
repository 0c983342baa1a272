"""Containers for series windows and per-channel normalisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass
class SeriesBatch:
    """Windows of shape (batch, T, channels) plus the statistics that map
    them back to raw units via ``values * std + mean``."""

    values: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"series must be (batch, T, channels), got {self.values.shape}")
        c = self.values.shape[2]
        self.mean = np.zeros(c) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(c) if self.std is None else np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (c,) or self.std.shape != (c,):
            raise ShapeError("normalisation statistics must have one entry per channel")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def __len__(self) -> int:
        return self.values.shape[0]

    def subset(self, idx) -> "SeriesBatch":
        return SeriesBatch(self.values[idx], self.mean, self.std)

    def raw(self) -> np.ndarray:
        return self.values * self.std + self.mean


def fit_normalizer(values: np.ndarray, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over observed entries (all entries if no mask)."""
    values = np.asarray(values, dtype=np.float64)
    m = np.ones_like(values) if mask is None else np.asarray(mask, dtype=np.float64)
    flat_v = values.reshape(-1, values.shape[-1])
    flat_m = m.reshape(-1, values.shape[-1])
    count = flat_m.sum(axis=0)
    if np.any(count == 0):
        raise ValidationError(f"channels {np.flatnonzero(count == 0).tolist()} have no observed entries")
    v0 = np.where(flat_m > 0, flat_v, 0.0)
    mean = v0.sum(axis=0) / count
    var = (np.where(flat_m > 0, flat_v - mean, 0.0) ** 2).sum(axis=0) / count
    std = np.sqrt(var)
    std[std < 1e-12] = 1.0
    return mean, std


def normalize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> SeriesBatch:
    return SeriesBatch((np.asarray(values, dtype=np.float64) - mean) / std, mean, std)
