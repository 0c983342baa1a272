"""Training loop, early stopping and cross-variant model selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingError, ValidationError
from .maskgen import MaskTensor
from .model import DmmParams, LossBreakdown, elbo, reconstruct
from .numcore import AdamState, adam_step, no_grad
from .rng import KEY_TRAIN, stream

REGIMES = ("supervised", "unsupervised")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    beta: float = 1e-3
    gamma: float = 1e-3
    regime: str = "supervised"
    artificial_rate: float = 0.1
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        self.regime = self.regime.lower()
        if self.regime not in REGIMES:
            raise ValidationError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.beta < 0 or self.gamma < 0:
            raise ValidationError("beta and gamma must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValidationError("epochs, batch_size and patience must be positive")
        if self.lr < 0:
            raise ValidationError("learning rate must be nonnegative")
        if self.regime == "unsupervised" and not 0.0 < self.artificial_rate < 1.0:
            raise ValidationError("artificial mask rate must lie in (0, 1)")


@dataclass
class TrainHistory:
    train: list[LossBreakdown] = field(default_factory=list)
    val: list[LossBreakdown] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.train)

    def rows(self) -> list[dict]:
        out = []
        for split, losses in (("train", self.train), ("val", self.val)):
            for epoch, lb in enumerate(losses):
                out.append(dict(epoch=epoch, recon=lb.recon, kl_z=lb.kl_z, kl_c=lb.kl_c, total=lb.total, split=split))
        return out


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", getattr(x, "r", x)), dtype=np.float64)


def _targets(cfg: TrainConfig, x, r, truth, rng):
    """(visible mask, target mask, target values) for one regime.

    Supervised: the model sees the observed entries and is scored on the
    missing ones against ``truth``.  Unsupervised: a fraction of the observed
    entries is hidden and the model is scored on recovering them.
    """
    if cfg.regime == "supervised":
        return r, 1.0 - r, truth
    hide = (rng.random(r.shape) < cfg.artificial_rate) & (r > 0)
    visible = np.where(hide, 0.0, r)
    return visible, hide.astype(np.float64), x


def _aggregate(parts: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    w = sum(n for _, n in parts)
    vals = [sum(getattr(lb, k) * n for lb, n in parts) / w for k in ("recon", "kl_z", "kl_c", "total")]
    return LossBreakdown(*vals)


def evaluate_loss(params: DmmParams, x, visible, target_mask, target, rng, batch_size: int = 1024) -> LossBreakdown:
    """Loss over a whole split, without gradients, in large batches."""
    parts = []
    with no_grad():
        for lo in range(0, x.shape[0], batch_size):
            sl = slice(lo, lo + batch_size)
            n = int(target_mask[sl].sum())
            if n == 0:
                continue
            lb = elbo(params, x[sl], visible[sl], target_mask[sl], rng, target=target[sl])
            parts.append((LossBreakdown(lb.recon, lb.kl_z, lb.kl_c, lb.total), n))
    if not parts:
        raise ContractError("validation split has no scored entries")
    return _aggregate(parts)


def train(
    params: DmmParams,
    data,
    mask,
    truth=None,
    cfg: TrainConfig | None = None,
    val_idx: np.ndarray | None = None,
    on_epoch=None,
) -> tuple[DmmParams, TrainHistory]:
    """Fit ``params`` (in place) and return the best-validation-epoch copy.

    ``val_idx`` selects validation sequences; by default the last fifth of the
    batch (at most 1,024 sequences) is held out.  In the unsupervised regime
    ``truth`` is never read.
    """
    cfg = cfg or TrainConfig()
    x = _arr(data)
    r = _arr(mask)
    if x.shape != r.shape:
        raise ValidationError(f"data {x.shape} and mask {r.shape} shapes differ")
    if cfg.regime == "supervised":
        if truth is None:
            raise ValidationError("supervised training needs ground-truth values")
        truth = _arr(truth)
        if truth.shape != x.shape:
            raise ValidationError("truth shape differs from data")
    else:
        truth = None
    params.config.beta, params.config.gamma = cfg.beta, cfg.gamma
    # observed entries only; missing positions never feed the model
    x = np.where(r > 0, x, 0.0)

    n_seq = x.shape[0]
    if val_idx is None:
        n_val = min(1024, max(1, n_seq // 5))
        val_idx = np.arange(n_seq - n_val, n_seq)
    val_idx = np.asarray(val_idx)
    train_idx = np.setdiff1d(np.arange(n_seq), val_idx)
    if train_idx.size == 0:
        raise ValidationError("no training sequences left after the validation split")

    rng = stream(cfg.seed, KEY_TRAIN)
    # the validation targets are fixed once so epochs are comparable
    xv, rv = x[val_idx], r[val_idx]
    tv = truth[val_idx] if truth is not None else None
    v_vis, v_tm, v_tgt = _targets(cfg, xv, rv, tv, stream(cfg.seed, KEY_TRAIN, 1))
    v_seed = int(stream(cfg.seed, KEY_TRAIN, 2).integers(2**63))

    weights = params.parameters()
    opt = AdamState.for_params(weights, lr=cfg.lr)
    history = TrainHistory()
    best_state, best_total, stale = params.state(), math.inf, 0
    xt, rt = x[train_idx], r[train_idx]
    tt = truth[train_idx] if truth is not None else None

    for epoch in range(cfg.epochs):
        vis, tm, tgt = _targets(cfg, xt, rt, tt, rng)
        order = rng.permutation(train_idx.size)
        parts = []
        for step, lo in enumerate(range(0, order.size, cfg.batch_size)):
            b = order[lo : lo + cfg.batch_size]
            n = int(tm[b].sum())
            if n == 0:
                continue
            lb = elbo(params, xt[b], vis[b], tm[b], rng, target=tgt[b])
            if not math.isfinite(lb.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            for w in weights:
                w.grad = None
            lb.graph.backward()
            try:
                adam_step(opt, weights, [w.grad for w in weights])
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            parts.append((LossBreakdown(lb.recon, lb.kl_z, lb.kl_c, lb.total), n))
        history.train.append(_aggregate(parts))
        val = evaluate_loss(params, xv, v_vis, v_tm, v_tgt, np.random.default_rng(v_seed))
        if not math.isfinite(val.total):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.val.append(val)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if val.total < best_total:
            best_total, best_state, stale = val.total, params.state(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    params.load_state(best_state)
    return params, history


def validation_errors(params: DmmParams, x, mask, truth) -> tuple[float, float]:
    """(MSE, MAE) of the model's reconstruction at the missing positions."""
    x, r, truth = _arr(x), _arr(mask), _arr(truth)
    miss = r == 0
    if not miss.any():
        raise ValidationError("no missing entries to score")
    with np.errstate(all="ignore"):
        x_hat = reconstruct(params, np.where(r > 0, x, 0.0), r)
        err = x_hat[miss] - truth[miss]
        return float(np.mean(err**2)), float(np.mean(np.abs(err)))


def select_model(candidates, val_data, val_mask, val_truth) -> DmmParams:
    """Candidate with the lowest validation MSE at missing positions; ties go to
    lower MAE, then to MAR before MNAR, then to list order."""
    if not candidates:
        raise ValidationError("no candidates to select from")
    order = {"MAR": 0, "MNAR": 1}
    scored = []
    for pos, cand in enumerate(candidates):
        params = cand[0] if isinstance(cand, tuple) else cand
        mse, mae = validation_errors(params, val_data, val_mask, val_truth)
        if math.isnan(mse) or math.isnan(mae):
            continue
        scored.append(((mse, mae, order.get(params.variant, 2), pos), params))
    if not scored:
        raise TrainingError("every candidate has a NaN validation error")
    return min(scored, key=lambda s: s[0])[1]
