"""Acceptance criteria 1-12, one test each, each printing a PASS/FAIL line.

Criteria 6-11 share trained cells (dataset A, 10,000 training sequences,
three seeds) built lazily and cached for the module, so the full file takes
a couple of hours on one core.  ``DMM_ACCEPT_QUICK=1`` shrinks the cells to
a plumbing dry run; thresholds are unchanged, so quick-mode verdicts on 6-11
mean nothing.
"""
import itertools
import math
import os
import statistics
import time
from contextlib import contextmanager, nullcontext
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

import dmm.model as model_mod
from dmm.cli import main as cli_main
from dmm.experiment import CellConfig, run_cell, synthetic_split
from dmm.io import read_series_csv
from dmm.maskgen import _standardize, mask_mar, mask_mcar, mask_mnar
from dmm.metrics import mcc
from dmm.model import (
    ModelConfig,
    elbo,
    encode_z,
    flow_noise,
    init_params,
    kl_per_sequence,
    mnar_conditioning,
    prior_logp_c,
    prior_logp_z,
)
from dmm.numcore import MlpStack, Tensor, parameter
from dmm.synthgen import GenProcessSpec, generate_dataset
from dmm.train import TrainConfig, select_model

VERDICTS: dict[int, str] = {}
QUICK = os.environ.get("DMM_ACCEPT_QUICK") == "1"
SEEDS = (0, 1, 2)
RATIOS = (0.2, 0.4, 0.6)
MATCHED = {"mar": "MAR", "mnar": "MNAR"}
OTHER = {"MAR": "MNAR", "MNAR": "MAR"}
DATA = os.path.join(os.path.dirname(__file__), "data", "co2_weekly.csv")


def verdict(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[k] = line
    print(line)
    assert ok, line


def median(xs):
    return statistics.median(xs)


# -- shared trained cells -------------------------------------------------------------------------

@lru_cache(maxsize=None)
def cell(mechanism: str, ratio: float, variant: str, seed: int, beta: float = 1e-3, gamma: float = 1e-3):
    tcfg = TrainConfig(beta=beta, gamma=gamma, seed=seed)
    n_train, n_val = 10_000, 1024
    if QUICK:
        tcfg = replace(tcfg, epochs=1)
        n_train, n_val = 256, 128
    return run_cell(CellConfig(mechanism, ratio, variant, seed, n_train, n_val, tcfg))


def mcc_z(*key):
    return cell(*key).report.mcc_z


# -- 1 gradients ------------------------------------------------------------------------------------

@contextmanager
def frozen_conditioning(cond):
    """Hold the MNAR conditioning fixed, matching its stop-gradient role."""
    original = model_mod.mnar_conditioning
    model_mod.mnar_conditioning = lambda *a, **k: cond
    try:
        yield
    finally:
        model_mod.mnar_conditioning = original


def group_gradient_errors(variant: str, seed: int, per_group: int = 4) -> dict[str, float]:
    """Worst relative gradient error per parameter group on sampled entries.

    Each entry is scored by its best agreement over several central-difference
    steps: large steps can straddle a leaky-ReLU kink and small ones drown in
    roundoff, while a wrong gradient disagrees at every step.
    """
    cfg = ModelConfig(n_obs=3, n=3, T=5, variant=variant, prior_hidden=(8, 8), beta=0.5, gamma=0.5)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((6, 5, 3))
    r = (rng.random(x.shape) > 0.3).astype(float)
    r[0, 0, 0] = 0.0
    x0 = np.where(r > 0, x, 0.0)
    cond = None
    if variant == "MNAR":
        u = np.random.default_rng(7)
        z = encode_z(params, x0, r).sample(u.standard_normal((6, 5, 3))).data
        cond = mnar_conditioning(params, x0, r, z, u.standard_normal((6, 5, 3)))

    def loss():
        return elbo(params, x, r, 1 - r, np.random.default_rng(7), target=x).total

    def central(w, idx, h):
        old = w.data[idx]
        w.data[idx] = old + h
        up = loss()
        w.data[idx] = old - h
        down = loss()
        w.data[idx] = old
        return (up - down) / (2 * h)

    with frozen_conditioning(cond) if cond is not None else nullcontext():
        for w in params.parameters():
            w.grad = None
        elbo(params, x, r, 1 - r, np.random.default_rng(7), target=x).graph.backward()
        errs = {}
        for name, group in params.groups().items():
            worst = 0.0
            for w in group:
                picks = rng.choice(w.data.size, size=min(per_group, w.data.size), replace=False)
                grad = np.zeros_like(w.data) if w.grad is None else w.grad
                for flat in picks:
                    idx = np.unravel_index(flat, w.shape)
                    g = grad[idx]
                    err = min(abs(g - fd) / max(abs(g), abs(fd), 1e-7)
                              for fd in (central(w, idx, h) for h in (1e-4, 1e-5, 1e-6)))
                    worst = max(worst, err)
            errs[name] = worst
    return errs


def test_criterion_01_gradients():
    start = time.perf_counter()
    worst, where = 0.0, ""
    for seed, variant in itertools.product(range(10), ("MAR", "MNAR")):
        for name, err in group_gradient_errors(variant, seed).items():
            if err >= worst:
                worst, where = err, f"{variant} seed {seed} {name}"
    secs = time.perf_counter() - start
    verdict(1, worst < 1e-4 and secs < 120, f"max group rel. error {worst:.2e} ({where}); {secs:.0f}s")


# -- 2 log-det ----------------------------------------------------------------------------------------

def scaled_extractor(k, n_in, scale):
    w = np.zeros((k, n_in, 1))
    w[:, 0, 0] = scale
    return MlpStack([(parameter(w), parameter(np.zeros((k, 1, 1))))])


def test_criterion_02_logdet():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = init_params(ModelConfig(n_obs=3, n=3, T=5, prior_hidden=(16, 16)), seed)
        for stack, coord, cond in (
            (p.r_nets, rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 4, 3))),
            (p.s_nets, rng.standard_normal((4, 5, 3)), rng.standard_normal((4, 5, 6))),
        ):
            _, d = flow_noise(stack, Tensor(coord), Tensor(cond))
            for i in range(3):
                up, down = coord.copy(), coord.copy()
                up[..., i] += 1e-5
                down[..., i] -= 1e-5
                fd = (flow_noise(stack, Tensor(up), Tensor(cond))[0].data[i]
                      - flow_noise(stack, Tensor(down), Tensor(cond))[0].data[i]) / 2e-5
                worst = max(worst, float(np.max(np.abs(d.data[i] - fd) / np.maximum(np.abs(fd), 1e-8))))

    log_n0 = -0.5 * math.log(2 * math.pi)
    p = init_params(ModelConfig(n_obs=3, n=3, T=2, prior_hidden=(8,)), 0)
    exact = {}
    p.r_nets = scaled_extractor(3, 4, 1.0)
    exact["0"] = prior_logp_z(p, np.zeros((1, 2, 3))).item() - 6 * log_n0
    p.r_nets = scaled_extractor(3, 4, 2.0)
    exact["ln2"] = (prior_logp_z(p, np.zeros((1, 2, 3))).item() - 6 * log_n0) / 3 - math.log(2)
    q = init_params(ModelConfig(n_obs=3, n=3, T=2, prior_hidden=(8,)), 0)
    q.s_nets = scaled_extractor(3, 7, 3.0)
    exact["ln3"] = (prior_logp_c(q, np.zeros((1, 2, 3)), np.zeros((1, 2, 6))).item() - 6 * log_n0) / 6 - math.log(3)
    off = max(abs(v) for v in exact.values())
    secs = time.perf_counter() - start
    verdict(2, worst < 1e-4 and off < 1e-12 and secs < 60,
            f"FD rel. error {worst:.1e}; analytic 0/ln2/ln3 off by {off:.1e}; {secs:.1f}s")


# -- 3 KL -------------------------------------------------------------------------------------------

def kl_samples(mu: float, n: int, seed: int) -> np.ndarray:
    p = init_params(ModelConfig(n_obs=1, n=1, T=1, prior_hidden=(4,)), seed=0)
    w, b = p.phi_z.head.layers[-1]
    w.data[...] = 0.0
    b.data[...] = [mu, 0.0]
    q = encode_z(p, np.zeros((n, 1, 1)), np.ones((n, 1, 1)))
    u = np.random.default_rng(seed).standard_normal((n, 1, 1))
    z = q.sample(u)
    return kl_per_sequence(q, z, u, prior_logp_z(p, z)).data


def test_criterion_03_kl():
    shifted = kl_samples(1.0, 10_000, seed=11)
    same = kl_samples(0.0, 10_000, seed=12)
    se1 = shifted.std(ddof=1) / math.sqrt(shifted.size)
    se0 = same.std(ddof=1) / math.sqrt(same.size)
    ok = abs(shifted.mean() - 0.5) < 3 * se1 and abs(same.mean()) <= 3 * se0 + 1e-12
    verdict(3, ok, f"KL(N(1,1)||N(0,1)) = {shifted.mean():.4f} ± {se1:.4f}; KL(p||p) = {same.mean():.1e} ± {se0:.1e}")


# -- 4 masks ------------------------------------------------------------------------------------------------

def test_criterion_04_masks():
    start = time.perf_counter()
    x = generate_dataset(GenProcessSpec.dataset_a(seed=0), 6000)[0].values
    problems = []
    for rate in RATIOS:
        m, _ = mask_mnar(x, rate, seed=0)
        if int((m.r == 0).sum()) != round(rate * x.size):
            problems.append(f"MNAR {rate}: {int((m.r == 0).sum())} of {x.size} missing")
        for name, mk in (("MCAR", lambda: mask_mcar(x.shape, rate, seed=0)), ("MAR", lambda: mask_mar(x, rate, seed=0)[0])):
            got = mk().achieved_rate
            if abs(got - rate) > 0.01:
                problems.append(f"{name} {rate}: {got:.4f}")
    # x_{t-1} (masked entries included) predicts the MNAR mask at t
    m, _ = mask_mnar(x, 0.2, seed=0)
    v = _standardize(x)
    prev = np.zeros_like(v)
    prev[:, 1:] = v[:, :-1]
    feats = np.concatenate([np.maximum(prev, 0), np.maximum(-prev, 0)], axis=-1).reshape(-1, 6)
    half = feats.shape[0] // 2
    aucs = []
    for j in range(3):
        y = m.r[..., j].reshape(-1)
        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000)).fit(feats[:half], y[:half])
        aucs.append(roc_auc_score(y[half:], clf.predict_proba(feats[half:])[:, 1]))
    secs = time.perf_counter() - start
    ok = not problems and min(aucs) > 0.6 and secs < 120
    verdict(4, ok, f"rate problems: {problems or 'none'}; MNAR signature AUC min {min(aucs):.3f}; {secs:.0f}s")


# -- 5 MCC -----------------------------------------------------------------------------------------------

def test_criterion_05_mcc():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((5000, 4))
    self_mcc = mcc(z, z)
    transformed = z[:, [3, 1, 0, 2]] * np.array([-2.0, 0.3, 5.0, -1.0]) + 4.0
    inv_err = abs(mcc(z, transformed) - 1.0)
    brute_err = 0.0
    for d in range(1, 7):
        a = rng.standard_normal((300, d))
        b = a @ rng.standard_normal((d, d)) + rng.standard_normal((300, d))
        c = np.abs(np.corrcoef(a.T, b.T)[:d, d:])
        best = max(np.mean([c[i, p[i]] for i in range(d)]) for p in itertools.permutations(range(d)))
        brute_err = max(brute_err, abs(mcc(a, b) - best))
    noise = mcc(rng.standard_normal((50_000, 3)), rng.standard_normal((50_000, 3)))
    ok = abs(self_mcc - 1.0) < 1e-12 and inv_err < 1e-12 and brute_err < 1e-12 and noise < 0.05
    verdict(5, ok, f"MCC(z,z)-1 {self_mcc - 1:.1e}; invariance {inv_err:.1e}; brute force {brute_err:.1e}; noise {noise:.4f}")


# -- 6-11 trained cells -----------------------------------------------------------------------------------

def test_criterion_06_table3_scaled():
    mar = [mcc_z("mar", 0.2, "MAR", s) for s in SEEDS]
    mnar = [mcc_z("mnar", 0.2, "MNAR", s) for s in SEEDS]
    secs = max(cell(m, 0.2, MATCHED[m], s).seconds for m in MATCHED for s in SEEDS)
    ok = median(mar) >= 0.85 and median(mnar) >= 0.85 and secs <= 900
    verdict(6, ok, f"median mcc_z A-MAR/DMM-MAR {median(mar):.3f}, A-MNAR/DMM-MNAR {median(mnar):.3f} "
                   f"(need >= 0.85); slowest cell {secs:.0f}s")


def test_criterion_07_matching_order():
    parts, ok = [], True
    for mech, matched in MATCHED.items():
        a = median([mcc_z(mech, 0.2, matched, s) for s in SEEDS])
        b = median([mcc_z(mech, 0.2, OTHER[matched], s) for s in SEEDS])
        ok &= a > b
        parts.append(f"A-{mech.upper()}: matched {a:.3f} vs mismatched {b:.3f}")
    verdict(7, ok, "; ".join(parts))


def test_criterion_08_ratio_trend():
    parts, ok = [], True
    for mech, matched in MATCHED.items():
        lo = median([mcc_z(mech, 0.2, matched, s) for s in SEEDS])
        hi = median([mcc_z(mech, 0.6, matched, s) for s in SEEDS])
        ok &= hi <= lo
        parts.append(f"A-{mech.upper()}: 0.2 -> {lo:.3f}, 0.6 -> {hi:.3f}")
    verdict(8, ok, "; ".join(parts))


def test_criterion_09_beats_baseline():
    worst, where, ok = 0.0, "", True
    for mech, ratio, seed in itertools.product(MATCHED, RATIOS, SEEDS):
        res = cell(mech, ratio, MATCHED[mech], seed)
        frac = res.report.mse / res.baseline_mse
        ok &= res.report.mse < res.baseline_mse
        if frac >= worst:
            worst, where = frac, f"{mech} {ratio} seed {seed}"
    verdict(9, ok, f"worst model/baseline MSE ratio {worst:.3f} ({where}) over 18 cells")


def test_criterion_10_ablation():
    full = median([cell("mar", 0.4, "MAR", s).report.mse for s in SEEDS])
    no_beta = median([cell("mar", 0.4, "MAR", s, beta=0.0).report.mse for s in SEEDS])
    no_gamma = median([cell("mar", 0.4, "MAR", s, gamma=0.0).report.mse for s in SEEDS])
    ok = no_beta >= full and no_gamma >= full
    verdict(10, ok, f"A-MAR 0.4 median val MSE: full {full:.4f}, beta=0 {no_beta:.4f}, gamma=0 {no_gamma:.4f}")


def test_criterion_11_selection():
    parts, ok = [], True
    for mech, matched in MATCHED.items():
        picks = []
        for s in SEEDS:
            c = cell(mech, 0.2, "MAR", s).cell
            split = synthetic_split(mech, 0.2, s, c.n_train, c.n_val)
            cands = [cell(mech, 0.2, v, s).params for v in ("MAR", "MNAR")]
            picks.append(select_model(cands, split.x_val, split.r_val, split.t_val).variant)
        hits = sum(p == matched for p in picks)
        ok &= hits * 2 > len(SEEDS)
        parts.append(f"A-{mech.upper()}: picked {'/'.join(picks)}")
    verdict(11, ok, "; ".join(parts))


# -- 12 real-series smoke ------------------------------------------------------------------------------------

def test_criterion_12_real_series_smoke(tmp_path):
    steps = [
        ["window", "--data", DATA, "--T", "24", "--out", str(tmp_path / "w")],
        ["mask", "--data", str(tmp_path / "w/series.csv"), "--mechanism", "mcar", "--rate", "0.2",
         "--seed", "0", "--out", str(tmp_path / "m")],
        ["train", "--data", str(tmp_path / "w/series.csv"), "--mask", str(tmp_path / "m/mask.csv"),
         "--variant", "MAR", "--epochs", "5", "--out", str(tmp_path / "t")],
        ["evaluate", "--checkpoint", str(tmp_path / "t/checkpoint.json"), "--data", str(tmp_path / "w/series.csv"),
         "--mask", str(tmp_path / "m/mask.csv"), "--dataset", "co2", "--out", str(tmp_path / "e")],
    ]
    codes = [cli_main(a) for a in steps]
    rows = read_series_csv(tmp_path / "w/series.csv").shape if codes[0] == 0 else None
    ok = codes == [0, 0, 0, 0] and (tmp_path / "e/metrics.csv").exists()
    verdict(12, ok, f"window -> mask -> train(5 epochs) -> evaluate exit codes {codes}; windows {rows}")
