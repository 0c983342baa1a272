"""Fast built-in checks run by ``dmm selftest``; each returns (name, ok, detail)."""
from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np

from .maskgen import mask_mar, mask_mcar, mask_mnar
from .metrics import correlation_matrix, mcc
from .model import ModelConfig, elbo, init_params, prior_logp_z
from .numcore import MlpParams, MlpStack, Tensor, mlp_forward, parameter, partial_scalar

Check = Callable[[], tuple[bool, str]]


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_difference(loss: Callable[[], float], p: Tensor, idx: tuple, h: float = 1e-5) -> float:
    old = p.data[idx]
    p.data[idx] = old + h
    up = loss()
    p.data[idx] = old - h
    down = loss()
    p.data[idx] = old
    return (up - down) / (2 * h)


def check_mlp_gradient() -> tuple[bool, str]:
    rng = np.random.default_rng(11)
    net = MlpParams.init(rng, [4, 6, 3])
    x = rng.standard_normal((5, 4))

    def graph():
        y = mlp_forward(net, x)
        return (y.square().sum() + (y * 0.3).exp().sum() + (y.abs() + 1.0).log().sum()) * 0.5

    for p in net.parameters():
        p.grad = None
    graph().backward()
    worst = 0.0
    for p in net.parameters():
        for idx in itertools.islice(np.ndindex(p.shape), 8):
            fd = finite_difference(lambda: graph().item(), p, idx)
            worst = max(worst, _rel_err(p.grad[idx], fd))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_elbo_gradient() -> tuple[bool, str]:
    cfg = ModelConfig(n_obs=2, n=2, T=3, enc_hidden=4, decoder_hidden=(4,), prior_hidden=(5,), beta=0.5, gamma=0.5)
    params = init_params(cfg, seed=3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 2))
    mask = (rng.random(x.shape) > 0.3).astype(float)

    def loss():
        return elbo(params, x, mask, 1 - mask, np.random.default_rng(7), target=x)

    for p in params.parameters():
        p.grad = None
    loss().graph.backward()
    worst = 0.0
    for p in params.parameters():
        idx = tuple(int(i) for i in np.unravel_index(0, p.shape))
        fd = finite_difference(lambda: loss().total, p, idx)
        g = 0.0 if p.grad is None else p.grad[idx]
        if abs(g) + abs(fd) > 1e-7:
            worst = max(worst, _rel_err(g, fd))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def _linear_stack(k: int, n_in: int, scale: float) -> MlpStack:
    w = np.zeros((k, n_in, 1))
    w[:, 0, 0] = scale
    return MlpStack([(parameter(w), parameter(np.zeros((k, 1, 1))))])


def check_logdet_oracles() -> tuple[bool, str]:
    params = init_params(ModelConfig(n_obs=3, n=3, T=2), seed=0)
    params.r_nets = _linear_stack(3, 4, 1.0)
    z = Tensor(np.zeros((1, 2, 3)))
    ident = prior_logp_z(params, z).item()
    expect = 2 * 3 * (-0.5 * math.log(2 * math.pi))
    params.r_nets = _linear_stack(3, 4, 2.0)
    doubled = prior_logp_z(params, z).item()
    ok = abs(ident - expect) < 1e-12 and abs(doubled - ident - 3 * math.log(2.0)) < 1e-12
    return ok, f"identity {ident:.6f} (expect {expect:.6f}); ln2 terms {(doubled - ident) / 3:.6f}"


def check_partial_scalar() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    net = MlpParams.init(rng, [3, 8, 2])
    x = rng.standard_normal(3)
    worst = 0.0
    for i, j in itertools.product(range(2), range(3)):
        d = partial_scalar(lambda t: mlp_forward(net, t), x, i, j)
        e = np.zeros(3)
        e[j] = 1e-5
        fd = (mlp_forward(net, x + e).data[i] - mlp_forward(net, x - e).data[i]) / 2e-5
        worst = max(worst, _rel_err(d, fd))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_mcc() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    z = rng.standard_normal((200, 5, 4))
    perm = rng.permutation(4)
    est = z[..., perm] * np.array([-2.0, 0.5, 3.0, -1.0]) + 1.5
    self_ok = abs(mcc(z, z) - 1.0) < 1e-12
    inv_ok = abs(mcc(z, est) - 1.0) < 1e-12
    c = correlation_matrix(z.reshape(-1, 4), rng.standard_normal((1000, 4)))
    brute = max(np.mean([c[i, p[i]] for i in range(4)]) for p in itertools.permutations(range(4)))
    from scipy.optimize import linear_sum_assignment

    r, k = linear_sum_assignment(c, maximize=True)
    hung_ok = abs(c[r, k].mean() - brute) < 1e-12
    return self_ok and inv_ok and hung_ok, f"self={self_ok} invariance={inv_ok} hungarian={hung_ok}"


def check_mask_rates() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    x = rng.standard_normal((96, 7, 3))
    details, ok = [], True
    for rate in (0.2, 0.4, 0.6):
        m, _ = mask_mnar(x, rate, seed=0)
        exact = round(rate * m.r.size) / m.r.size
        ok &= abs(m.achieved_rate - exact) < 1e-12
        mar, _ = mask_mar(x, rate, seed=0)
        ok &= abs(mar.achieved_rate - rate) <= 0.01
        details.append(f"{rate}: mnar {m.achieved_rate:.4f} mar {mar.achieved_rate:.4f}")
    ok &= mask_mcar(x.shape, 0.0, seed=0).r.min() == 1
    return bool(ok), "; ".join(details)


CHECKS: list[tuple[str, Check]] = [
    ("mlp gradient vs finite differences", check_mlp_gradient),
    ("elbo gradient vs finite differences", check_elbo_gradient),
    ("partial_scalar vs finite differences", check_partial_scalar),
    ("prior log-det analytic oracles", check_logdet_oracles),
    ("mcc identity, invariance, assignment", check_mcc),
    ("mask achieved rates", check_mask_rates),
]


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
