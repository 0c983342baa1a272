import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmm.errors import GenerationError, ShapeError
from dmm.numcore import MlpParams, parameter
from dmm.rng import KEY_LATENT, stream
from dmm.synthgen import (
    CHUNK,
    W_A,
    GenProcessSpec,
    gen_latent_sequence,
    gen_mixing,
    generate_dataset,
    train_val_split,
    v_chain,
    zero_noise,
)


def scalar_latents(spec, eps):
    """Coordinate-by-coordinate interpreter of the latent update rule."""
    b, t_len, n = eps.shape
    z = np.zeros_like(eps)
    for s in range(b):
        for t in range(t_len):
            for i in range(n):
                e = eps[s, t, i]
                if t < spec.L:
                    z[s, t, i] = e
                    continue
                drive = sum(spec.W[i, k] * z[s, t - spec.L, k] for k in range(n))
                drive = drive if drive > 0 else 0.2 * drive
                inst = sum(spec.V[k, i] * z[s, t, k] for k in range(i))
                z[s, t, i] = (drive + inst) * e + e
    return z


def test_zero_noise_gives_zero_latents():
    spec = GenProcessSpec(noise=zero_noise, W=np.full((3, 3), 5.0), V=np.triu(np.ones((3, 3)), 1))
    z = gen_latent_sequence(spec, 20).z
    assert np.all(z[:, 1:] == 0.0)


def test_dataset_a_matches_scalar_interpreter():
    spec = GenProcessSpec.dataset_a(seed=7)
    z = gen_latent_sequence(spec, 40).z
    eps = stream(7, KEY_LATENT, 0).standard_normal((40, 5, 3))
    np.testing.assert_array_equal(z, scalar_latents(spec, eps))


def test_dataset_a_constants():
    np.testing.assert_array_equal(W_A, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])
    v = v_chain(3)
    assert v[0, 1] == v[1, 2] == 1.0 and v.sum() == 2.0
    spec = GenProcessSpec.dataset_a()
    assert (spec.n, spec.T, spec.L) == (3, 5, 1)


def test_same_seed_identical():
    spec = GenProcessSpec.dataset_a(seed=3)
    a, la = generate_dataset(spec, 2000)
    b, lb = generate_dataset(spec, 2000)
    assert a.values.tobytes() == b.values.tobytes()
    assert la.z.tobytes() == lb.z.tobytes()


def test_chunked_streams_make_prefixes_stable():
    """Sequences come from per-chunk streams, so a larger batch extends a smaller one."""
    spec = GenProcessSpec.dataset_a(seed=1)
    small = gen_latent_sequence(spec, CHUNK + 10).z
    large = gen_latent_sequence(spec, 3 * CHUNK).z
    np.testing.assert_array_equal(small, large[: CHUNK + 10])


def test_identity_mixing_returns_latents():
    spec = GenProcessSpec.dataset_a(seed=0, mixing_widths=(3, 3))
    ident = MlpParams([(parameter(np.eye(3)), parameter(np.zeros(3)))], slope=0.2)
    x, lat = generate_dataset(spec, 50, mixing=ident)
    np.testing.assert_array_equal(x.values, lat.z)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mixing_weights_full_rank(seed):
    net = gen_mixing(GenProcessSpec.dataset_a(seed=seed))
    for w, _ in net.layers:
        assert np.linalg.svd(w.data, compute_uv=False).min() > 1e-6


def test_distinct_seeds_distinct_mixing():
    a = gen_mixing(GenProcessSpec.dataset_a(seed=0))
    b = gen_mixing(GenProcessSpec.dataset_a(seed=1))
    assert not np.array_equal(a.layers[0][0].data, b.layers[0][0].data)


def test_singular_mixing_is_rejected(monkeypatch):
    spec = GenProcessSpec.dataset_a(seed=0)

    class Flat:
        def uniform(self, lo, hi, size):
            return np.zeros(size)

    monkeypatch.setattr("dmm.synthgen.stream", lambda *a: Flat())
    with pytest.raises(GenerationError):
        gen_mixing(spec, max_tries=3)


@pytest.mark.parametrize(
    "kw",
    [
        dict(V=np.tril(np.ones((3, 3)))),
        dict(L=0),
        dict(T=1),
        dict(mixing_widths=(3, 4)),
        dict(W=np.eye(2)),
    ],
)
def test_invalid_specs(kw):
    with pytest.raises(ShapeError):
        GenProcessSpec(**kw)


def test_non_square_mixing_is_rejected():
    with pytest.raises(GenerationError):
        gen_mixing(GenProcessSpec(mixing_widths=(3, 4, 3)))


def test_desk_scale_timing():
    start = time.perf_counter()
    x, lat = generate_dataset(GenProcessSpec.dataset_a(seed=0), 10_000)
    assert time.perf_counter() - start < 10.0
    assert x.shape == (10_000, 5, 3) and np.all(np.isfinite(lat.z))


def test_train_val_split_holds_out_last_1024():
    tr, va = train_val_split(11_024)
    assert tr.size == 10_000 and va[0] == 10_000 and va[-1] == 11_023
