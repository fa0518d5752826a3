import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from gmssl.core import (
    TensorFormatError,
    clip_global_norm,
    cosine_sim,
    cosine_sim_grad,
    decode_tensor,
    encode_tensor,
    gamma_fn,
    ggd_uncertainty,
    is_degenerate,
    load_named,
    load_tensor,
    make_rng,
    sample_gumbel,
    save_named,
    save_tensor,
)

from fdcheck import numeric_grad, rel_err


def test_cosine_examples():
    assert cosine_sim([3, 4], [3, 4]) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    # hand value: 1 / sqrt(2)
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(0.7071, abs=1e-4)


def test_cosine_zero_norm_is_flagged_zero():
    assert is_degenerate([0, 0], [1, 2])
    assert cosine_sim([0, 0], [1, 2]) == 0.0
    du, dv = cosine_sim_grad([0.0, 0.0], [1.0, 2.0])
    assert not du.any() and not dv.any()


def test_cosine_grad_matches_fd_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        u, v = rng.standard_normal(n), rng.standard_normal(n)
        up = float(rng.standard_normal())
        du, dv = cosine_sim_grad(u, v, up)
        nu = numeric_grad(lambda: up * cosine_sim(u, v), u, h=1e-4)
        nv = numeric_grad(lambda: up * cosine_sim(u, v), v, h=1e-4)
        assert rel_err(du, nu) < 1e-4
        assert rel_err(dv, nv) < 1e-4


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)), arrays(np.float64, 5, elements=st.floats(-1e3, 1e3)))
def test_cosine_bounded(u, v):
    c = cosine_sim(u, v)
    assert -1 - 1e-6 <= c <= 1 + 1e-6


def test_gumbel_moments_and_determinism():
    g = sample_gumbel(make_rng(1), 1_000_000)
    assert g.mean() == pytest.approx(0.5772, abs=0.003)
    assert g.var() == pytest.approx(math.pi**2 / 6, abs=0.01)
    a = sample_gumbel(make_rng(5), (3, 4))
    b = sample_gumbel(make_rng(5), (3, 4))
    assert np.array_equal(a, b)


def test_gumbel_ks():
    g = sample_gumbel(make_rng(2), 100_000)
    d = stats.kstest(g, lambda x: np.exp(-np.exp(-x))).statistic
    assert d < 0.01


def test_gamma_values():
    assert gamma_fn(1) == 1.0
    assert gamma_fn(5) == pytest.approx(24.0, rel=1e-12)
    oracle, _ = integrate.quad(lambda x: x**-0.5 * math.exp(-x), 0, np.inf)
    assert gamma_fn(0.5) == pytest.approx(oracle, abs=1e-6)
    assert gamma_fn(0.5) == pytest.approx(1.7724539, abs=1e-6)


@pytest.mark.parametrize("z", [0.3, 0.7, 1.5, 4.2])
def test_gamma_recurrence(z):
    assert gamma_fn(z + 1) == pytest.approx(z * gamma_fn(z), rel=1e-8)


@pytest.mark.parametrize("z", [0.0, -1.0])
def test_gamma_domain(z):
    with pytest.raises(ValueError):
        gamma_fn(z)


def test_ggd_uncertainty_closed_forms():
    assert ggd_uncertainty(1.0, 2.0) == pytest.approx(0.5, abs=1e-12)
    assert ggd_uncertainty(1.0, 1.0) == pytest.approx(2.0, abs=1e-12)
    assert ggd_uncertainty(3.0, 2.0) == pytest.approx(4.5, abs=1e-12)


def test_clip_examples():
    out = clip_global_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert np.allclose(out[0], [0.6]) and np.allclose(out[1], [0.8])
    small = [np.array([0.1])]
    assert np.array_equal(clip_global_norm(small, 1.0)[0], small[0])
    assert np.allclose(clip_global_norm([np.ones(4)], 1.0)[0], 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(arrays(np.float64, 3, elements=st.floats(-100, 100)), min_size=1, max_size=4), st.floats(0.01, 10))
def test_clip_idempotent(grads, m):
    once = clip_global_norm(grads, m)
    twice = clip_global_norm(once, m)
    for a, b in zip(once, twice):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_gmt0_round_trip(tmp_path):
    t = make_rng(0).standard_normal((2, 3, 4)).astype(np.float32)
    save_tensor(tmp_path / "t.gmt", t)
    back = load_tensor(tmp_path / "t.gmt")
    assert back.dtype == np.float32 and back.shape == t.shape
    assert back.tobytes() == t.tobytes()
    raw = (tmp_path / "t.gmt").read_bytes()
    assert raw[:4] == b"GMT0"
    assert b'{"dtype":"f32","shape":[2,3,4]}' in raw


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(0, 4)), elements=st.floats(-1e6, 1e6, width=32)))
def test_gmt0_bit_exact(t):
    assert decode_tensor(encode_tensor(t)).tobytes() == t.tobytes()


def test_gmt0_truncated(tmp_path):
    buf = encode_tensor(np.ones((2, 3)))
    with pytest.raises(TensorFormatError, match="offset"):
        decode_tensor(buf[:-3])
    with pytest.raises(TensorFormatError):
        decode_tensor(buf[:6])


def test_gmt0_length_mismatch():
    buf = encode_tensor(np.ones((2, 3)))
    with pytest.raises(TensorFormatError, match="mismatch"):
        decode_tensor(buf[:-4])  # header [2,3], 5 floats


def test_gmt0_bad_magic_and_nonfinite():
    buf = encode_tensor(np.ones(2))
    with pytest.raises(TensorFormatError, match="magic"):
        decode_tensor(b"XXXX" + buf[4:])
    bad = bytearray(buf)
    bad[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    with pytest.raises(TensorFormatError, match=f"offset {len(buf) - 4}"):
        decode_tensor(bytes(bad))


def test_nonfinite_rejected_on_write(tmp_path):
    with pytest.raises(ValueError):
        save_tensor(tmp_path / "x.gmt", np.array([1.0, np.inf]))
    assert not list(tmp_path.iterdir())


def test_named_round_trip(tmp_path):
    ts = {"a.W": np.eye(3, dtype=np.float32), "a.b": np.arange(3, dtype=np.float32)}
    save_named(tmp_path, ts, {"note": 1})
    back, manifest = load_named(tmp_path)
    assert manifest["note"] == 1
    for k in ts:
        assert back[k].tobytes() == ts[k].tobytes()
