import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from femkan.leakage import LeakageSpec, leak

fractions = st.floats(0.002, 1.0)
vectors = arrays(np.float64, 512, elements=st.floats(-1, 1))


def test_full_fraction_is_identity():
    v = np.random.default_rng(0).standard_normal(512)
    np.testing.assert_array_equal(leak(v, LeakageSpec(1.0)), v)


def test_half():
    v = np.arange(1.0, 513.0)
    out = leak(v, LeakageSpec(0.5))
    assert out.shape == (512,)
    np.testing.assert_array_equal(out[:256], v[:256])
    assert not out[256:].any()


@pytest.mark.parametrize("fraction,kept", [(0.9, 461), (0.7, 358), (0.5, 256), (0.3, 154),
                                           (0.1, 51)])
def test_kept_half_up(fraction, kept):
    # direct count: round-half-up of fraction * 512
    assert LeakageSpec(fraction).kept == kept == int(fraction * 512 + 0.5)


def test_floor_rounding():
    assert LeakageSpec(0.9, rounding="floor").kept == 460


def test_invalid():
    for f in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            LeakageSpec(f)
    with pytest.raises(ValueError):
        LeakageSpec(0.0009)         # 0.46 coordinates rounds to none
    with pytest.raises(ValueError):
        leak(np.zeros(100), LeakageSpec(0.5))


@given(vectors, fractions)
def test_idempotent(v, f):
    spec = LeakageSpec(f)
    once = leak(v, spec)
    np.testing.assert_array_equal(leak(once, spec), once)


@given(vectors, fractions, fractions)
def test_nested_support(v, f1, f2):
    lo, hi = sorted((f1, f2))
    a, b = leak(v, LeakageSpec(lo)), leak(v, LeakageSpec(hi))
    assert np.all((a != 0) <= (b != 0))


@given(vectors, fractions)
def test_norm_non_increasing(v, f):
    assert np.linalg.norm(leak(v, LeakageSpec(f))) <= np.linalg.norm(v) + 1e-12


def test_batch():
    X = np.ones((3, 512))
    out = leak(X, LeakageSpec(0.1))
    assert out.shape == (3, 512) and out.sum() == 3 * 51
