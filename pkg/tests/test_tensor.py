import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsrobust import tensor
from nsrobust.errors import ArgumentError, DimensionError
from nsrobust.tensor import RandStream


def test_matmul_identity():
    a = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(tensor.matmul(np.eye(3), a), a)


def test_matmul_hand_example():
    out = tensor.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
    np.testing.assert_array_equal(out, [[17.0], [39.0]])


def test_matmul_matches_triple_loop():
    s = RandStream(3)
    a = s.uniform(-1, 1, (7, 5), dtype=np.float32)
    b = s.uniform(-1, 1, (5, 3), dtype=np.float32)
    want = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                want[i, j] += float(a[i, k]) * float(b[k, j])
    np.testing.assert_allclose(tensor.matmul(a, b), want, atol=1e-6)


def test_matmul_rejects_mismatched_inner_dims():
    with pytest.raises(DimensionError):
        tensor.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_conv1d_identity_kernel():
    x = np.array([[1.0, -2.0, 3.5, 0.25]])
    np.testing.assert_array_equal(tensor.conv1d(x, np.ones((1, 1, 1))), x)


def test_conv1d_hand_example():
    out = tensor.conv1d(np.array([[1.0, 2.0, 3.0]]), np.array([[[1.0, 1.0]]]))
    np.testing.assert_array_equal(out, [[3.0, 5.0]])


def test_conv1d_matches_toeplitz_random():
    s = RandStream(4)
    x = s.uniform(-1, 1, (3, 20), dtype=np.float64)
    w = s.uniform(-1, 1, (4, 3, 5), dtype=np.float64)
    got = tensor.conv1d(x, w, stride=2, pad=2)
    want = tensor.toeplitz(w, 20, 2, 2) @ x.reshape(-1)
    np.testing.assert_allclose(got.reshape(-1), want, atol=1e-6)


def test_conv_output_length_rejects_empty_output():
    with pytest.raises(DimensionError):
        tensor.conv_output_length(2, 5, 1, 0)


@settings(max_examples=40, deadline=None)
@given(length=st.integers(1, 12), k=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 2),
       seed=st.integers(0, 2**32))
def test_conv1d_toeplitz_property(length, k, stride, pad, seed):
    if length + 2 * pad < k:
        return
    s = RandStream(seed)
    x = np.floor(s.uniform(-3, 4, (2, length), dtype=np.float64))
    w = np.floor(s.uniform(-3, 4, (2, 2, k), dtype=np.float64))
    got = tensor.conv1d(x, w, stride, pad).reshape(-1)
    np.testing.assert_array_equal(got, tensor.toeplitz(w, length, stride, pad) @ x.reshape(-1))


def test_uniform_degenerate_bound_rejected():
    with pytest.raises(ArgumentError):
        RandStream(0).uniform(0.0, 0.0, (3,))


def test_sign_bernoulli_support():
    v = RandStream(1).sign_bernoulli((10_000,))
    assert set(np.unique(v)) == {-1.0, 1.0}


def test_uniform_mean_law_of_large_numbers():
    u = RandStream(2).uniform(0.0, 1.0, (100_000,), dtype=np.float64)
    assert 0.49 <= u.mean() <= 0.51
    assert u.min() >= 0.0 and u.max() < 1.0


def test_streams_are_reproducible_and_distinct():
    a = RandStream(5, 1).uniform(0, 1, (8,))
    np.testing.assert_array_equal(a, RandStream(5, 1).uniform(0, 1, (8,)))
    assert not np.array_equal(a, RandStream(5, 2).uniform(0, 1, (8,)))
    assert not np.array_equal(RandStream(5).spawn(0).raw(4), RandStream(5).spawn(1).raw(4))


def test_normal_moments():
    z = RandStream(6).normal(1.0, 2.0, (100_001,), dtype=np.float64)
    assert z.shape == (100_001,)
    assert abs(z.mean() - 1.0) < 0.03
    assert abs(z.std() - 2.0) < 0.03


def test_permutation_is_a_permutation():
    p = RandStream(7).permutation(50)
    np.testing.assert_array_equal(np.sort(p), np.arange(50))


def test_precision_context_restores_default():
    before = tensor.default_dtype()
    with tensor.precision("f64"):
        assert tensor.default_dtype() == np.float64
    assert tensor.default_dtype() == before
