import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from btnet import tensor as T
from btnet.tensor import BNParams, Tensor

from grad_cases import CASES
from gradcheck import TOL


@pytest.mark.parametrize("name", sorted(CASES))
def test_finite_difference(name):
    errs = [CASES[name](seed) for seed in range(10)]
    assert max(errs) <= TOL, f"{name}: {max(errs):.3g}"


def conv_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += xp[i, ci, y * stride + ky, xx * stride + kx] * w[o, ci, ky, kx]
                    out[i, o, y, xx] = acc
    return out


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 16), stride=st.sampled_from([1, 2]), pad=st.integers(0, 1),
       k=st.sampled_from([1, 3]), bias=st.booleans())
def test_conv2d_matches_nested_loops(seed, stride, pad, k, bias):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 5, 6))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3) if bias else None
    got = T.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv_loops(x, w, b, stride, pad), atol=1e-10)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=3)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_conv2d_is_linear_in_input(seed, a, b):
    rng = np.random.default_rng(seed)
    x1, x2 = rng.standard_normal((2, 1, 2, 4, 4))
    w = Tensor(rng.standard_normal((2, 2, 3, 3)))
    lhs = T.conv2d(Tensor(a * x1 + b * x2), w, padding=1).data
    rhs = a * T.conv2d(Tensor(x1), w, padding=1).data + b * T.conv2d(Tensor(x2), w, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_gradients_accumulate_over_two_uses():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.sum_all(T.add(T.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.sum_all(T.mul(x, x))
    assert y._parents == () and not y.requires_grad
    assert T.grad_enabled()


def test_nonfinite_values_raise():
    with pytest.raises(FloatingPointError):
        T.scale(Tensor(np.array([1.0])), np.inf)


def test_l2_normalize_rejects_zero_rows():
    with pytest.raises((ValueError, FloatingPointError)):
        T.l2_normalize(Tensor(np.zeros((1, 3))))


def test_softmax_cross_entropy_value():
    logits = np.array([[2.0, 0.0, -1.0]])
    want = -np.log(np.exp(2) / np.exp([2.0, 0.0, -1.0]).sum())
    assert T.softmax_cross_entropy(Tensor(logits), [0]).item() == pytest.approx(want)
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(logits), [3])


def test_batchnorm_train_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 2, 3, 3)) * 3 + 5
    bank = BNParams(Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2))
    y = T.batchnorm(Tensor(x), bank, train=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = x.shape[0] * 9
    np.testing.assert_allclose(bank.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bank.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_inference_uses_running_stats():
    bank = BNParams(Tensor(np.array([2.0])), Tensor(np.array([1.0])), np.array([3.0]), np.array([4.0]))
    y = T.batchnorm(Tensor(np.array([[5.0]])), bank, train=False).data
    assert y[0, 0] == pytest.approx(2.0 * 2.0 / np.sqrt(4.0 + T.BN_EPS) + 1.0)


def test_batchnorm_train_needs_two_samples():
    bank = BNParams.create(2)
    with pytest.raises(ValueError):
        T.batchnorm(Tensor(np.ones((1, 2))), bank, train=True)


def test_he_normal_is_deterministic_and_scaled():
    a = T.he_normal((64, 32, 3, 3), np.random.default_rng(1))
    b = T.he_normal((64, 32, 3, 3), np.random.default_rng(1))
    assert np.array_equal(a, b)
    assert a.std() == pytest.approx(np.sqrt(2 / (32 * 9)), rel=0.05)
