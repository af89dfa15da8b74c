import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from epl import tensor as T
from epl.errors import EmptyReductionError, NumericError, ShapeError
from epl.tensor import Tensor

small_floats = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_add_and_softplus_values():
    assert T.add(Tensor([2.0]), Tensor([3.0])).data.tolist() == [5.0]
    assert abs(T.softplus(Tensor(0.0)).item() - math.log(2)) < 1e-15


def test_log_guard_at_zero():
    assert T.log(Tensor(0.0)).item() == pytest.approx(math.log(1e-8))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_reductions():
    assert T.sum(Tensor([1.0, 2.0, 3.0])).item() == 6
    assert T.mean(Tensor(np.full((2, 3), 4.5))).item() == 4.5
    assert int(T.reduce("argmax", Tensor([0.1, 0.7, 0.2]), axis=0).item()) == 1
    with pytest.raises(EmptyReductionError):
        T.sum(Tensor(np.zeros((0, 3))), axis=0)


def test_conv_identity_and_zero(rng):
    x = rng.normal(size=(1, 1, 4, 5, 3))
    ident = np.ones((1, 1, 1, 1, 1))
    assert np.array_equal(T.conv3d(Tensor(x), Tensor(ident)).data, x)
    assert not T.conv3d(Tensor(x), Tensor(np.zeros((2, 1, 3, 3, 3))), padding=1).data.any()


def _direct_conv(x, w, pad):
    # naive loop oracle
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * 3)
    b, c, d, h, wd = x.shape
    o, _, k, _, _ = w.shape
    out = np.zeros((b, o, d + 2 * pad - k + 1, h + 2 * pad - k + 1, wd + 2 * pad - k + 1))
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            for l in range(out.shape[4]):
                patch = xp[:, :, i:i + k, j:j + k, l:l + k]
                out[:, :, i, j, l] = np.einsum("bcxyz,ocxyz->bo", patch, w)
    return out


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 2, 5, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3, 3))
    np.testing.assert_allclose(T.conv3d(Tensor(x), Tensor(w), padding=1).data, _direct_conv(x, w, 1), atol=1e-12)
    avg = np.full((1, 1, 3, 3, 3), 1 / 27)
    const = np.full((1, 1, 5, 5, 5), 2.5)
    out = T.conv3d(Tensor(const), Tensor(avg), padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1, 1:-1], 2.5, atol=1e-14)


@pytest.mark.parametrize("c,k,stride,pad,shape", [
    (4, 3, 1, 1, (5, 6, 7)), (5, 3, 2, 1, (7, 6, 5)), (4, 3, 2, 0, (7, 8, 9)),
    (4, 5, 2, 2, (9, 8, 7)), (6, 3, 3, 1, (7, 8, 9)),
])
def test_shift_conv_agrees_with_im2col(rng, monkeypatch, c, k, stride, pad, shape):
    x = rng.normal(size=(2, c) + shape)
    w = rng.normal(size=(3, c, k, k, k))
    b = rng.normal(size=3)

    def run():
        xt, wt, bt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
        y = T.conv3d(xt, wt, bt, stride=stride, padding=pad)
        T.backward((y * Tensor(np.cos(np.arange(y.size)).reshape(y.shape))).sum())
        return y.data, xt.grad, wt.grad, bt.grad

    fast = run()
    monkeypatch.setattr(T, "SHIFT_MIN_CHANNELS", 10 ** 9)
    slow = run()
    for a, s in zip(fast, slow):
        np.testing.assert_allclose(a, s, atol=1e-11)
    if stride == 1:
        np.testing.assert_allclose(fast[0], _direct_conv(x, w, pad) + b.reshape(1, 3, 1, 1, 1), atol=1e-11)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv3d(Tensor(np.ones((1, 2, 3, 3, 3))), Tensor(np.ones((1, 3, 1, 1, 1))))


def test_upsample_values():
    x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 2, 1, 1))
    out = T.trilinear_upsample(x, (4, 1, 1)).data.ravel()
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-15)
    const = Tensor(np.full((1, 2, 2, 3, 2), 1.7))
    np.testing.assert_allclose(T.trilinear_upsample(const, (4, 6, 4)).data, 1.7, atol=1e-14)
    y = np.random.default_rng(0).normal(size=(1, 1, 2, 2, 2))
    assert np.array_equal(T.trilinear_upsample(Tensor(y), (2, 2, 2)).data, y)
    with pytest.raises(ShapeError):
        T.trilinear_upsample(const, (0, 2, 2))


def test_backward_basics():
    x = Tensor(3.0, requires_grad=True)
    (g,) = T.backward(x * x, [x])
    assert g == 6.0
    v = Tensor(np.arange(4.0), requires_grad=True)
    (g,) = T.backward(v.sum(), [v])
    assert np.array_equal(g, np.ones(4))
    with pytest.raises(ShapeError):
        T.backward(v * 2.0)


def test_finite_diff_linear_and_quadratic(rng):
    x = rng.normal(size=5)
    coef = rng.normal(size=5)
    assert T.finite_diff_check(lambda t: (t * coef).sum(), x) <= 1e-10
    assert T.finite_diff_check(lambda t: (t * t * coef).sum(), x) <= 1e-7
    assert T.finite_diff_check(lambda t: T.log(t * t + 0.5).sum(), x) <= 1e-4


def test_finite_diff_rejects_non_finite():
    with pytest.raises(NumericError):
        T.finite_diff_check(lambda t: (t * np.inf).sum(), np.ones(2))


@given(arrays(np.float64, (2, 3), elements=small_floats), arrays(np.float64, (3,), elements=small_floats))
def test_elementwise_gradients_match_fd(a, b):
    def f(t):
        return (T.softplus(t) * b + T.exp(t * 0.3) / (T.softplus(t) + 1.0) - T.relu(t + 10.0) ** 2).sum()
    assert T.finite_diff_check(f, a) <= 1e-4


@given(arrays(np.float64, (2, 1, 3, 3, 3), elements=small_floats))
def test_conv_and_upsample_gradients(x):
    w = np.random.default_rng(5).normal(size=(2, 1, 3, 3, 3))

    def f(t):
        y = T.conv3d(t, Tensor(w), stride=2, padding=1)
        return (T.trilinear_upsample(y, (3, 4, 5)) ** 2).mean()
    assert T.finite_diff_check(f, x) <= 1e-4


def test_dtype_is_preserved_in_float32():
    with T.default_dtype(np.float32):
        a = Tensor(np.ones(3), requires_grad=True)
        y = T.log(a / (a + 1.0)).sum()
        assert y.dtype == np.float32
        (g,) = T.backward(y, [a])
        assert g.dtype == np.float32
