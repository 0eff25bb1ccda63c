import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmnas import tensor as T
from mmnas.tensor import ShapeError, Tensor, TapeError


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- elementwise


def test_relu_example():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_add_example():
    np.testing.assert_array_equal(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_grad_of_sum_of_squares():
    x = leaf([1.0, 2.0])
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_elementwise_dispatch_and_unknown_kind():
    a = Tensor([1.0, -2.0])
    np.testing.assert_array_equal(T.elementwise("scale", a, 3.0).data, [3.0, -6.0])
    np.testing.assert_array_equal(T.elementwise("relu", a).data, [1.0, 0.0])
    with pytest.raises(ValueError):
        T.elementwise("pow", a, a)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_scale_by_tensor_gradient():
    a, s = leaf([1.0, 2.0]), leaf([3.0])
    T.backward(T.tsum(T.scale(a, s)))
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])
    np.testing.assert_array_equal(s.grad, [3.0])


# ---------------------------------------------------------------- linear


def test_linear_identity():
    y = T.linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(y.data, [[1.0, 2.0]])


def test_linear_arithmetic():
    y = T.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0, 3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(y.data, [[6.0]])


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_fan_out_accumulates():
    x = leaf([1.5])
    T.backward(T.tsum(T.add(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        T.backward(T.relu(x))


def test_second_backward_rejected():
    x = leaf([1.0, 2.0])
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(TapeError):
        T.backward(loss)


def test_empty_tape_rejected():
    with pytest.raises(TapeError):
        T.backward(Tensor(1.0))


def test_grads_accumulate_on_leaves_across_passes():
    x = leaf([1.0])
    T.backward(T.tsum(T.scale(x, 2.0)))
    T.backward(T.tsum(T.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [5.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
    assert T.grad_enabled()


def test_non_finite_forward_raises():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        T.scale(Tensor([1e308]), 1e10)


def test_forward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((1, 2, 6, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    a = T.conv3d(Tensor(x), Tensor(w), padding=1).data
    b = T.conv3d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- softmax / cross-entropy


def test_cross_entropy_uniform():
    loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_cross_entropy_gradient_uniform():
    z = leaf([[0.0, 0.0]])
    T.backward(T.softmax_cross_entropy(z, [0]))
    np.testing.assert_allclose(z.grad, [[-0.5, 0.5]], atol=1e-15)


def test_cross_entropy_saturated_is_stable():
    loss = T.softmax_cross_entropy(Tensor([[10.0, -10.0]]), [0]).item()
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-12)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)
    big = T.softmax_cross_entropy(Tensor([[1000.0, -1000.0]]), [1]).item()
    assert big == pytest.approx(2000.0)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(z):
    p = T.softmax(Tensor(z)).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert (p >= 0).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-20, 20)), st.floats(-100, 100))
def test_softmax_shift_invariance(z, c):
    np.testing.assert_allclose(T.softmax(Tensor(z + c)).data, T.softmax(Tensor(z)).data, atol=1e-12)


# ---------------------------------------------------------------- convolution


def naive_conv3d(x, w, stride=1, padding=0, dilation=1):
    B, Ci, D, H, W = x.shape
    Co, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    ke = dilation * (k - 1) + 1
    out_dims = [(n + 2 * padding - ke) // stride + 1 for n in (D, H, W)]
    out = np.zeros((B, Co, *out_dims))
    for b in range(B):
        for o in range(Co):
            for z in range(out_dims[0]):
                for y in range(out_dims[1]):
                    for xx in range(out_dims[2]):
                        patch = xp[b, :, z * stride:z * stride + ke:dilation,
                                   y * stride:y * stride + ke:dilation,
                                   xx * stride:xx * stride + ke:dilation]
                        out[b, o, z, y, xx] = np.sum(patch * w[o])
    return out


@pytest.mark.parametrize("k,stride,padding,dilation,cin,cout,n", [
    (3, 1, 1, 1, 2, 3, 5),
    (5, 1, 2, 1, 1, 2, 6),
    (3, 1, 2, 2, 2, 2, 6),
    (1, 2, 0, 1, 3, 2, 6),
    (3, 2, 1, 1, 2, 2, 7),
    (3, 1, 1, 1, 2, 2, 10),   # large enough for the FFT path
    (5, 1, 4, 2, 1, 1, 9),
])
def test_conv3d_matches_direct_sum(rng, k, stride, padding, dilation, cin, cout, n):
    x = rng.standard_normal((2, cin, n, n, n))
    w = rng.standard_normal((cout, cin, k, k, k))
    got = T.conv3d(Tensor(x), Tensor(w), stride, padding, dilation).data
    np.testing.assert_allclose(got, naive_conv3d(x, w, stride, padding, dilation), atol=1e-10)


def test_conv_single_voxel_with_ones_kernel():
    got = T.conv3d(Tensor(np.full((1, 1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 3, 3, 3))), padding=1)
    np.testing.assert_array_equal(got.data, [[[[[2.5]]]]])


def test_fft_and_direct_paths_agree(rng):
    x = rng.standard_normal((1, 2, 12, 12, 12))
    w = rng.standard_normal((2, 2, 3, 3, 3))
    xp = np.pad(x, ((0, 0), (0, 0)) + ((2, 2),) * 3)
    assert T._use_fft(xp.shape, w.shape, 1)
    fft = T._FFTConv(xp, w, 2, False).forward()
    direct = T._correlate(xp, w, 1, 2)
    np.testing.assert_allclose(fft, direct, atol=1e-11)


def test_depthwise_matches_grouped_direct_sum(rng):
    x = rng.standard_normal((2, 3, 9, 9, 9))
    w = rng.standard_normal((3, 1, 3, 3, 3))
    got = T.depthwise_conv3d(Tensor(x), Tensor(w), padding=2, dilation=2).data
    for c in range(3):
        want = naive_conv3d(x[:, c:c + 1], w[c:c + 1], 1, 2, 2)
        np.testing.assert_allclose(got[:, c:c + 1], want, atol=1e-10)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), Tensor(np.zeros((2, 3, 3, 3, 3))), padding=1)


# ---------------------------------------------------------------- normalization and pooling


def test_normalize_constant_input_is_zero():
    y = T.normalize3d(Tensor(np.full((2, 3, 4, 4, 4), 7.0)), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, 0.0)


def test_normalize_affine_override(rng):
    y = T.normalize3d(Tensor(rng.standard_normal((1, 2, 3, 3, 3))), Tensor(np.zeros(2)), Tensor(np.full(2, 5.0)))
    np.testing.assert_array_equal(y.data, 5.0)


def test_normalize_statistics(rng):
    y = T.normalize3d(Tensor(rng.standard_normal((2, 3, 4, 4, 4)) * 3 + 1), Tensor(np.ones(3)),
                      Tensor(np.zeros(3))).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3, 4)), 1.0, atol=1e-5)


def test_normalize_zero_extent_rejected():
    with pytest.raises(ShapeError):
        T.normalize3d(Tensor(np.zeros((1, 2, 0, 3, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_constant_volume(mode):
    y = T.pool3d(mode, Tensor(np.full((1, 2, 4, 5, 3), 3.25)))
    np.testing.assert_allclose(y.data, 3.25, rtol=0, atol=1e-15)


def brute_pool(x, mode):
    B, C, D, H, W = x.shape
    out = np.zeros_like(x)
    for idx in np.ndindex(D, H, W):
        sl = tuple(slice(max(i - 1, 0), min(i + 2, n)) for i, n in zip(idx, (D, H, W)))
        win = x[(slice(None), slice(None)) + sl]
        red = win.max(axis=(2, 3, 4)) if mode == "max" else win.mean(axis=(2, 3, 4))
        out[(slice(None), slice(None)) + idx] = red
    return out


def test_max_pool_on_counting_cube():
    x = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    y = T.pool3d("max", Tensor(x)).data
    np.testing.assert_array_equal(y, brute_pool(x, "max"))
    np.testing.assert_array_equal(y, 8.0)


@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_matches_window_scan(rng, mode):
    x = rng.standard_normal((2, 2, 4, 5, 6))
    np.testing.assert_allclose(T.pool3d(mode, Tensor(x)).data, brute_pool(x, mode), atol=1e-14)


def test_global_avg_pool(rng):
    x = rng.standard_normal((2, 3, 2, 3, 4))
    np.testing.assert_allclose(T.global_avg_pool(Tensor(x)).data, x.mean(axis=(2, 3, 4)), atol=1e-15)


def test_concat_gradient_splits():
    a, b = leaf(np.ones((1, 1, 2, 2, 2))), leaf(np.ones((1, 2, 2, 2, 2)))
    y = T.concat([a, b], axis=1)
    assert y.shape == (1, 3, 2, 2, 2)
    r = np.arange(24.0).reshape(1, 3, 2, 2, 2)
    T.backward(T.tsum(T.mul(y, Tensor(r))))
    np.testing.assert_array_equal(a.grad, r[:, :1])
    np.testing.assert_array_equal(b.grad, r[:, 1:])
