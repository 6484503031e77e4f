from __future__ import annotations

import numpy as np
import pytest
from scipy import special

from convdraw_compression import tensor as T
from convdraw_compression.errors import ContractViolation
from convdraw_compression.gradcheck import grad_check
from convdraw_compression.tensor import Tensor, no_grad

TOLERANCE = 1e-5


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _naive_conv(x, w, b, stride, padding):
    n, _, h, wd = x.shape
    out_c, _, kh, kw = w.shape
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, out_c, oh, ow))
    for i in range(oh):
        for j in range(ow):
            patch = padded[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1)
    np.testing.assert_allclose(out.data, _naive_conv(x, w, b, 2, 1), rtol=1e-12, atol=1e-12)


def test_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    forward = T.conv2d(Tensor(a), Tensor(k), stride=2, padding=1)
    b = rng.normal(size=forward.shape)
    back = T.conv_transpose2d(Tensor(b), Tensor(k), stride=2, padding=1)
    assert back.shape == a.shape
    assert np.sum(forward.data * b) == pytest.approx(np.sum(a * back.data), rel=1e-12)


def test_conv_transpose_output_padding():
    x = Tensor(np.ones((1, 3, 2, 2)))
    k = Tensor(np.ones((3, 1, 3, 3)))
    assert T.conv_transpose2d(x, k, stride=2, padding=1).shape == (1, 1, 3, 3)
    assert T.conv_transpose2d(x, k, stride=2, padding=1, output_padding=1).shape == (1, 1, 4, 4)
    with pytest.raises(ContractViolation):
        T.conv_transpose2d(x, k, stride=2, padding=1, output_padding=2)


def test_conv_shape_errors():
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(ContractViolation):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((2, 1, 3, 3))), Tensor(np.ones(3)))


def test_conv2d_gradients():
    rng = np.random.default_rng(2)
    params = {"x": _param(rng, 2, 2, 5, 5), "w": _param(rng, 3, 2, 3, 3), "b": _param(rng, 3)}
    projection = rng.normal(size=(2, 3, 3, 3))

    def loss():
        out = T.conv2d(params["x"], params["w"], params["b"], stride=2, padding=1)
        return T.sum(T.tanh(out) * projection)

    assert grad_check(loss, params).max_rel_error < TOLERANCE


def test_conv_transpose2d_gradients():
    rng = np.random.default_rng(3)
    params = {"x": _param(rng, 1, 3, 3, 3), "w": _param(rng, 3, 2, 3, 3), "b": _param(rng, 2)}
    projection = rng.normal(size=(1, 2, 6, 6))

    def loss():
        out = T.conv_transpose2d(params["x"], params["w"], params["b"], stride=2, padding=1, output_padding=1)
        return T.sum(T.sigmoid(out) * projection)

    assert grad_check(loss, params).max_rel_error < TOLERANCE


def test_pointwise_and_shape_gradients():
    rng = np.random.default_rng(4)
    params = {"a": _param(rng, 2, 4, 2, 2), "b": _param(rng, 1, 2, 1, 1)}

    def loss():
        a, b = params["a"], params["b"]
        left = T.channel_slice(a, 0, 2)
        right = T.channel_slice(a, 2, 4)
        mixed = T.softplus(left) * T.exp(right * 0.3) - T.expm1(b * 0.5) + T.square(left - b)
        joined = T.concat([mixed, T.tile_batch(T.reshape(T.broadcast_to(b, (1, 2, 2, 2)), (1, 2, 2, 2)), 2)])
        return T.mean(T.sum(joined, axis=(1, 2, 3)))

    assert grad_check(loss, params).max_rel_error < TOLERANCE


def test_clip_blocks_gradient_outside_range():
    x = Tensor(np.array([-3.0, 0.5, 3.0]), requires_grad=True)
    T.sum(T.clip(x, -1.0, 1.0)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_gaussian_bin_log_mass_values_and_gradients():
    rng = np.random.default_rng(5)
    x = rng.uniform(0.0, 1.0, size=(1, 1, 3, 3))
    params = {"mean": _param(rng, 1, 1, 3, 3, scale=0.3), "log_var": _param(rng, 1, 1, 3, 3, scale=0.5)}
    half = 0.5 / 256.0
    out = T.gaussian_bin_log_mass(x, params["mean"], params["log_var"], half)
    sigma = np.exp(0.5 * params["log_var"].data)
    direct = np.log(
        special.ndtr((x + half - params["mean"].data) / sigma) - special.ndtr((x - half - params["mean"].data) / sigma)
    )
    np.testing.assert_allclose(out.data, direct, rtol=1e-7)

    def loss():
        return T.sum(T.gaussian_bin_log_mass(x, params["mean"], params["log_var"], half))

    assert grad_check(loss, params, eps=1e-6).max_rel_error < 1e-5


def test_gaussian_bin_log_mass_far_tail_is_finite():
    mean = Tensor(np.zeros((1, 1, 1, 1)))
    log_var = Tensor(np.full((1, 1, 1, 1), -10.0))
    out = T.gaussian_bin_log_mass(np.ones((1, 1, 1, 1)), mean, log_var, 0.5 / 256.0)
    assert np.isfinite(out.data).all()
    assert out.data.item() <= -700.0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = T.sum(x * x)
    assert not y.requires_grad
    y2 = T.sum(x * x)
    assert y2.requires_grad
    y2.backward()
    assert x.grad.tolist() == [2.0, 2.0, 2.0]


def test_gradients_accumulate_over_shared_nodes():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    (y + y).backward(np.ones(1))
    assert x.grad.tolist() == [6.0]


def test_tensor4_validates_input():
    with pytest.raises(ContractViolation):
        T.tensor4(np.ones((2, 2)))
    with pytest.raises(ContractViolation):
        T.tensor4(np.full((1, 1, 1, 1), np.nan))
