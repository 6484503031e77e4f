from __future__ import annotations

import math

import numpy as np
import pytest

from convdraw_compression.errors import ContractViolation
from convdraw_compression.likelihood import (
    LN2,
    GaussianParams,
    bits_per_dim,
    elbo_loss,
    gaussian_kl,
    input_nll_bernoulli,
    input_nll_gaussian,
    input_nll_gaussian_bins,
    nats_to_bits,
    nll_from_log_density,
)
from convdraw_compression.tensor import Tensor


def _gaussian(mu, log_var):
    return GaussianParams(Tensor(np.asarray(mu, dtype=np.float64)), Tensor(np.asarray(log_var, dtype=np.float64)))


def test_uniform_density_is_eight_bits_per_dim():
    nats = nll_from_log_density(np.zeros((1, 3, 4, 4)), 1.0 / 256.0)
    assert bits_per_dim(nats[0], 48) == pytest.approx(8.0, abs=1e-9)


def test_bernoulli_zero_logits_cost_ln2_per_pixel():
    x = Tensor(np.zeros((2, 1, 28, 28)))
    nll = input_nll_bernoulli(x, Tensor(np.zeros((2, 1, 28, 28))))
    np.testing.assert_allclose(nll.data, 784 * LN2)
    assert nll.data[0] == pytest.approx(543.4, abs=0.05)


def test_bernoulli_needs_binary_pixels():
    with pytest.raises(ContractViolation):
        input_nll_bernoulli(Tensor(np.full((1, 1, 2, 2), 0.5)), Tensor(np.zeros((1, 1, 2, 2))))


def test_kl_closed_form_matches_monte_carlo():
    q = _gaussian([0.7], [-0.4])
    p = _gaussian([-0.2], [0.3])
    rng = np.random.default_rng(0)
    sigma_q, sigma_p = math.exp(-0.2), math.exp(0.15)
    z = 0.7 + sigma_q * rng.standard_normal(400_000)
    log_q = -0.5 * ((z - 0.7) / sigma_q) ** 2 - math.log(sigma_q)
    log_p = -0.5 * ((z + 0.2) / sigma_p) ** 2 - math.log(sigma_p)
    assert gaussian_kl(q, p).data[0] == pytest.approx(np.mean(log_q - log_p), abs=5e-3)


def test_kl_is_non_negative_and_zero_for_equal_distributions():
    rng = np.random.default_rng(1)
    q = _gaussian(rng.normal(size=100), rng.normal(size=100) * 3)
    p = _gaussian(rng.normal(size=100), rng.normal(size=100) * 3)
    assert np.all(gaussian_kl(q, p).data >= 0.0)
    near = _gaussian([0.1], [1e-9])
    assert gaussian_kl(near, _gaussian([0.1], [0.0])).data[0] >= 0.0
    assert gaussian_kl(p, p).data.max() == 0.0


def test_gaussian_density_cost():
    s = 1.0 / 256.0
    x = Tensor(np.full((1, 1, 2, 2), 0.5))
    r = Tensor(np.concatenate([np.full((1, 1, 2, 2), 0.5), np.zeros((1, 1, 2, 2))], axis=1))
    expected = 4 * (0.5 * math.log(2 * math.pi) - math.log(s))
    assert input_nll_gaussian(x, r, s).data[0] == pytest.approx(expected)


def test_sharp_gaussian_density_can_go_negative():
    s = 1.0 / 256.0
    x = Tensor(np.full((1, 1, 1, 1), 0.5))
    r = Tensor(np.array([0.5, -14.0]).reshape(1, 2, 1, 1))
    assert input_nll_gaussian(x, r, s).data[0] < 0.0
    assert input_nll_gaussian_bins(x, r, s).data[0] >= 0.0


def test_bin_integrated_cost_bounds_density_cost_for_wide_pixels():
    s = 1.0 / 256.0
    rng = np.random.default_rng(2)
    x = Tensor(rng.integers(0, 256, size=(1, 1, 3, 3)) / 255.0)
    r = Tensor(np.concatenate([np.full((1, 1, 3, 3), 0.5), np.full((1, 1, 3, 3), -2.0)], axis=1))
    binned = input_nll_gaussian_bins(x, r, s).data[0]
    density = input_nll_gaussian(x, r, s).data[0]
    assert binned == pytest.approx(density, rel=1e-3)


def test_canvas_channel_count_is_checked():
    with pytest.raises(ContractViolation):
        input_nll_gaussian(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2))), 1 / 256)
    with pytest.raises(ContractViolation):
        input_nll_gaussian(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 2, 2, 2))), 0.0)


def test_unit_conversions():
    assert nats_to_bits(LN2) == pytest.approx(1.0)
    assert bits_per_dim(784 * LN2, 784) == pytest.approx(1.0)


def test_elbo_loss_requires_positive_beta():
    with pytest.raises(ContractViolation):
        elbo_loss([], Tensor(np.zeros(1)), 0.0)
