import math

import numpy as np
import pytest
from scipy import integrate, stats

from pfeddsu.privacy import (DEFAULT_ORDERS, CalibrationError, PrivacyError, PrivacyParams, RdpLedger,
                             add_masked_noise, calibrate_sigma, clip_update, compose, epsilon_after,
                             epsilon_at_delta, privacy_report, rdp_of_subsampled_gaussian, rdp_vector,
                             sigma_grid_point)
from pfeddsu.sparsify import SparseDelta, compute_mask
from pfeddsu.tensor import Rng


def quadrature_rdp(q, sigma, alpha):
    """RDP of the sampled Gaussian by numerically integrating E_mu0[(mix/mu0)^alpha]."""
    mu0 = stats.norm(0, sigma).pdf
    mu1 = stats.norm(1, sigma).pdf
    f = lambda z: mu0(z) * ((1 - q) + q * mu1(z) / mu0(z)) ** alpha
    lo, hi = -12 * sigma - 2, 12 * sigma + 2 + alpha / sigma
    val, _ = integrate.quad(f, lo, hi, limit=400, epsabs=0, epsrel=1e-13, points=[0.0, 1.0])
    return math.log(val) / (alpha - 1)


@pytest.mark.parametrize("q,sigma,alpha", [
    (0.5, 2.0, 2), (0.5, 2.0, 8), (0.1, 1.5, 4), (0.05, 4.0, 16), (0.3, 1.0, 3), (0.5, 17.56, 24),
])
def test_integer_order_matches_quadrature(q, sigma, alpha):
    assert math.isclose(rdp_of_subsampled_gaussian(q, sigma, alpha), quadrature_rdp(q, sigma, alpha),
                        rel_tol=1e-7)


@pytest.mark.parametrize("q,sigma,alpha", [(0.5, 2.0, 1.5), (0.1, 1.5, 2.5), (0.5, 3.0, 1.25)])
def test_fractional_order_is_an_upper_bound(q, sigma, alpha):
    exact = quadrature_rdp(q, sigma, alpha)
    bound = rdp_of_subsampled_gaussian(q, sigma, alpha)
    assert exact <= bound + 1e-12
    # never looser than the next integer order
    assert bound <= rdp_of_subsampled_gaussian(q, sigma, math.ceil(alpha))


def test_full_participation_closed_form():
    for a in DEFAULT_ORDERS:
        assert math.isclose(rdp_of_subsampled_gaussian(1.0, 3.0, a), a / 18.0, rel_tol=1e-15)


def test_rdp_monotone_and_edge_cases():
    r = [rdp_of_subsampled_gaussian(0.3, s, 8) for s in (0.8, 1.0, 2.0, 5.0)]
    assert all(a > b for a, b in zip(r, r[1:]))
    assert rdp_of_subsampled_gaussian(0.3, 0.0, 8) == math.inf
    with pytest.raises(ValueError):
        rdp_of_subsampled_gaussian(0.3, 1.0, 1.0)
    with pytest.raises(ValueError):
        rdp_of_subsampled_gaussian(0.0, 1.0, 2)


def test_composition_is_exactly_additive():
    inc = rdp_vector(0.37, 1.3)
    led = RdpLedger()
    for _ in range(77):
        led = compose(led, inc)
    assert led.rounds == 77
    assert np.array_equal(led.rdp, inc * 77)
    assert np.array_equal(compose(RdpLedger(), inc, 77).rdp, led.rdp)
    with pytest.raises(ValueError):
        compose(led, inc[:-1])


def test_epsilon_at_delta_brute_force_and_errors():
    led = compose(RdpLedger(), rdp_vector(0.5, 1.7), 30)
    eps, order = epsilon_at_delta(led, 1e-5)
    brute = min(r + math.log(1e5) / (a - 1) for r, a in zip(led.rdp, led.orders))
    assert eps == brute and order in led.orders
    with pytest.raises(PrivacyError):
        epsilon_at_delta(RdpLedger(), 1e-5)
    with pytest.raises(ValueError):
        epsilon_at_delta(led, 1.0)
    assert epsilon_after(0.5, 0.0, 3, 1e-5)[0] == math.inf


def test_calibration_round_trip():
    sigma = calibrate_sigma(1.0, 1e-5, 0.5, 50)
    assert epsilon_after(0.5, sigma, 50, 1e-5)[0] <= 1.0 < epsilon_after(0.5, sigma / 1.01, 50, 1e-5)[0]
    assert math.isclose(sigma, sigma_grid_point(round(math.log(sigma, 1.01))), rel_tol=1e-12)


def test_calibration_unattainable():
    with pytest.raises(CalibrationError):
        calibrate_sigma(1e-9, 1e-5, 1.0, 1000)


def test_privacy_report_fields():
    p = PrivacyParams(0.01, 2.0, 0.5, 20)
    rep = privacy_report(compose(RdpLedger(), rdp_vector(0.5, 2.0), 3), 2, p)
    assert rep["round"] == 2 and rep["C"] == 0.01 and rep["sigma"] == 2.0
    assert len(rep["rdp"]) == len(rep["orders"]) and rep["epsilon"] > 0


def test_privacy_params_validation_and_std():
    p = PrivacyParams(0.01, 4.0, 0.25, 16)
    assert math.isclose(p.noise_std, 4.0 * 0.01 / 2.0)
    for bad in [dict(clip=0), dict(sigma=-1), dict(sample_prob=0), dict(sample_prob=1.5),
                dict(num_clients=0), dict(delta=0)]:
        with pytest.raises(ValueError):
            PrivacyParams(**{**dict(clip=1, sigma=1, sample_prob=0.5, num_clients=2), **bad})


def test_clip_passthrough_and_scaling():
    small = SparseDelta.from_layers([np.array([0.003, 0.004])], None)
    assert clip_update(small, 0.01) is small
    big = SparseDelta.from_layers([np.array([3.0, 4.0]), np.array([12.0])], None)
    c = clip_update(big, 0.5)
    assert math.isclose(c.norm, 0.5, rel_tol=1e-15)
    np.testing.assert_allclose(c.flat() / big.flat(), 0.5 / 13.0, rtol=1e-15)


def test_masked_noise_support_and_scale():
    layers = [np.zeros(40_000), np.zeros(60_000)]
    mask = compute_mask([np.arange(40_000.0), np.arange(60_000.0)], 0.5, dense_prefix=1)
    p = PrivacyParams(0.1, 3.0, 0.5, 8)
    noisy = add_masked_noise(SparseDelta.from_layers(layers, mask), p, mask, Rng(3))
    assert not np.any(noisy.layers[1][~mask.layers[1]])
    vals = np.concatenate([noisy.layers[0], noisy.layers[1][mask.layers[1]]])
    assert abs(vals.std() / p.noise_std - 1) < 0.01
    zero = PrivacyParams(0.1, 0.0, 0.5, 8)
    d = SparseDelta.from_layers(layers, mask)
    assert add_masked_noise(d, zero, mask, Rng(3)) is d
