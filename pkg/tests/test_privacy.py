import math

import numpy as np
import pytest

from vimfl.privacy import (CalibrationError, DpPolicy, PrivacySpend, calibrate_sigma,
                           clip_frobenius, gaussian_perturb, label_dp_epsilon,
                           label_dp_randomize, rdp_epsilon)


def _oracle(T, sigma, delta, n=200_000):
    a = np.linspace(1.0, 4096.0, n + 1)[1:]
    vals = T * a / (2 * sigma ** 2) + np.log((a - 1) / a) - (math.log(delta) + np.log(a)) / (a - 1)
    return float(vals.min())


def test_clip_leaves_small_matrix_alone():
    A = np.array([[0.3, 0.4]])
    np.testing.assert_array_equal(clip_frobenius(A, 1.0), A)


def test_clip_rescales_to_bound():
    A = np.array([[3.0, 4.0]])
    np.testing.assert_allclose(clip_frobenius(A, 1.0), [[0.6, 0.8]])
    rng = np.random.default_rng(0)
    for _ in range(200):
        B = rng.standard_normal((5, 4)) * rng.uniform(0.1, 100)
        assert np.linalg.norm(clip_frobenius(B, 0.7)) <= 0.7


def test_clip_rejects_nonpositive_threshold():
    with pytest.raises(ValueError):
        clip_frobenius(np.ones(2), 0.0)


def test_noise_std_matches_sigma_times_clip():
    out = gaussian_perturb(np.zeros((200, 200)), 3.0, 0.5, np.random.default_rng(1))
    assert abs(out.std() / 1.5 - 1) < 0.02
    assert abs(out.mean()) < 0.02


def test_zero_sigma_is_identity():
    A = np.ones((2, 2))
    np.testing.assert_array_equal(gaussian_perturb(A, 0.0, 1.0, np.random.default_rng(0)), A)


def test_policy_noise_is_keyed_by_client_and_round():
    pol = DpPolicy(clip=1.0, sigma=1.0, seed=4)
    A = np.ones((3, 2))
    np.testing.assert_array_equal(pol.privatize(A, 1, 2), pol.privatize(A, 1, 2))
    assert not np.array_equal(pol.privatize(A, 1, 2), pol.privatize(A, 2, 2))
    assert not np.array_equal(pol.privatize(A, 1, 2), pol.privatize(A, 1, 3))


@pytest.mark.parametrize("bad", [dict(clip=0.0, sigma=1.0), dict(clip=1.0, sigma=-1.0),
                                 dict(clip=1.0, sigma=1.0, delta=1.0)])
def test_policy_validation(bad):
    with pytest.raises(ValueError):
        DpPolicy(**bad)


@pytest.mark.parametrize("T,sigma,delta", [(1, 2, 1e-5), (100, 5, 1e-6), (530, 10, 1e-5),
                                           (5000, 70, 1e-7), (10, 30, 1e-5)])
def test_rdp_epsilon_against_dense_grid(T, sigma, delta):
    eps, alpha = rdp_epsilon(T, sigma, delta)
    assert eps <= _oracle(T, sigma, delta) + 1e-9
    assert eps == pytest.approx(_oracle(T, sigma, delta), abs=1e-4)
    assert 1 < alpha <= 4096


def test_rdp_epsilon_closed_form_point():
    # the returned alpha must reproduce the returned epsilon
    eps, a = rdp_epsilon(50, 4.0, 1e-5)
    direct = 50 * a / 32 + math.log((a - 1) / a) - (math.log(1e-5) + math.log(a)) / (a - 1)
    assert eps == pytest.approx(direct, abs=1e-12)


def test_zero_rounds_costs_almost_nothing():
    assert rdp_epsilon(0, 5.0, 1e-5)[0] < 1e-3


def test_rdp_monotone():
    Ts = [1, 10, 100, 530, 5000]
    sig = [2, 5, 10, 30, 70]
    for s in sig:
        e = [rdp_epsilon(T, s, 1e-5)[0] for T in Ts]
        assert all(a < b for a, b in zip(e, e[1:]))
    for T in Ts:
        e = [rdp_epsilon(T, s, 1e-5)[0] for s in sig]
        assert all(a > b for a, b in zip(e, e[1:]))


@pytest.mark.parametrize("args", [(-1, 1.0, 1e-5), (1, 0.0, 1e-5), (1, 1.0, 0.0)])
def test_rdp_argument_checks(args):
    with pytest.raises(ValueError):
        rdp_epsilon(*args)


def test_calibrate_roundtrip():
    for T, eps in [(530, 8.0), (100, 1.0), (10, 0.5)]:
        s = calibrate_sigma(T, eps, 1e-5)
        got = rdp_epsilon(T, s, 1e-5)[0]
        assert eps * (1 - 1e-3) <= got <= eps


def test_calibrate_errors():
    with pytest.raises(CalibrationError):
        calibrate_sigma(10, 0.0, 1e-5)
    with pytest.raises(CalibrationError):
        calibrate_sigma(1e9, 1e-3, 1e-5)


def test_spend_takes_max_over_clients():
    sp = PrivacySpend(5.0, 1e-5)
    for _ in range(3):
        sp.step(0)
    sp.step(1)
    assert sp.epsilon() == pytest.approx(rdp_epsilon(3, 5.0, 1e-5)[0])
    assert sp.client_epsilon(1) < sp.client_epsilon(0)


def test_label_dp_epsilon_values():
    assert round(label_dp_epsilon(1.0), 1) == 2.8
    assert round(label_dp_epsilon(2.0), 1) == 1.4
    assert label_dp_epsilon(1.0) == pytest.approx(2.828, abs=1e-3)


def test_label_dp_extremes():
    y = np.arange(1000) % 10
    kept, _ = label_dp_randomize(y, 10, 1e-6, np.random.default_rng(0))
    np.testing.assert_array_equal(kept, y)
    noisy, _ = label_dp_randomize(np.zeros(20000, dtype=int), 10, 1e4, np.random.default_rng(1))
    counts = np.bincount(noisy, minlength=10) / 20000
    assert np.abs(counts - 0.1).max() < 0.01
    with pytest.raises(ValueError):
        label_dp_randomize(y, 10, 0.0, np.random.default_rng(0))
