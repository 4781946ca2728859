import math

import numpy as np
import pytest
import scipy.special

from glmmtool.core.family import FAMILIES, ATTENUATION_LOGIT, get_family
from glmmtool.exceptions import ParameterError, SupportError

CASES = [('gaussian', 'identity', 1.3), ('gaussian', 'log', 0.7), ('binomial', 'logit', 1.0),
         ('binomial', 'probit', 1.0), ('binomial', 'log', 1.0), ('poisson', 'log', 1.0),
         ('poisson', 'identity', 1.0), ('gamma', 'log', 2.5), ('gamma', 'inverse', 2.5), ('beta', 'logit', 4.0)]


def _outcomes(family, rng, eta, phi):
    return family.sample(rng, family.mean(eta), phi)


def _eta(link, rng, size=20):
    if link == 'log':
        return rng.uniform(-1.5, -0.2, size=size)
    if link == 'inverse':
        return rng.uniform(0.5, 2.0, size=size)
    if link == 'identity':
        return rng.uniform(0.5, 3.0, size=size)
    return rng.uniform(-2.0, 2.0, size=size)


@pytest.mark.parametrize('name, link, phi', CASES)
def test_score_is_derivative_of_loglik(rng, name, link, phi):
    family = get_family(name, link)
    eta = _eta(link, rng)
    y = _outcomes(family, rng, eta, phi)
    h = 1e-6
    numeric = (family.loglik_eta(y, eta + h, phi) - family.loglik_eta(y, eta - h, phi)) / (2 * h)
    np.testing.assert_allclose(family.score_eta(y, eta, phi), numeric, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize('name, link, phi', CASES)
def test_link_round_trip(rng, name, link, phi):
    family = get_family(name, link)
    eta = _eta(link, rng)
    np.testing.assert_allclose(family.link.link(family.mean(eta)), eta, rtol=1e-10)


def test_weights_are_fisher_information():
    family = get_family('binomial')
    eta = np.array([-1.0, 0.0, 2.0])
    p = scipy.special.expit(eta)
    np.testing.assert_allclose(family.weights(eta, 1.0), p * (1 - p))
    np.testing.assert_allclose(get_family('poisson').weights(eta, 1.0), np.exp(eta))
    np.testing.assert_allclose(get_family('gaussian').weights(eta, 2.0), np.full(3, 0.25))


def test_logit_loglik_matches_bernoulli():
    family = get_family('binomial')
    eta = np.array([-30.0, 0.3, 40.0])
    y = np.array([0.0, 1.0, 1.0])
    expected = y * np.log(scipy.special.expit(eta)) + (1 - y) * np.log(scipy.special.expit(-eta))
    np.testing.assert_allclose(family.loglik_eta(y, eta, 1.0), expected, rtol=1e-12, atol=1e-12)


def test_attenuation():
    variance = np.array([0.0, 0.5])
    eta = np.array([1.0, 1.0])
    np.testing.assert_allclose(get_family('poisson').attenuate(eta, variance), [1.0, 1.25])
    np.testing.assert_allclose(get_family('binomial').attenuate(eta, variance),
                               [1.0, 1 / math.sqrt(1 + ATTENUATION_LOGIT * 0.5)])
    np.testing.assert_allclose(get_family('binomial', 'probit').attenuate(eta, variance), [1.0, 1 / math.sqrt(1.5)])
    np.testing.assert_array_equal(get_family('gaussian').attenuate(eta, variance), eta)
    assert ATTENUATION_LOGIT == pytest.approx(0.3458, abs=1e-4)


def test_support_checked():
    with pytest.raises(SupportError):
        get_family('binomial', 'identity').weights(np.array([0.5, 1.2]), 1.0)
    with pytest.raises(SupportError):
        get_family('poisson', 'identity').check_support(np.array([-1.0]))


def test_unknown_family_and_link():
    with pytest.raises(ParameterError):
        get_family('tweedie')
    with pytest.raises(ParameterError):
        get_family('poisson', 'logit')


def test_sampling_moments(rng):
    mu = np.full(20000, 0.3)
    for name, phi, variance in [('binomial', 1.0, 0.21), ('beta', 5.0, 0.21 / 6)]:
        y = FAMILIES[name]().sample(rng, mu, phi)
        assert abs(y.mean() - 0.3) < 4 * math.sqrt(variance / len(y))
    y = get_family('gamma').sample(rng, np.full(20000, 2.0), 4.0)
    assert abs(y.mean() - 2.0) < 4 * math.sqrt(1.0 / 20000)
