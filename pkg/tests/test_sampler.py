import math

import numpy as np
import pytest

from glmmtool.exceptions import ConfigError, SamplerError
from glmmtool.fitting.sampler import HmcOptions, HmcSampler, chain_ess


def standard_normal(v):
    return -0.5 * v @ v, -v


def test_standard_normal_moments(rng):
    options = HmcOptions(warmup=300, adapt=100, samples=2000)
    trace = HmcSampler(standard_normal, 3, options, rng).sample()
    assert trace.samples.shape == (3, 2000)
    np.testing.assert_allclose(trace.samples.mean(axis=1), 0.0, atol=0.15)
    np.testing.assert_allclose(trace.samples.var(axis=1), 1.0, atol=0.25)
    assert trace.accept_rate > 0.8
    assert trace.n_divergent == 0
    assert trace.n_steps <= options.max_steps


def test_correlated_target(rng):
    covariance = np.array([[1.0, 0.8], [0.8, 1.0]])
    precision = np.linalg.inv(covariance)

    def log_density(v):
        return -0.5 * v @ precision @ v, -precision @ v

    trace = HmcSampler(log_density, 2, HmcOptions(warmup=300, adapt=100, samples=3000), rng).sample()
    assert np.corrcoef(trace.samples)[0, 1] == pytest.approx(0.8, abs=0.08)


def test_step_size_kept_between_calls(rng):
    sampler = HmcSampler(standard_normal, 2, HmcOptions(warmup=60, adapt=50, samples=10), rng)
    sampler.sample()
    step_size = sampler.step_size
    assert step_size > 0
    trace = sampler.sample(np.ones(2))
    assert trace.samples.shape == (2, 10)


def test_trajectory_length_capped(rng):
    sampler = HmcSampler(standard_normal, 1, HmcOptions(max_steps=7, integration_time=100.0), rng)
    assert sampler.n_steps(0.01) == 7
    assert sampler.n_steps(50.0) == 2


def test_leapfrog_conserves_energy(rng):
    sampler = HmcSampler(standard_normal, 2, HmcOptions(), rng)
    v, p = np.array([1.0, -0.5]), np.array([0.3, 0.2])
    v_new, p_new, logp, _ = sampler.leapfrog(v, p, -v, 0.01, 100)
    assert logp - 0.5 * p_new @ p_new == pytest.approx(-0.5 * v @ v - 0.5 * p @ p, abs=1e-4)


def test_non_finite_start(rng):
    sampler = HmcSampler(lambda v: (-math.inf, np.zeros_like(v)), 2, HmcOptions(), rng)
    with pytest.raises(SamplerError):
        sampler.sample()


def test_invalid_options():
    with pytest.raises(ConfigError):
        HmcOptions(warmup=10, adapt=20)
    with pytest.raises(ConfigError):
        HmcOptions(target_accept=1.0)
    with pytest.raises(ConfigError):
        HmcOptions(samples=0)


def test_chain_ess(rng):
    independent = rng.standard_normal((2, 20000))
    np.testing.assert_allclose(chain_ess(independent), 20000, rtol=0.1)

    autoregressive = np.empty(20000)
    autoregressive[0] = 0.0
    noise = rng.standard_normal(20000)
    for k in range(1, 20000):
        autoregressive[k] = 0.5 * autoregressive[k - 1] + noise[k]
    assert chain_ess(autoregressive)[0] == pytest.approx(20000 / 3, rel=0.15)
    assert chain_ess(np.ones(50))[0] == 50


@pytest.mark.slow
def test_prior_only_target(rng):
    options = HmcOptions(warmup=500, adapt=200, samples=10000)
    trace = HmcSampler(standard_normal, 4, options, rng).sample()
    assert np.all(np.abs(trace.samples.mean(axis=1)) < 0.05)
    assert np.all((trace.samples.var(axis=1) > 0.9) & (trace.samples.var(axis=1) < 1.1))
    assert options.target_accept - 0.1 <= trace.accept_rate <= 1.0
