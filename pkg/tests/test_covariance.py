import math

import numpy as np
import pandas as pd
import pytest
import scipy.linalg
import scipy.stats

from glmmtool.core.covariance import Covariance
from glmmtool.core.nelder import nelder
from glmmtool.exceptions import CovarianceError, ParameterError


@pytest.fixture
def cluster_periods():
    return nelder('~(j(4) * t(5)) > i(5)')


def test_cluster_period_indicators(cluster_periods):
    covariance = Covariance('~ (1|gr(j,t))', cluster_periods, theta=[0.05])
    Z = covariance.Z.toarray()
    assert Z.shape == (100, 20)
    np.testing.assert_array_equal(Z[:5, 0], np.ones(5))
    np.testing.assert_array_equal(Z.sum(axis=1), np.ones(100))
    np.testing.assert_allclose(covariance.build_D().diagonal(), np.full(20, 0.0025))
    assert covariance.build_D().nnz == 20


def test_single_cluster_and_slope():
    data = pd.DataFrame({'j': [1.0, 1.0], 'x': [2.0, 3.0]})
    assert Covariance('~ (1|gr(j))', data).Z.toarray().tolist() == [[1.0], [1.0]]
    assert Covariance('~ (x|gr(j))', data).Z.toarray().tolist() == [[2.0], [3.0]]


def test_additive_blocks_marginal_covariance():
    data = nelder('~(cl(2) * t(2)) > i(2)')
    covariance = Covariance('~ (1|gr(cl)) + (1|gr(cl,t))', data, theta=[0.25, 0.1])
    marginal = covariance.marginal().toarray()
    assert marginal[0, 1] == pytest.approx(0.25 ** 2 + 0.1 ** 2)
    assert marginal[0, 2] == pytest.approx(0.25 ** 2)
    assert marginal[0, 4] == 0.0


def test_entry_evaluation(cluster_periods):
    covariance = Covariance('~ (1|gr(j)*fexp0(t))', cluster_periods, theta=[0.25, 0.8])
    assert covariance.n_blocks == 4
    assert covariance.eval_D_entry(0, 0, 0) == pytest.approx(0.0625)
    assert covariance.eval_D_entry(1, 0, 1) == pytest.approx(0.0625 * math.exp(-1 / 0.8))
    assert covariance.eval_D_entry(0, 2, 2, theta=[0.5, 0.8]) == pytest.approx(0.25)


def test_parameter_checks(cluster_periods):
    covariance = Covariance('~ (1|gr(j)*ar1(t))', cluster_periods)
    with pytest.raises(ParameterError):
        covariance.update_parameters([0.25, 1.5])
    with pytest.raises(ParameterError):
        covariance.update_parameters([0.25])
    assert covariance.parameter_labels == ['gr(j)[1]', 'ar1(t)[1]']


@pytest.mark.parametrize('formula, theta', [('~ (1|gr(j)*ar1(t))', [0.4, 0.7]),
                                            ('~ (1|gr(j)*fexp0(t))', [0.3, 1.2]),
                                            ('~ (1|fexp(t))', [0.5, 2.0]),
                                            ('~ (1|gr(j)) + (1|gr(j,t))', [0.3, 0.2]),
                                            ('~ (1|gr(j)*matern(t))', [0.5, 1.5, 2.0]),
                                            ('~ (1|wend1(t))', [1.0, 2.0])])
def test_factorisation_and_density(rng, cluster_periods, formula, theta):
    effective_range = 3.0 if 'wend' in formula else None
    sparse_cov = Covariance(formula, cluster_periods, theta=theta, effective_range=effective_range)
    block_cov = Covariance(formula, cluster_periods, theta=theta, sparse=False, effective_range=effective_range)
    D = sparse_cov.build_D().toarray()
    np.testing.assert_array_equal(D, D.T)
    for covariance in (sparse_cov, block_cov):
        L = covariance.cholesky().toarray()
        np.testing.assert_array_equal(L, np.tril(L))
        assert np.linalg.norm(L @ L.T - D) / np.linalg.norm(D) < 1e-10
        assert covariance.log_determinant() == pytest.approx(np.linalg.slogdet(D)[1], rel=1e-8)

    u = rng.standard_normal(sparse_cov.Q)
    expected = scipy.stats.multivariate_normal(np.zeros(len(D)), D).logpdf(u)
    assert sparse_cov.mvn_loglik(u) == pytest.approx(expected, abs=1e-9 * max(1.0, abs(expected)))
    assert block_cov.mvn_loglik(u) == pytest.approx(sparse_cov.mvn_loglik(u), abs=1e-9 * max(1.0, abs(expected)))


def test_one_dimensional_densities():
    data = pd.DataFrame({'j': [1.0]})
    assert Covariance('~ (1|gr(j))', data, theta=[1.0]).mvn_loglik(np.zeros(1)) == pytest.approx(-0.9189385, abs=1e-7)
    assert Covariance('~ (1|gr(j))', data, theta=[2.0]).mvn_loglik(np.array([2.0])) == \
        pytest.approx(-2.1120857, abs=1e-7)


def test_density_of_several_draws(rng, cluster_periods):
    covariance = Covariance('~ (1|gr(j)*ar1(t))', cluster_periods, theta=[0.4, 0.7])
    U = rng.standard_normal((covariance.Q, 3))
    np.testing.assert_allclose(covariance.mvn_loglik(U), [covariance.mvn_loglik(U[:, k]) for k in range(3)])
    with pytest.raises(ValueError):
        covariance.mvn_loglik(np.zeros(covariance.Q + 1))


def test_explicit_theta_does_not_touch_cache(cluster_periods):
    covariance = Covariance('~ (1|gr(j)*ar1(t))', cluster_periods, theta=[0.4, 0.7])
    before = covariance.log_determinant()
    covariance.log_determinant(theta=[0.9, 0.2])
    assert covariance.log_determinant() == before
    version = covariance.version
    covariance.update_parameters([0.9, 0.2])
    assert covariance.version == version + 1
    assert covariance.log_determinant() != before


def test_simulated_effects(rng):
    data = nelder('~j(10000)')
    covariance = Covariance('~ (1|gr(j))', data, theta=[1.0], sparse=False)
    draws = covariance.simulate_re(rng)
    assert scipy.stats.kstest(draws, 'norm').pvalue > 0.01

    scaled = Covariance('~ (1|gr(j))', data, theta=[1.5], sparse=False)
    draws = scaled.simulate_re(rng)
    standard_error = 2.25 * math.sqrt(2 / len(draws))
    assert abs(draws.var() - 2.25) < 3 * standard_error


def test_shared_effect_within_group(rng):
    data = nelder('~j(3) > i(4)')
    covariance = Covariance('~ (1|gr(j))', data, theta=[0.3])
    u = covariance.simulate_re(rng)
    values = covariance.Z @ u
    for j in range(3):
        assert np.unique(values[4 * j:4 * j + 4]).size == 1


def test_non_finite_covariance_raises():
    data = pd.DataFrame({'x': [0.0, 1.0]})
    covariance = Covariance('~ (1|bessel(x))', data, theta=[1.0])
    with pytest.raises(CovarianceError):
        covariance.build_D()


def test_subset_and_conditional_effects(rng):
    data = nelder('~cl(3) > t(4)')
    data['t'] = (data['t'] - 1) % 4 + 1
    covariance = Covariance('~ (1|fexp(t))', data, theta=[1.0, 2.0])
    subset = covariance.subset(np.arange(4))
    assert subset.Q == 4
    np.testing.assert_array_equal(subset.theta, covariance.theta)

    newdata = pd.DataFrame({'t': [1.0, 2.5]})
    U = covariance.simulate_re(rng, size=50)
    Z_new, mean, conditional = covariance.conditional_effects(newdata, U)
    assert Z_new.shape == (2, 2)
    # An observed location is known exactly given the draws.
    assert mean[0] == pytest.approx(U[0].mean(), abs=1e-8)
    assert conditional[0, 0] == pytest.approx(0.0, abs=1e-8)
    assert conditional[1, 1] > 0


def test_compact_support_over_one_field(rng):
    data = pd.DataFrame({'t': rng.permutation(np.arange(1.0, 201.0))})
    sparse_cov = Covariance('~ (1|wend1(t))', data, theta=[1.0, 2.0], effective_range=3.0)
    block_cov = Covariance('~ (1|wend1(t))', data, theta=[1.0, 2.0], effective_range=3.0, sparse=False)
    D = sparse_cov.build_D()
    assert D.nnz < 0.05 * 200 ** 2
    assert [type(factor).__name__ for factor in sparse_cov.factors()] == ['BandedFactor']

    D = D.toarray()
    L = sparse_cov.cholesky().toarray()
    assert np.linalg.norm(L @ L.T - D) / np.linalg.norm(D) < 1e-10
    u = sparse_cov.simulate_re(rng)
    expected = scipy.stats.multivariate_normal(np.zeros(len(D)), D).logpdf(u)
    assert sparse_cov.mvn_loglik(u) == pytest.approx(expected, rel=1e-9)
    assert block_cov.mvn_loglik(u) == pytest.approx(expected, rel=1e-9)
