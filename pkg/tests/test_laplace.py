import numpy as np
import pytest
import scipy.optimize
import scipy.stats

from glmmtool.core.model import GlmmModel
from glmmtool.core.nelder import nelder
from glmmtool.exceptions import ConfigError
from glmmtool.fitting.laplace import LaOptions, la_loglik, joint_loglik, scoring_update, la_fit


@pytest.fixture
def gaussian_model(rng):
    data = nelder('~cl(10) > i(8)')
    data['x'] = rng.standard_normal(len(data))
    model = GlmmModel('~ x + (1|gr(cl))', data, covariance=[0.8], mean=[1.0, 0.5], var_par=0.9)
    model.set_outcome(model.sim_data(rng))
    return model


def _mode(model):
    ZL = model.covariance.ZL().toarray()
    precision = np.eye(model.Q) + ZL.T @ ZL / model.var_par ** 2
    return np.linalg.solve(precision, ZL.T @ (model.y - model.linear_predictor()) / model.var_par ** 2)


def _exact_loglik(model, beta=None, theta=None, var_par=None):
    beta = model.beta if beta is None else beta
    var_par = model.var_par if var_par is None else var_par
    Z = model.covariance.Z.toarray()
    D = model.covariance.build_D(theta).toarray()
    sigma = var_par ** 2 * np.eye(model.n) + Z @ D @ Z.T
    return scipy.stats.multivariate_normal.logpdf(model.y, model.X.matrix @ beta, sigma)


def test_laplace_exact_for_gaussian(gaussian_model):
    v = _mode(gaussian_model)
    assert la_loglik(gaussian_model, v) == pytest.approx(_exact_loglik(gaussian_model), abs=1e-8)


def test_scoring_step_reaches_gaussian_mode(gaussian_model):
    beta, v = scoring_update(gaussian_model, gaussian_model.beta, np.zeros(gaussian_model.Q))
    np.testing.assert_allclose(v, _mode(gaussian_model), atol=1e-10)
    assert beta.shape == (2,)


def test_mode_maximises_joint_loglik(rng, gaussian_model):
    v = _mode(gaussian_model)
    best = joint_loglik(gaussian_model, v)
    for _ in range(5):
        assert joint_loglik(gaussian_model, v + 0.01 * rng.standard_normal(gaussian_model.Q)) < best


def test_fit_matches_exact_maximum_likelihood(gaussian_model):
    data, y = gaussian_model.data, gaussian_model.y
    oracle = GlmmModel('~ x + (1|gr(cl))', data, covariance=[1.0], outcome=y)

    def negative_loglik(x):
        return -_exact_loglik(oracle, beta=x[:2], theta=[np.exp(x[2])], var_par=np.exp(x[3]))

    start = scipy.optimize.minimize(negative_loglik, [0.0, 0.0, 0.0, 0.0], method='Nelder-Mead',
                                    options={'xatol': 1e-8, 'fatol': 1e-10, 'maxiter': 20000})
    optimum = scipy.optimize.minimize(negative_loglik, start.x, method='BFGS', options={'gtol': 1e-9})

    model = GlmmModel('~ x + (1|gr(cl))', data, covariance=[0.5], var_par=1.5, outcome=y)
    result = la_fit(model, LaOptions(tol=1e-7, max_iter=1000))
    np.testing.assert_allclose(result.beta, optimum.x[:2], atol=1e-4)
    assert result.theta[0] == pytest.approx(np.exp(optimum.x[2]), abs=1e-4)
    assert result.var_par == pytest.approx(np.exp(optimum.x[3]), abs=1e-4)
    assert result.loglik == pytest.approx(-optimum.fun, abs=1e-5)


def test_fit_binomial(rng, small_clustered):
    model = GlmmModel('~ x + (1|gr(cl))', small_clustered, family='binomial', covariance=[0.5], mean=[0.0, 0.5])
    model.set_outcome(model.sim_data(rng))
    result = la_fit(model)
    assert result.method == 'la'
    assert result.U.shape == (6, 1)
    assert result.var_par == 1.0
    assert np.all(np.isfinite(result.beta_se))
    assert result.to_dict()['var_par'] is None
    assert result.diagnostics == {'variant': 'scoring'}

    summary = result.re_summary()
    assert list(summary.columns) == ['effect', 'mean', 'sd']
    np.testing.assert_allclose(summary['mean'], result.U[:, 0])
    assert summary['sd'].isna().all()


@pytest.mark.slow
def test_variants_agree(rng, small_clustered):
    base = GlmmModel('~ x + (1|gr(cl))', small_clustered, family='poisson', covariance=[0.5], mean=[0.5, 0.2])
    y = base.sim_data(rng)
    estimates = []
    for variant in ('scoring', 'dfo'):
        model = GlmmModel('~ x + (1|gr(cl))', small_clustered, family='poisson', covariance=[0.5], mean=[0.5, 0.2],
                          outcome=y)
        estimates.append(la_fit(model, LaOptions(variant=variant, tol=1e-4)).beta)
    np.testing.assert_allclose(estimates[0], estimates[1], atol=0.02)


def test_options_validation():
    with pytest.raises(ConfigError):
        LaOptions(variant='newton')
    with pytest.raises(ConfigError):
        la_fit(GlmmModel('~ 1', nelder('~i(3)')))
