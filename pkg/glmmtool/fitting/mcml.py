"""Markov chain Monte Carlo maximum likelihood.

Each outer iteration samples the standardised random effects v (u = L v) by HMC, updates the mean parameters
(and the scale parameter) either by Monte Carlo EM or by Monte Carlo Newton-Raphson, then updates the covariance
parameters by maximising the average Gaussian log-density of the samples.
"""
import logging
import math
from dataclasses import dataclass, asdict

import numpy as np
import scipy.linalg
import scipy.special

from glmmtool.core.covariance_functions import REAL, POSITIVE
from glmmtool.core.model import GlmmModel
from glmmtool.exceptions import (ConfigError, CovarianceError, ParameterError, SingularMatrixError,
                                 EffectiveSampleSizeError, HessianError)
from glmmtool.fitting.optimizer import BoundedMinimizer
from glmmtool.fitting.result import FitResult
from glmmtool.fitting.sampler import HmcOptions, HmcSampler, SamplerTrace

logger = logging.getLogger(__name__)

ALGORITHMS = ('mcnr', 'mcem')
SE_METHODS = ('information', 'hessian')
MIN_ESS = 10


@dataclass
class McmlOptions:
    algorithm: str = 'mcnr'
    tol: float = 0.01
    max_iter: int = 100
    sim_lik: bool = False
    se_method: str = 'information'

    def __post_init__(self):
        self.algorithm = self.algorithm.lower()
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"MCML algorithm must be one of {ALGORITHMS}, got '{self.algorithm}'.")
        if self.se_method not in SE_METHODS:
            raise ConfigError(f"Standard error method must be one of {SE_METHODS}, got '{self.se_method}'.")
        if not self.tol > 0:
            raise ConfigError(f"Convergence tolerance must be positive, got {self.tol}.")
        if self.max_iter < 1:
            raise ConfigError(f"Iteration cap must be positive, got {self.max_iter}.")

    def to_dict(self) -> dict:
        return asdict(self)


def _require_outcome(model: GlmmModel):
    if model.y is None:
        raise ConfigError("Fitting needs an outcome; set one with GlmmModel.set_outcome().")


def _mean_bounds(model: GlmmModel) -> list:
    return [REAL] * model.P + ([POSITIVE] if model.family.has_scale else [])


def log_density(model: GlmmModel, v) -> tuple:
    """Joint log-density of y and v up to a constant, with its gradient in v."""
    ZL = model.covariance.ZL()
    eta = model.linear_predictor(u=None) + ZL @ v
    value = float(np.sum(model.family.loglik_eta(model.y, eta, model.var_par)) - 0.5 * v @ v)
    gradient = ZL.T @ model.family.score_eta(model.y, eta, model.var_par) - v
    return value, gradient


def log_gradient(model: GlmmModel, v, which: str = 'v') -> np.ndarray:
    """Gradient of the joint log-density of y and v, with respect to v or to beta.

    For a gaussian-identity model the v-gradient is ``(ZL)^T (y - X beta - ZL v) / sigma^2 - v``.
    """
    assert which in ('v', 'beta'), "Gradient is available with respect to 'v' or 'beta'."
    _require_outcome(model)
    v = np.asarray(v, dtype=float)
    ZL = model.covariance.ZL()
    eta = model.linear_predictor() + ZL @ v
    score = model.family.score_eta(model.y, eta, model.var_par)
    if which == 'beta':
        return model.X.matrix.T @ score
    return ZL.T @ score - v


def hmc_sample(model: GlmmModel, options: HmcOptions, rng: np.random.Generator, v0=None) -> SamplerTrace:
    """Draw ``options.samples`` values of v from its conditional distribution given y."""
    _require_outcome(model)
    sampler = HmcSampler(lambda v: log_density(model, v), model.Q, options, rng)
    return sampler.sample(v0)


def mcem_step(model: GlmmModel, U) -> tuple:
    """Mean and scale parameters maximising the log-likelihood averaged over the columns of U."""
    _require_outcome(model)
    U = np.asarray(U, dtype=float)
    has_scale = model.family.has_scale

    def objective(x):
        var_par = x[model.P] if has_scale else model.var_par
        return -np.mean(model.conditional_loglik(U, beta=x[:model.P], var_par=var_par))

    start = np.append(model.beta, model.var_par) if has_scale else model.beta
    result = BoundedMinimizer(_mean_bounds(model)).minimize(objective, start)
    return result.x[:model.P], (result.x[model.P] if has_scale else model.var_par)


def mcnr_step(model: GlmmModel, U) -> np.ndarray:
    """One Newton-Raphson (Fisher scoring) update of beta with expectations over the columns of U."""
    _require_outcome(model)
    U = np.asarray(U, dtype=float)
    family, X = model.family, model.X.matrix
    eta = model.linear_predictor(u=U)
    mu = family.mean(eta)
    family.check_support(mu)
    w = family.link.mu_eta(eta) ** 2 / family.variance(mu, model.var_par)
    information = X.T @ (np.mean(w, axis=1)[:, None] * X)
    gradient = X.T @ np.mean(family.score_eta(model.y[:, None], eta, model.var_par), axis=1)
    try:
        step = scipy.linalg.cho_solve(scipy.linalg.cho_factor(information, lower=True), gradient)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("E[X^T W X] is singular", columns=model.collinear_columns(information))
    return model.beta + step


def var_par_step(model: GlmmModel, U) -> float:
    """Scale parameter maximising the averaged log-likelihood at the current beta."""
    if not model.family.has_scale:
        return model.var_par
    U = np.asarray(U, dtype=float)
    result = BoundedMinimizer([POSITIVE]).minimize(
        lambda x: -np.mean(model.conditional_loglik(U, var_par=x[0])), [model.var_par])
    return float(result.x[0])


def theta_step(model: GlmmModel, U) -> tuple:
    """Covariance parameters maximising the average log-density of the columns of U.

    :return: ``(theta, at_boundary)``
    """
    covariance = model.covariance
    if covariance.n_theta == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    U = np.asarray(U, dtype=float)

    def objective(theta):
        try:
            return -np.mean(covariance.mvn_loglik(U, theta))
        except (CovarianceError, ParameterError):
            return np.inf

    result = BoundedMinimizer(covariance.bounds).minimize(objective, covariance.theta)
    if np.any(result.at_boundary):
        labels = [label for label, flag in zip(covariance.parameter_labels, result.at_boundary) if flag]
        logger.warning(f"Covariance parameter(s) {', '.join(labels)} estimated at the boundary")
    return result.x, result.at_boundary


def _split(model: GlmmModel, x) -> tuple:
    P = model.P
    if model.family.has_scale:
        return x[:P], x[P], x[P + 1:]
    return x[:P], model.var_par, x[P:]


def _pack(model: GlmmModel, beta, var_par, theta) -> np.ndarray:
    scale = [var_par] if model.family.has_scale else []
    return np.concatenate([beta, scale, theta])


def proposal_log_density(model: GlmmModel, U) -> np.ndarray:
    """Log-density (up to a constant) of the sampling distribution of U at the current parameters."""
    return model.conditional_loglik(U) + model.covariance.mvn_loglik(U)


def importance_log_weights(model: GlmmModel, U, log_proposal, beta, var_par, theta) -> np.ndarray:
    return (model.conditional_loglik(U, beta=beta, var_par=var_par) + model.covariance.mvn_loglik(U, theta)
            - log_proposal)


def effective_sample_size(log_weights) -> float:
    weights = np.exp(log_weights - np.max(log_weights))
    return float(np.sum(weights) ** 2 / np.sum(weights ** 2))


def simulated_loglik(model: GlmmModel, U, log_proposal, beta=None, var_par=None, theta=None) -> float:
    """Importance-sampling estimate of the log-likelihood (up to the proposal's normalising constant)."""
    beta = model.beta if beta is None else beta
    var_par = model.var_par if var_par is None else var_par
    theta = model.theta if theta is None else theta
    log_weights = importance_log_weights(model, U, log_proposal, beta, var_par, theta)
    return float(scipy.special.logsumexp(log_weights) - math.log(len(log_weights)))


def simlik_refine(model: GlmmModel, U, log_proposal=None, min_ess: float = MIN_ESS) -> tuple:
    """Maximise the simulated likelihood over all parameters jointly.

    :param U: samples of u (Q x m) drawn at the current parameters
    :param log_proposal: log-density of the sampling distribution at each column; the current model's
        conditional posterior (up to a constant) when omitted
    :return: ``(beta, var_par, theta)``
    """
    _require_outcome(model)
    U = np.asarray(U, dtype=float)
    if log_proposal is None:
        log_proposal = proposal_log_density(model, U)
    ess = effective_sample_size(importance_log_weights(model, U, log_proposal, model.beta, model.var_par,
                                                       model.theta))
    if ess < min_ess:
        raise EffectiveSampleSizeError(ess, min_ess)

    def objective(x):
        beta, var_par, theta = _split(model, x)
        try:
            return -simulated_loglik(model, U, log_proposal, beta, var_par, theta)
        except (CovarianceError, ParameterError):
            return np.inf

    bounds = _mean_bounds(model) + model.covariance.bounds
    result = BoundedMinimizer(bounds).minimize(objective, _pack(model, model.beta, model.var_par, model.theta))
    beta, var_par, theta = _split(model, result.x)
    ess = effective_sample_size(importance_log_weights(model, U, log_proposal, beta, var_par, theta))
    if ess < min_ess:
        raise EffectiveSampleSizeError(ess, min_ess)
    logger.info(f"Simulated likelihood refinement: log-likelihood {-result.fun:.4f}, ESS {ess:.1f}")
    return beta, var_par, theta


def _hessian(function, x, relative_step: float = 1e-4) -> np.ndarray:
    """Central finite-difference Hessian."""
    x = np.asarray(x, dtype=float)
    steps = relative_step * np.maximum(1.0, np.abs(x))
    k = len(x)
    hessian = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = steps[i]
            ej[j] = steps[j]
            value = (function(x + ei + ej) - function(x + ei - ej) - function(x - ei + ej)
                     + function(x - ei - ej)) / (4 * steps[i] * steps[j])
            hessian[i, j] = hessian[j, i] = value
    return hessian


def std_errors(model: GlmmModel, method: str = 'information', U=None, log_proposal=None) -> tuple:
    """Standard errors of the mean parameters, and of theta under the Hessian method.

    :param method: ``'information'`` for the square root of the diagonal of (X^T Sigma^-1 X)^-1, ``'hessian'`` for
        finite differences of the simulated log-likelihood over (beta, theta)
    :return: ``(beta_se, theta_se)``; ``theta_se`` is None under the information method
    """
    assert method in SE_METHODS, f"Standard error method must be one of {SE_METHODS}."
    if method == 'information':
        return model.standard_errors(), None

    assert U is not None, "The Hessian method needs samples of the random effects."
    _require_outcome(model)
    U = np.asarray(U, dtype=float)
    if log_proposal is None:
        log_proposal = proposal_log_density(model, U)
    P = model.P

    def negative_loglik(x):
        try:
            return -simulated_loglik(model, U, log_proposal, beta=x[:P], theta=x[P:])
        except (CovarianceError, ParameterError):
            return np.nan

    hessian = _hessian(negative_loglik, np.concatenate([model.beta, model.theta]))
    eigenvalues = np.linalg.eigvalsh(hessian) if np.all(np.isfinite(hessian)) else np.full(len(hessian), np.nan)
    if not np.all(eigenvalues > 0):
        raise HessianError(eigenvalues)
    se = np.sqrt(np.diag(np.linalg.inv(hessian)))
    return se[:P], se[P:]


def _record(model: GlmmModel, iteration: int, max_delta: float, extra: dict = None) -> dict:
    record = {'iteration': iteration, 'max_delta': float(max_delta),
              'beta': [float(b) for b in model.beta], 'theta': [float(t) for t in model.theta]}
    if model.family.has_scale:
        record['var_par'] = float(model.var_par)
    record.update(extra or {})
    return record


def mcml_fit(model: GlmmModel, options: McmlOptions = None, hmc: HmcOptions = None,
             rng: np.random.Generator = None) -> FitResult:
    """Fit a model by Markov chain Monte Carlo maximum likelihood, starting from the model's current parameters.

    The loop stops when the largest absolute change of any parameter is at most ``options.tol``. When the
    iteration cap is reached first, the returned result has ``converged=False``.
    """
    _require_outcome(model)
    options = options or McmlOptions()
    hmc = hmc or HmcOptions()
    rng = rng if rng is not None else np.random.Generator(np.random.Philox())
    sampler = HmcSampler(lambda v: log_density(model, v), model.Q, hmc, rng)

    v = np.zeros(model.Q)
    U = np.zeros((model.Q, 1))
    trace = []
    boundary = np.zeros(model.covariance.n_theta, dtype=bool)
    converged = False
    iteration = 0
    diagnostics = {}
    for iteration in range(1, options.max_iter + 1):
        previous = _pack(model, model.beta, model.var_par, model.theta)
        extra = {}
        if model.Q > 0:
            chain = sampler.sample(v)
            v = chain.samples[:, -1]
            U = model.covariance.cholesky() @ chain.samples
            extra = {'accept_rate': chain.accept_rate, 'step_size': chain.step_size, 'divergent': chain.n_divergent}

        if options.algorithm == 'mcem':
            beta, var_par = mcem_step(model, U)
            model.update_parameters(beta=beta, var_par=var_par)
        else:
            model.update_parameters(beta=mcnr_step(model, U))
            model.update_parameters(var_par=var_par_step(model, U))
        if model.Q > 0 and model.covariance.n_theta:
            theta, boundary = theta_step(model, U)
            model.update_parameters(theta=theta)

        max_delta = float(np.max(np.abs(_pack(model, model.beta, model.var_par, model.theta) - previous)))
        trace.append(_record(model, iteration, max_delta, extra))
        logger.info(f"MCML iteration {iteration}: max parameter change {max_delta:.5f}")
        if max_delta <= options.tol:
            converged = True
            break
    if not converged:
        logger.warning(f"MCML did not converge within {options.max_iter} iterations "
                       f"(last change {trace[-1]['max_delta']:.5f})")

    loglik = None
    if options.sim_lik and model.Q > 0:
        log_proposal = proposal_log_density(model, U)
        beta, var_par, theta = simlik_refine(model, U, log_proposal)
        model.update_parameters(beta=beta, var_par=var_par, theta=theta)
        boundary = BoundedMinimizer(model.covariance.bounds).at_boundary(theta)
        loglik = simulated_loglik(model, U, log_proposal)
        diagnostics['sim_lik'] = True

    beta_se, theta_se = std_errors(model, options.se_method, U)
    if model.Q > 0:
        diagnostics.update(step_size=sampler.step_size)
    return FitResult(method=options.algorithm, beta=model.beta.copy(), theta=model.theta, var_par=model.var_par,
                     beta_se=beta_se, theta_se=theta_se, parameter_names=model.parameter_names,
                     theta_labels=model.covariance.parameter_labels, converged=converged, iterations=iteration,
                     trace=trace, U=U, at_boundary=boundary, has_scale=model.family.has_scale, loglik=loglik,
                     diagnostics=diagnostics)
