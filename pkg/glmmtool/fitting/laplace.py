"""Laplace-approximation model fitting.

The approximate log-likelihood of the standardised model is

    -1/2 log|I + (ZL)^T W (ZL)| + sum_i log f(y_i | v, beta, phi) - v^T v / 2

evaluated at the conditional mode of v. Fitting alternates between the mode and beta (without the determinant
term) and the covariance and scale parameters, then refines (beta, theta, phi) jointly at the final mode.
"""
import logging
from dataclasses import dataclass, asdict

import numpy as np
import scipy.linalg
import scipy.sparse

from glmmtool.core.covariance_functions import REAL, POSITIVE
from glmmtool.core.model import GlmmModel
from glmmtool.exceptions import ConfigError, NumericalError, ParameterError, SingularMatrixError
from glmmtool.fitting.optimizer import BoundedMinimizer
from glmmtool.fitting.result import FitResult

logger = logging.getLogger(__name__)

VARIANTS = ('scoring', 'dfo')
MAX_HALVINGS = 20


@dataclass
class LaOptions:
    variant: str = 'scoring'
    tol: float = 0.01
    max_iter: int = 100
    inner_tol: float = 1e-8
    max_inner: int = 100

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"Laplace variant must be one of {VARIANTS}, got '{self.variant}'.")
        if not self.tol > 0 or not self.inner_tol > 0:
            raise ConfigError("Convergence tolerances must be positive.")
        if self.max_iter < 1 or self.max_inner < 1:
            raise ConfigError("Iteration caps must be positive.")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LaState:
    v: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    var_par: float
    iterations: int = 0
    converged: bool = False


def _penalised_hessian(ZL: scipy.sparse.spmatrix, w: np.ndarray) -> np.ndarray:
    """I + (ZL)^T W (ZL) as a dense Q x Q matrix."""
    weighted = scipy.sparse.csr_matrix(ZL.multiply(w[:, None]))
    return np.eye(ZL.shape[1]) + (ZL.T @ weighted).toarray()


def _conditional_terms(model: GlmmModel, v, beta, var_par, theta):
    ZL = model.covariance.ZL(theta)
    eta = model.linear_predictor(beta=beta) + ZL @ v
    loglik = model.family.loglik_eta(model.y, eta, var_par)
    if not np.all(np.isfinite(loglik)):
        raise NumericalError(f"Conditional log-likelihood is not finite at {np.count_nonzero(~np.isfinite(loglik))} "
                             f"observation(s).")
    return ZL, eta, float(np.sum(loglik))


def joint_loglik(model: GlmmModel, v, beta=None, var_par=None, theta=None) -> float:
    """sum_i log f(y_i | v, beta, phi) - v^T v / 2."""
    var_par = model.var_par if var_par is None else var_par
    v = np.asarray(v, dtype=float)
    _, _, loglik = _conditional_terms(model, v, beta, var_par, theta)
    return loglik - 0.5 * v @ v


def la_loglik(model: GlmmModel, v, beta=None, var_par=None, theta=None) -> float:
    """Laplace approximation to the log-likelihood around v; parameters default to the model's current values."""
    assert model.y is not None, "Model has no outcome; call set_outcome() first."
    var_par = model.var_par if var_par is None else var_par
    v = np.asarray(v, dtype=float)
    ZL, eta, loglik = _conditional_terms(model, v, beta, var_par, theta)
    hessian = _penalised_hessian(ZL, model.family.weights(eta, var_par))
    try:
        factor = scipy.linalg.cholesky(hessian, lower=True)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("I + (ZL)^T W (ZL) is not positive definite")
    return -np.sum(np.log(np.diag(factor))) + loglik - 0.5 * v @ v


def scoring_update(model: GlmmModel, beta, v) -> tuple:
    """One scoring step for (beta, v) at the model's covariance and scale parameters.

    v' = v + (I + (ZL)^T W (ZL))^-1 grad_v and beta' = beta + (X^T W X)^-1 X^T score, both at the current
    linear predictor.
    """
    assert model.y is not None, "Model has no outcome; call set_outcome() first."
    beta = np.asarray(beta, dtype=float)
    v = np.asarray(v, dtype=float)
    family, X = model.family, model.X.matrix
    ZL = model.covariance.ZL()
    eta = model.linear_predictor(beta=beta) + ZL @ v
    w = family.weights(eta, model.var_par)
    score = family.score_eta(model.y, eta, model.var_par)

    information = X.T @ (w[:, None] * X)
    try:
        beta_step = scipy.linalg.cho_solve(scipy.linalg.cho_factor(information, lower=True), X.T @ score)
        v_step = scipy.linalg.cho_solve(scipy.linalg.cho_factor(_penalised_hessian(ZL, w), lower=True),
                                        ZL.T @ score - v)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("Scoring matrix is singular", columns=model.collinear_columns(information))
    return beta + beta_step, v + v_step


def _mode_scoring(model: GlmmModel, beta, v, options: LaOptions) -> tuple:
    current = joint_loglik(model, v, beta)
    for inner in range(options.max_inner):
        beta_new, v_new = scoring_update(model, beta, v)
        step_beta, step_v = beta_new - beta, v_new - v
        for _ in range(MAX_HALVINGS):
            try:
                value = joint_loglik(model, v + step_v, beta + step_beta)
            except NumericalError:
                value = -np.inf
            if value >= current - 1e-10 * (1 + abs(current)):
                break
            step_beta, step_v = step_beta / 2, step_v / 2
        else:
            logger.warning("Scoring step could not increase the objective; stopping the inner iterations")
            break
        beta, v, current = beta + step_beta, v + step_v, value
        if max(np.max(np.abs(step_beta), initial=0), np.max(np.abs(step_v), initial=0)) < options.inner_tol:
            break
    return beta, v


def _mode_dfo(model: GlmmModel, beta, v, options: LaOptions) -> tuple:
    P = model.P

    def objective(x):
        try:
            return -joint_loglik(model, x[P:], x[:P])
        except NumericalError:
            return np.inf

    result = BoundedMinimizer([REAL] * (P + model.Q), tolerance=options.inner_tol).minimize(
        objective, np.concatenate([beta, v]))
    return result.x[:P], result.x[P:]


def _covariance_step(model: GlmmModel, v) -> tuple:
    """Maximise la_loglik over (theta, phi) at fixed beta and v."""
    has_scale = model.family.has_scale
    n_theta = model.covariance.n_theta

    def objective(x):
        try:
            return -la_loglik(model, v, var_par=x[n_theta] if has_scale else None, theta=x[:n_theta])
        except (NumericalError, ParameterError):
            return np.inf

    bounds = model.covariance.bounds + ([POSITIVE] if has_scale else [])
    start = np.append(model.theta, model.var_par) if has_scale else model.theta
    result = BoundedMinimizer(bounds).minimize(objective, start)
    theta = result.x[:n_theta]
    return theta, (result.x[n_theta] if has_scale else model.var_par), result.at_boundary[:n_theta]


def _joint_step(model: GlmmModel, v) -> tuple:
    """Maximise la_loglik over (beta, theta, phi) at fixed v."""
    P, n_theta = model.P, model.covariance.n_theta
    has_scale = model.family.has_scale

    def objective(x):
        try:
            return -la_loglik(model, v, beta=x[:P], theta=x[P:P + n_theta],
                              var_par=x[P + n_theta] if has_scale else None)
        except (NumericalError, ParameterError):
            return np.inf

    bounds = [REAL] * P + model.covariance.bounds + ([POSITIVE] if has_scale else [])
    start = np.concatenate([model.beta, model.theta, [model.var_par] if has_scale else []])
    result = BoundedMinimizer(bounds).minimize(objective, start)
    x = result.x
    return (x[:P], x[P:P + n_theta], x[P + n_theta] if has_scale else model.var_par,
            result.at_boundary[P:P + n_theta], -result.fun)


def la_fit(model: GlmmModel, options: LaOptions = None) -> FitResult:
    """Fit a model by the Laplace approximation, starting from the model's current parameters."""
    if model.y is None:
        raise ConfigError("Fitting needs an outcome; set one with GlmmModel.set_outcome().")
    options = options or LaOptions()
    find_mode = _mode_scoring if options.variant == 'scoring' else _mode_dfo
    state = LaState(v=np.zeros(model.Q), beta=model.beta.copy(), theta=model.theta, var_par=model.var_par)
    boundary = np.zeros(model.covariance.n_theta, dtype=bool)
    trace = []

    for iteration in range(1, options.max_iter + 1):
        previous = np.concatenate([model.beta, model.theta, [model.var_par]])
        state.beta, state.v = find_mode(model, model.beta, state.v, options)
        model.update_parameters(beta=state.beta)
        if model.covariance.n_theta or model.family.has_scale:
            theta, var_par, boundary = _covariance_step(model, state.v)
            model.update_parameters(theta=theta if len(theta) else None, var_par=var_par)
        current = np.concatenate([model.beta, model.theta, [model.var_par]])
        max_delta = float(np.max(np.abs(current - previous)))
        record = {'iteration': iteration, 'max_delta': max_delta, 'beta': [float(b) for b in model.beta],
                  'theta': [float(t) for t in model.theta]}
        if model.family.has_scale:
            record['var_par'] = float(model.var_par)
        trace.append(record)
        state.iterations = iteration
        logger.info(f"Laplace iteration {iteration}: max parameter change {max_delta:.5f}")
        if max_delta <= options.tol:
            state.converged = True
            break
    if not state.converged:
        logger.warning(f"Laplace fit did not converge within {options.max_iter} iterations")

    beta, theta, var_par, joint_boundary, loglik = _joint_step(model, state.v)
    model.update_parameters(beta=beta, theta=theta if len(theta) else None, var_par=var_par)
    boundary = joint_boundary if len(joint_boundary) else boundary
    if np.any(boundary):
        logger.warning("Covariance parameter(s) estimated at the boundary")
    state.beta, state.theta, state.var_par = model.beta.copy(), model.theta, model.var_par

    U = (model.covariance.cholesky() @ state.v)[:, None]
    return FitResult(method='la', beta=state.beta, theta=state.theta, var_par=state.var_par,
                     beta_se=model.standard_errors(), parameter_names=model.parameter_names,
                     theta_labels=model.covariance.parameter_labels, converged=state.converged,
                     iterations=state.iterations, trace=trace, U=U, at_boundary=boundary,
                     has_scale=model.family.has_scale, loglik=loglik, diagnostics={'variant': options.variant})
