"""Generalised linear mixed model: y | u ~ G(h^-1(X beta + offset + Z u); phi), u ~ N(0, D(theta))."""
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
import pandas as pd
import prettytable
import scipy.linalg
import scipy.sparse
import scipy.special

from glmmtool.core import sparse
from glmmtool.core.covariance import Covariance
from glmmtool.core.family import Family, get_family
from glmmtool.core.formula import ModelFormula, FixedDesignMatrix, build_X, parse_formula
from glmmtool.exceptions import ParameterError, SingularMatrixError, CovarianceError, ConfigError

logger = logging.getLogger(__name__)

SIM_MODES = ('y', 'data', 'all')


@dataclass
class Prediction:
    """Predictions at new rows.

    ``linear_predictor`` is X_new beta (+ offset); ``conditional_predictor`` adds Z_new times the conditional mean
    of the new random effects.
    """
    linear_predictor: np.ndarray
    conditional_predictor: np.ndarray
    re_mean: np.ndarray
    re_covariance: np.ndarray


@dataclass
class SimulatedData:
    y: np.ndarray
    u: np.ndarray
    X: np.ndarray
    Z: scipy.sparse.csr_matrix


class GlmmModel:
    """A GLMM bound to a data table.

    :param formula: model formula with mean and random-effect parts, e.g. ``~ factor(t) + int - 1 + (1|gr(cl))``
    :param data: data table
    :param family: family name or instance
    :param link: link name, family default when omitted
    :param mean: beta, zeros when omitted
    :param covariance: theta
    :param var_par: phi, the scale parameter of families that have one
    :param offset: offset vector or name of a data column
    :param outcome: observed outcome vector or name of a data column
    :param attenuate: attenuate the linear predictor in the marginal approximations
    :param sparse: sparse factorisation of D (default) or block-wise
    :param effective_range: scaling of compactly supported covariance functions
    """
    formula: ModelFormula
    family: Family
    X: FixedDesignMatrix
    covariance: Covariance

    def __init__(self, formula: Union[str, ModelFormula], data: pd.DataFrame, family: Union[str, Family] = 'gaussian',
                 link: str = None, mean=None, covariance=None, var_par: float = 1.0, offset=None, outcome=None,
                 attenuate: bool = False, sparse: bool = True, effective_range=None):
        self.formula = parse_formula(formula) if isinstance(formula, str) else formula
        self.data = data.reset_index(drop=True)
        self.family = family if isinstance(family, Family) else get_family(family, link)
        self.X = build_X(self.formula, self.data)
        self.covariance = Covariance(self.formula, self.data, sparse=sparse, effective_range=effective_range)
        self.attenuate = attenuate
        self.offset = self._column_or_vector(offset, 'offset', default=0.0)
        self.y = None if outcome is None else self._column_or_vector(outcome, 'outcome')

        self.version = 0
        self._cache = {}
        self.beta = np.zeros(self.P)
        self.var_par = 1.0
        self.update_parameters(beta=mean, theta=covariance, var_par=var_par)

    def _column_or_vector(self, value, label, default=None):
        if value is None:
            return np.full(self.n, default, dtype=float)
        if isinstance(value, str):
            if value not in self.data.columns:
                raise ConfigError(f"Column '{value}' for the {label} not found in data.")
            return self.data[value].to_numpy(dtype=float)
        value = np.asarray(value, dtype=float)
        if value.shape != (self.n,):
            raise ConfigError(f"The {label} has shape {value.shape}, expected ({self.n},).")
        return value

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def P(self) -> int:
        return self.X.P

    @property
    def Q(self) -> int:
        return self.covariance.Q

    @property
    def theta(self) -> np.ndarray:
        return self.covariance.theta

    @property
    def parameter_names(self) -> list:
        return list(self.X.column_names)

    def update_parameters(self, beta=None, theta=None, var_par=None):
        """Set any of beta, theta and phi; cached matrices are rebuilt lazily."""
        if beta is not None:
            beta = np.atleast_1d(np.asarray(beta, dtype=float))
            if beta.shape != (self.P,):
                raise ParameterError(f"Mean formula has {self.P} column(s) ({', '.join(self.parameter_names)}), "
                                     f"got {len(beta)} parameter(s).")
            if not np.all(np.isfinite(beta)):
                raise ParameterError(f"Mean parameters must be finite, got {beta}.")
            self.beta = beta
        if theta is not None:
            self.covariance.update_parameters(theta)
        if var_par is not None:
            if not var_par > 0:
                raise ParameterError(f"Scale parameter must be positive, got {var_par}.")
            self.var_par = float(var_par)
        self.version += 1
        self._cache = {}

    def set_outcome(self, y):
        self.y = self._column_or_vector(y, 'outcome')

    def _cached(self, key, compute):
        stamp = (self.version, self.covariance.version)
        if key not in self._cache or self._cache[key][0] != stamp:
            self._cache[key] = (stamp, compute())
        return self._cache[key][1]

    def linear_predictor(self, beta=None, u=None) -> np.ndarray:
        """eta = X beta + offset + Z u; u may be a Q-vector or Q x m matrix (then eta is n x m)."""
        beta = self.beta if beta is None else np.asarray(beta, dtype=float)
        eta = self.X.matrix @ beta + self.offset
        if u is None:
            return eta
        u = np.asarray(u, dtype=float)
        zu = self.covariance.Z @ u
        return eta + zu if u.ndim == 1 else eta[:, None] + zu

    def fitted(self, u=None) -> np.ndarray:
        return self.linear_predictor(u=u)

    def marginal_variance(self) -> np.ndarray:
        """z_i D z_i^T for every observation."""
        def compute():
            if self.Q == 0:
                return np.zeros(self.n)
            ZD = self.covariance.Z @ self.covariance.build_D()
            return np.asarray(ZD.multiply(self.covariance.Z).sum(axis=1)).ravel()
        return self._cached('marginal_variance', compute)

    def marginal_predictor(self, attenuate: bool = None) -> np.ndarray:
        attenuate = self.attenuate if attenuate is None else attenuate
        eta = self.linear_predictor()
        if attenuate:
            eta = self.family.attenuate(eta, self.marginal_variance())
        return eta

    def glm_weights(self, eta=None) -> np.ndarray:
        """Diagonal of W such that W^-1 is the conditional-variance contribution to Sigma."""
        eta = self.marginal_predictor() if eta is None else np.asarray(eta, dtype=float)
        return self.family.weights(eta, self.var_par)

    def sigma_approx(self, attenuate: bool = None) -> scipy.sparse.csr_matrix:
        """Sigma = W^-1 + Z D Z^T, the first-order approximation to the marginal covariance of y."""
        def compute(flag):
            w = self.glm_weights(self.marginal_predictor(flag))
            sigma = scipy.sparse.diags(1 / w)
            if self.Q > 0:
                sigma = sigma + self.covariance.marginal()
            return sparse.to_crs(sigma)
        flag = self.attenuate if attenuate is None else attenuate
        return self._cached(('sigma', flag), lambda: compute(flag))

    def _sigma_factors(self) -> list:
        def compute():
            try:
                return sparse.sparse_cholesky(self.sigma_approx())
            except CovarianceError as error:
                raise SingularMatrixError(f"Marginal covariance is not positive definite: {error}")
        return self._cached('sigma_factors', compute)

    def fisher_information(self) -> np.ndarray:
        """X^T Sigma^-1 X, summed over the diagonal blocks of Sigma."""
        def compute():
            whitened = sparse.forward_solve(self._sigma_factors(), self.X.matrix)
            return whitened.T @ whitened
        return self._cached('fisher_information', compute)

    def information_matrix(self) -> np.ndarray:
        """M = (X^T Sigma^-1 X)^-1, the approximate covariance matrix of the estimate of beta."""
        def compute():
            information = self.fisher_information()
            try:
                factor = scipy.linalg.cho_factor(information, lower=True)
            except np.linalg.LinAlgError:
                raise SingularMatrixError("X^T Sigma^-1 X is singular", columns=self.collinear_columns(information))
            return scipy.linalg.cho_solve(factor, np.eye(self.P))
        return self._cached('information_matrix', compute)

    def collinear_columns(self, matrix: np.ndarray = None, tolerance: float = 1e-10) -> list:
        """Names of mean columns beyond the numerical rank of ``matrix`` (pivoted QR)."""
        matrix = self.fisher_information() if matrix is None else matrix
        _, r, pivots = scipy.linalg.qr(matrix, pivoting=True)
        diagonal = np.abs(np.diag(r))
        rank = int(np.sum(diagonal > tolerance * max(diagonal[0], 1e-300))) if len(diagonal) else 0
        return [self.parameter_names[k] for k in pivots[rank:]]

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.information_matrix()))

    def power(self, alpha: float = 0.05) -> pd.DataFrame:
        """Power of two-sided tests of each mean parameter at level ``alpha``."""
        assert 0 < alpha < 1, "Type I error level must lie in (0, 1)."
        se = self.standard_errors()
        power = scipy.special.ndtr(np.abs(self.beta) / se - scipy.special.ndtri(1 - alpha / 2))
        return pd.DataFrame({'Parameter': self.parameter_names, 'Value': self.beta, 'SE': se, 'Power': power})

    def power_grid(self, theta_grid, parameter: Union[str, int], alpha: float = 0.05) -> pd.DataFrame:
        """Power of one parameter over a grid of covariance parameters.

        :param theta_grid: DataFrame or sequence of theta vectors
        :param parameter: parameter name or index
        :return: the grid with a ``power`` column; the model's theta is restored afterwards
        """
        grid = theta_grid.copy() if isinstance(theta_grid, pd.DataFrame) \
            else pd.DataFrame(np.atleast_2d(theta_grid), columns=self.covariance.parameter_labels)
        index = self.parameter_names.index(parameter) if isinstance(parameter, str) else int(parameter)
        original = self.theta
        powers = []
        try:
            for row in grid.to_numpy(dtype=float):
                self.update_parameters(theta=row)
                powers.append(float(self.power(alpha)['Power'].iloc[index]))
        finally:
            self.update_parameters(theta=original)
        grid['power'] = powers
        return grid

    def power_report(self, alpha: float = 0.05) -> str:
        table = prettytable.PrettyTable(['Parameter', 'Value', 'SE', 'Power'])
        for row in self.power(alpha).itertuples(index=False):
            table.add_row([row.Parameter, f"{row.Value:.4g}", f"{row.SE:.7f}", f"{row.Power:.7f}"])
        return table.get_string()

    def conditional_loglik(self, U, beta=None, var_par=None) -> np.ndarray:
        """Sum over observations of log f(y | u) for each column of U (or a single vector u)."""
        assert self.y is not None, "Model has no outcome; call set_outcome() first."
        var_par = self.var_par if var_par is None else var_par
        eta = self.linear_predictor(beta=beta, u=U)
        y = self.y if eta.ndim == 1 else self.y[:, None]
        return np.sum(self.family.loglik_eta(y, eta, var_par), axis=0)

    def glm_start(self, max_iter: int = 50, tol: float = 1e-8) -> np.ndarray:
        """Mean parameters of the GLM that ignores the random effects, by iteratively reweighted least squares."""
        assert self.y is not None, "Model has no outcome; call set_outcome() first."
        X = self.X.matrix
        eta = self.family.link.link(self.family.initial_mean(self.y))
        beta = np.linalg.lstsq(X, eta - self.offset, rcond=None)[0]
        for iteration in range(max_iter):
            eta = X @ beta + self.offset
            mu = self.family.mean(eta)
            mu_eta = self.family.link.mu_eta(eta)
            w = mu_eta ** 2 / self.family.variance(mu, self.var_par)
            working = eta - self.offset + (self.y - mu) / mu_eta
            sqrt_w = np.sqrt(w)
            updated = np.linalg.lstsq(X * sqrt_w[:, None], working * sqrt_w, rcond=None)[0]
            change = np.max(np.abs(updated - beta))
            beta = updated
            if change < tol:
                break
        logger.debug(f"GLM starting values after {iteration + 1} iteration(s): {beta}")
        return beta

    def sim_data(self, rng: np.random.Generator, mode: str = 'y'):
        """Simulate outcomes from the model.

        :param mode: ``'y'`` returns outcomes, ``'data'`` the data table with a ``y`` column, ``'all'`` a
            :class:`SimulatedData` bundle
        """
        assert mode in SIM_MODES, f"Simulation mode must be one of {SIM_MODES}."
        u = self.covariance.simulate_re(rng) if self.Q > 0 else np.zeros(0)
        mu = self.family.mean(self.linear_predictor(u=u))
        self.family.check_support(mu)
        y = self.family.sample(rng, mu, self.var_par)
        if mode == 'y':
            return y
        if mode == 'data':
            data = self.data.copy()
            data['y'] = y
            return data
        return SimulatedData(y=y, u=u, X=self.X.matrix.copy(), Z=self.covariance.Z.copy())

    def predict(self, newdata: pd.DataFrame, U, offset=None) -> Prediction:
        """Linear predictor and random-effect distribution at new rows given samples U (Q x m)."""
        X_new = self.X.for_data(newdata)
        eta = X_new @ self.beta
        if offset is not None:
            eta = eta + (newdata[offset].to_numpy(dtype=float) if isinstance(offset, str) else offset)
        if self.Q == 0:
            return Prediction(eta, eta, np.zeros(0), np.zeros((0, 0)))
        Z_new, mean, covariance = self.covariance.conditional_effects(newdata, U)
        return Prediction(linear_predictor=eta, conditional_predictor=eta + Z_new @ mean, re_mean=mean,
                          re_covariance=covariance)

    def subset_rows(self, rows) -> 'GlmmModel':
        """The same model on a subset of rows."""
        rows = np.asarray(rows)
        data = self.data.iloc[rows].reset_index(drop=True)
        model = GlmmModel(self.formula, data, family=self.family, mean=self.beta,
                          covariance=self.theta if self.covariance.n_theta else None, var_par=self.var_par,
                          offset=self.offset[rows], outcome=None if self.y is None else self.y[rows],
                          attenuate=self.attenuate, sparse=self.covariance.sparse,
                          effective_range=self.covariance.effective_range)
        return model

    def __repr__(self):
        return f"GlmmModel({self.formula}, {self.family!r}, n={self.n}, P={self.P}, Q={self.Q})"
