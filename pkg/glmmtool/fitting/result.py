"""Estimates, standard errors and iteration history of a model fit."""
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import prettytable
import scipy.special


@dataclass
class FitResult:
    """Outcome of :func:`~glmmtool.fitting.mcml.mcml_fit` or :func:`~glmmtool.fitting.laplace.la_fit`.

    ``trace`` holds one record per outer iteration with the parameter values and the largest absolute change.
    ``U`` holds the final random-effect samples as a Q x m matrix (a single column, the mode, for Laplace fits).
    """
    method: str
    beta: np.ndarray
    theta: np.ndarray
    var_par: float
    beta_se: np.ndarray
    parameter_names: list
    theta_labels: list
    converged: bool
    iterations: int
    trace: list = field(default_factory=list)
    U: np.ndarray = None
    theta_se: np.ndarray = None
    at_boundary: np.ndarray = None
    has_scale: bool = False
    loglik: float = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def max_delta(self) -> float:
        return self.trace[-1]['max_delta'] if self.trace else np.nan

    def estimates(self) -> pd.DataFrame:
        """One row per parameter with its estimate and standard error (NaN where none is available)."""
        theta_se = self.theta_se if self.theta_se is not None else np.full(len(self.theta), np.nan)
        boundary = self.at_boundary if self.at_boundary is not None else np.zeros(len(self.theta), dtype=bool)
        rows = [{'Parameter': name, 'Kind': 'mean', 'Estimate': value, 'SE': se, 'Boundary': False}
                for name, value, se in zip(self.parameter_names, self.beta, self.beta_se)]
        rows += [{'Parameter': label, 'Kind': 'covariance', 'Estimate': value, 'SE': se, 'Boundary': bool(flag)}
                 for label, value, se, flag in zip(self.theta_labels, self.theta, theta_se, boundary)]
        if self.has_scale:
            rows.append({'Parameter': 'var_par', 'Kind': 'scale', 'Estimate': self.var_par, 'SE': np.nan,
                         'Boundary': False})
        return pd.DataFrame(rows)

    def summary(self) -> str:
        table = prettytable.PrettyTable(['Parameter', 'Estimate', 'SE', 'z', 'p'])
        table.align['Parameter'] = 'l'
        for row in self.estimates().itertuples(index=False):
            z = row.Estimate / row.SE if row.Kind == 'mean' and row.SE > 0 else np.nan
            p = 2 * _normal_tail(abs(z)) if np.isfinite(z) else np.nan
            name = f"{row.Parameter} *" if row.Boundary else row.Parameter
            table.add_row([name, f"{row.Estimate:.4f}", _format(row.SE), _format(z, '.2f'), _format(p)])
        status = 'converged' if self.converged else 'NOT converged'
        footer = f"{self.method.upper()} fit, {status} after {self.iterations} iteration(s)"
        if self.at_boundary is not None and np.any(self.at_boundary):
            footer += "\n* covariance parameter estimated at the boundary of its range"
        return f"{table.get_string()}\n{footer}"

    def re_summary(self) -> pd.DataFrame:
        """Mean and standard deviation of each random effect over the returned samples."""
        assert self.U is not None and self.U.size, "Fit result holds no random-effect samples."
        sd = self.U.std(axis=1, ddof=1) if self.U.shape[1] > 1 else np.full(self.U.shape[0], np.nan)
        return pd.DataFrame({'effect': np.arange(self.U.shape[0]), 'mean': self.U.mean(axis=1), 'sd': sd})

    def to_dict(self, include_re: bool = False) -> dict:
        result = {
            'method': self.method,
            'converged': bool(self.converged),
            'iterations': int(self.iterations),
            'beta': dict(zip(self.parameter_names, _floats(self.beta))),
            'beta_se': dict(zip(self.parameter_names, _floats(self.beta_se))),
            'theta': dict(zip(self.theta_labels, _floats(self.theta))),
            'theta_se': None if self.theta_se is None else dict(zip(self.theta_labels, _floats(self.theta_se))),
            'theta_at_boundary': None if self.at_boundary is None else [bool(b) for b in self.at_boundary],
            'var_par': float(self.var_par) if self.has_scale else None,
            'loglik': None if self.loglik is None else float(self.loglik),
            'trace': self.trace,
            'diagnostics': self.diagnostics,
        }
        if include_re and self.U is not None:
            result['U'] = [_floats(row) for row in self.U]
        return result


def _normal_tail(z: float) -> float:
    return float(scipy.special.ndtr(-z))


def _floats(values) -> list:
    return [float(v) for v in np.atleast_1d(values)]


def _format(value, spec: str = '.4f') -> str:
    return '-' if value is None or not np.isfinite(value) else format(value, spec)
