"""Derivative-free minimisation over boxes of model parameters.

Bounded parameters are mapped to the real line (log for half-lines, logit for intervals) and searched inside a
symmetric box of the transformed space, so parameters can approach but not reach an open bound.
"""
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.optimize

from glmmtool.core.covariance_functions import ParameterBound, INF
from glmmtool.exceptions import NumericalError

logger = logging.getLogger(__name__)

# Transformed bounded parameters stay in [-TRANSFORMED_BOX, TRANSFORMED_BOX].
TRANSFORMED_BOX = 25.0
BOUNDARY_TOLERANCE = 1e-6
# Largest distance in the transformed space from which a parameter is tried on the edge of the box.
SNAP_DISTANCE = 20.0
PENALTY = 1e300
METHODS = ('COBYQA', 'Nelder-Mead')


@dataclass
class OptimizerResult:
    x: np.ndarray
    fun: float
    n_evaluations: int
    success: bool
    message: str
    at_boundary: np.ndarray


def _is_real(bound: ParameterBound) -> bool:
    return bound.lower == -INF and bound.upper == INF


class BoundedMinimizer:
    """Minimise a function of parameters with box constraints without derivatives.

    :param bounds: one :class:`ParameterBound` per parameter
    :param max_evaluations: largest number of objective evaluations
    :param tolerance: final trust-region radius (COBYQA) or simplex size (Nelder-Mead)
    :param method: first method tried; Nelder-Mead is the fallback
    """
    bounds: list

    def __init__(self, bounds: list, max_evaluations: int = 2000, tolerance: float = 1e-8, method: str = 'COBYQA'):
        assert method in METHODS, f"Optimizer method must be one of {METHODS}."
        self.bounds = list(bounds)
        self.max_evaluations = max_evaluations
        self.tolerance = tolerance
        self.method = method

    def to_unbounded(self, x) -> np.ndarray:
        return np.array([bound.to_unbounded(value) for bound, value in zip(self.bounds, x)])

    def from_unbounded(self, z) -> np.ndarray:
        return np.array([bound.from_unbounded(value) for bound, value in zip(self.bounds, z)])

    def _box(self) -> scipy.optimize.Bounds:
        lower = np.array([-np.inf if _is_real(b) else -TRANSFORMED_BOX for b in self.bounds])
        return scipy.optimize.Bounds(lower, -lower)

    def at_boundary(self, x) -> np.ndarray:
        return np.array([not _is_real(bound) and bound.distance_to_boundary(value) < BOUNDARY_TOLERANCE
                         for bound, value in zip(self.bounds, x)])

    @staticmethod
    def _snap_to_box(transformed: Callable, z: np.ndarray, fun: float, box: scipy.optimize.Bounds):
        """Move parameters drifting towards an edge of the box onto it when that does not worsen the objective."""
        tolerance = 1e-9 * (1 + abs(fun))
        for k in range(len(z)):
            for edge in (box.lb[k], box.ub[k]):
                if not np.isfinite(edge) or z[k] == edge or abs(z[k] - edge) > SNAP_DISTANCE:
                    continue
                candidate = z.copy()
                candidate[k] = edge
                value = transformed(candidate)
                if value <= fun + tolerance:
                    z, fun = candidate, value
        return z, fun

    def minimize(self, objective: Callable, x0) -> OptimizerResult:
        x0 = np.asarray(x0, dtype=float)
        assert len(x0) == len(self.bounds), f"Expected {len(self.bounds)} starting values, got {len(x0)}."
        box = self._box()
        z0 = np.clip(self.to_unbounded(x0), box.lb, box.ub)
        evaluations = 0

        def transformed(z):
            nonlocal evaluations
            evaluations += 1
            value = objective(self.from_unbounded(z))
            return float(value) if np.isfinite(value) else PENALTY

        start = transformed(z0)
        if start >= PENALTY:
            raise NumericalError(f"Objective is not finite at the starting values {x0}.")

        result = None
        for method in (self.method,) + tuple(m for m in METHODS if m != self.method):
            options = {'maxfev': self.max_evaluations}
            if method == 'COBYQA':
                options['final_tr_radius'] = self.tolerance
            else:
                options.update(xatol=self.tolerance, fatol=self.tolerance)
            try:
                result = scipy.optimize.minimize(transformed, z0, method=method, bounds=box, options=options)
            except ValueError as error:
                logger.warning(f"{method} unavailable ({error}); falling back")
                continue
            if np.isfinite(result.fun) and result.fun < PENALTY:
                break
            logger.warning(f"{method} ended at a non-finite objective; falling back")

        if result is None or not result.fun < PENALTY:
            raise NumericalError("Derivative-free minimisation failed to find a finite objective value.")
        z, fun = (result.x, float(result.fun)) if result.fun <= start else (z0, start)
        z, fun = self._snap_to_box(transformed, np.array(z, dtype=float), fun, box)
        x = self.from_unbounded(z)
        boundary = self.at_boundary(x)
        logger.debug(f"Minimised over {len(x)} parameter(s) in {evaluations} evaluation(s): {fun:.6g}")
        return OptimizerResult(x=x, fun=fun, n_evaluations=evaluations, success=bool(result.success),
                               message=str(result.message), at_boundary=boundary)
