"""Catalogue of covariance functions usable in a random-effect term.

Each entry knows its parameter count, its admissible parameter box and how to emit its RPN code given the position
of its first parameter and the term columns it reads. Functions whose first parameter is a free scale
(``scale_bearing``) cannot be multiplied with another such function in the same term.
"""
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from glmmtool.core.rpn import Op, ProgramBuilder
from glmmtool.exceptions import FormulaError, ParameterError

INF = math.inf


@dataclass(frozen=True)
class ParameterBound:
    """Admissible interval of one parameter. Closed ends are inclusive."""
    lower: float
    upper: float = INF
    lower_closed: bool = False
    upper_closed: bool = False

    def contains(self, value: float) -> bool:
        above = value >= self.lower if self.lower_closed else value > self.lower
        below = value <= self.upper if self.upper_closed else value < self.upper
        return bool(above and below)

    def to_unbounded(self, value: float) -> float:
        """Map a parameter onto the real line (log or logit transform)."""
        if self.lower == -INF and self.upper == INF:
            return float(value)
        if self.upper == INF:
            return math.log(max(value - self.lower, 1e-300))
        p = (value - self.lower) / (self.upper - self.lower)
        p = min(max(p, 1e-15), 1 - 1e-15)
        return math.log(p / (1 - p))

    def from_unbounded(self, z: float) -> float:
        if self.lower == -INF and self.upper == INF:
            return float(z)
        if self.upper == INF:
            return self.lower + math.exp(z)
        return self.lower + (self.upper - self.lower) / (1 + math.exp(-z))

    def distance_to_boundary(self, value: float) -> float:
        return min(abs(value - self.lower), abs(self.upper - value))

    def __str__(self):
        left = '[' if self.lower_closed else '('
        right = ']' if self.upper_closed else ')'
        return f"{left}{self.lower:g}, {self.upper:g}{right}"


REAL = ParameterBound(-INF)
POSITIVE = ParameterBound(0.0)
UNIT_INTERVAL = ParameterBound(0.0, 1.0)


@dataclass(frozen=True)
class CovarianceFunction:
    name: str
    description: str
    n_params: int
    emit: Callable
    bounds: Callable
    scale_bearing: bool = False
    compact: bool = False
    max_dim: int = None

    def parameter_bounds(self, dim: int) -> list:
        return self.bounds(dim)

    def check_dimension(self, dim: int):
        if self.max_dim is not None and dim > self.max_dim:
            raise FormulaError(f"{self.name}() is only valid in up to {self.max_dim} dimension(s), "
                               f"got {dim} variables.")


def _emit_gr(b: ProgramBuilder, p: int, cols: list, scale):
    b.distance(cols).emit(Op.IS_ZERO)
    b.param(p).param(p).emit(Op.MUL).emit(Op.MUL)


def _emit_fexp(b, p, cols, scale):
    b.param(p)
    b.distance(cols).param(p + 1).emit(Op.DIV).emit(Op.NEG).emit(Op.EXP)
    b.emit(Op.MUL)


def _emit_fexp0(b, p, cols, scale):
    b.distance(cols).param(p).emit(Op.DIV).emit(Op.NEG).emit(Op.EXP)


def _emit_sqexp(b, p, cols, scale):
    b.param(p)
    b.distance(cols).param(p + 1).emit(Op.DIV).const(2).emit(Op.POW).emit(Op.NEG).emit(Op.EXP)
    b.emit(Op.MUL)


def _emit_sqexp0(b, p, cols, scale):
    b.distance(cols).param(p).emit(Op.DIV).const(2).emit(Op.POW).emit(Op.NEG).emit(Op.EXP)


def _emit_ar1(b, p, cols, scale):
    b.param(p).distance(cols).emit(Op.POW)


def _emit_bessel(b, p, cols, scale):
    b.param(p).distance(cols).emit(Op.BESSEL_K)


def _emit_matern(b, p, cols, scale):
    # 2^(1-nu) / Gamma(nu)
    b.const(2).const(1).param(p).emit(Op.SUB).emit(Op.POW)
    b.param(p).emit(Op.GAMMA_FN).emit(Op.DIV)
    # z^nu K_nu(z), z = sqrt(2 nu) d / rho
    b.param(p)
    b.const(2).param(p).emit(Op.MUL).emit(Op.SQRT)
    b.distance(cols).emit(Op.MUL).param(p + 1).emit(Op.DIV)
    b.emit(Op.SCALED_BESSEL_K)
    b.emit(Op.MUL)


def _emit_one_minus_y_pos(b, cols, scale):
    b.const(1).distance(cols, scale).emit(Op.SUB).emit(Op.POS_PART)


def _emit_wend0(b, p, cols, scale):
    b.param(p)
    _emit_one_minus_y_pos(b, cols, scale)
    b.param(p + 1).emit(Op.POW)
    b.emit(Op.MUL)


def _emit_wend1(b, p, cols, scale):
    b.param(p)
    # 1 + (k + 1) y
    b.const(1).param(p + 1).const(1).emit(Op.ADD).distance(cols, scale).emit(Op.MUL).emit(Op.ADD)
    b.emit(Op.MUL)
    _emit_one_minus_y_pos(b, cols, scale)
    b.param(p + 1).const(1).emit(Op.ADD).emit(Op.POW)
    b.emit(Op.MUL)


def _emit_wend2(b, p, cols, scale):
    b.param(p)
    # 1 + (k + 2) y + ((k + 2)^2 - 1) y^2 / 3
    b.const(1)
    b.param(p + 1).const(2).emit(Op.ADD).distance(cols, scale).emit(Op.MUL).emit(Op.ADD)
    b.param(p + 1).const(2).emit(Op.ADD).const(2).emit(Op.POW).const(1).emit(Op.SUB)
    b.distance(cols, scale).const(2).emit(Op.POW).emit(Op.MUL).const(3).emit(Op.DIV)
    b.emit(Op.ADD)
    b.emit(Op.MUL)
    _emit_one_minus_y_pos(b, cols, scale)
    b.param(p + 1).const(2).emit(Op.ADD).emit(Op.POW)
    b.emit(Op.MUL)


def _emit_prodwm(b, p, cols, scale):
    b.param(p)
    b.const(2).const(1).param(p + 1).emit(Op.SUB).emit(Op.POW)
    b.param(p + 1).emit(Op.GAMMA_FN).emit(Op.DIV)
    b.emit(Op.MUL)
    b.param(p + 1).distance(cols, scale).emit(Op.SCALED_BESSEL_K)
    b.emit(Op.MUL)
    # 1 + 11/2 y + 117/12 y^2
    b.const(1).const(5.5).distance(cols, scale).emit(Op.MUL).emit(Op.ADD)
    b.const(117 / 12).distance(cols, scale).const(2).emit(Op.POW).emit(Op.MUL).emit(Op.ADD)
    b.emit(Op.MUL)
    _emit_one_minus_y_pos(b, cols, scale)
    b.emit(Op.MUL)


def _emit_prodcb(b, p, cols, scale):
    b.param(p)
    # Cauchy part (1 + y^k)^-3
    b.const(1).distance(cols, scale).param(p + 1).emit(Op.POW).emit(Op.ADD).const(-3).emit(Op.POW)
    b.emit(Op.MUL)
    # Bohman part (1 - y) cos(pi y) + sin(pi y) / pi
    b.const(1).distance(cols, scale).emit(Op.SUB)
    b.const(math.pi).distance(cols, scale).emit(Op.MUL).emit(Op.COS).emit(Op.MUL)
    b.const(math.pi).distance(cols, scale).emit(Op.MUL).emit(Op.SIN).const(math.pi).emit(Op.DIV)
    b.emit(Op.ADD)
    b.emit(Op.MUL)
    b.distance(cols, scale).emit(Op.BELOW_ONE)
    b.emit(Op.MUL)


def _emit_prodek(b, p, cols, scale):
    b.param(p)
    b.distance(cols, scale).param(p + 1).emit(Op.POW).emit(Op.NEG).emit(Op.EXP)
    b.emit(Op.MUL)
    # (1 - y) sinc(2 pi y) + (1 - cos(2 pi y)) / (2 pi^2 y)
    b.const(1).distance(cols, scale).emit(Op.SUB)
    b.const(2 * math.pi).distance(cols, scale).emit(Op.MUL).emit(Op.SINC)
    b.emit(Op.MUL)
    b.const(2 * math.pi).distance(cols, scale).emit(Op.MUL).emit(Op.COSC).const(math.pi).emit(Op.DIV)
    b.emit(Op.ADD)
    b.emit(Op.MUL)
    b.distance(cols, scale).emit(Op.BELOW_ONE)
    b.emit(Op.MUL)


def _wendland_bounds(offset: int):
    return lambda dim: [POSITIVE, ParameterBound((dim + offset) / 2, lower_closed=True)]


CATALOGUE = {
    'gr': CovarianceFunction('gr', "Group membership", 1, _emit_gr, lambda dim: [POSITIVE],
                             scale_bearing=True),
    'fexp': CovarianceFunction('fexp', "Exponential", 2, _emit_fexp, lambda dim: [POSITIVE, POSITIVE],
                               scale_bearing=True),
    'fexp0': CovarianceFunction('fexp0', "Exponential, unit variance", 1, _emit_fexp0, lambda dim: [POSITIVE]),
    'sqexp': CovarianceFunction('sqexp', "Squared exponential", 2, _emit_sqexp, lambda dim: [POSITIVE, POSITIVE],
                                scale_bearing=True),
    'sqexp0': CovarianceFunction('sqexp0', "Squared exponential, unit variance", 1, _emit_sqexp0,
                                 lambda dim: [POSITIVE]),
    'ar1': CovarianceFunction('ar1', "Autoregressive order 1", 1, _emit_ar1, lambda dim: [UNIT_INTERVAL]),
    'bessel': CovarianceFunction('bessel', "Modified Bessel of the second kind", 1, _emit_bessel,
                                 lambda dim: [POSITIVE]),
    'matern': CovarianceFunction('matern', "Matern", 2, _emit_matern, lambda dim: [POSITIVE, POSITIVE]),
    'wend0': CovarianceFunction('wend0', "Wendland 0", 2, _emit_wend0, _wendland_bounds(1),
                                scale_bearing=True, compact=True),
    'wend1': CovarianceFunction('wend1', "Wendland 1", 2, _emit_wend1, _wendland_bounds(3),
                                scale_bearing=True, compact=True),
    'wend2': CovarianceFunction('wend2', "Wendland 2", 2, _emit_wend2, _wendland_bounds(5),
                                scale_bearing=True, compact=True),
    'prodwm': CovarianceFunction('prodwm', "Whittle-Matern x Wendland", 2, _emit_prodwm,
                                 lambda dim: [POSITIVE, POSITIVE], scale_bearing=True, compact=True, max_dim=2),
    'prodcb': CovarianceFunction('prodcb', "Cauchy x Bohman", 2, _emit_prodcb,
                                 lambda dim: [POSITIVE, ParameterBound(0.0, 2.0, True, True)],
                                 scale_bearing=True, compact=True, max_dim=1),
    'prodek': CovarianceFunction('prodek', "Exponential x Kantar", 2, _emit_prodek,
                                 lambda dim: [POSITIVE, POSITIVE], scale_bearing=True, compact=True, max_dim=3),
}


def get_function(name: str) -> CovarianceFunction:
    if name not in CATALOGUE:
        raise FormulaError(f"Unknown covariance function '{name}'. Available: {', '.join(CATALOGUE)}.")
    return CATALOGUE[name]


def check_parameters(theta, bounds: list, labels: list = None):
    """Raise ParameterError for any parameter outside its box."""
    theta = np.asarray(theta, dtype=float)
    assert len(theta) == len(bounds), f"Expected {len(bounds)} covariance parameters, got {len(theta)}."
    for k, (value, bound) in enumerate(zip(theta, bounds)):
        if not np.isfinite(value) or not bound.contains(value):
            label = labels[k] if labels else f"theta[{k}]"
            raise ParameterError(f"Covariance parameter {label}={value} outside admissible range {bound}.")
