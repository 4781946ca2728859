"""Rounding approximate design weights to integer numbers of replications."""
import logging
import math

import numpy as np
import pandas as pd

from glmmtool.exceptions import ConfigError, DesignSizeError

logger = logging.getLogger(__name__)

METHODS = ('hamilton', 'webster', 'jefferson', 'modified-adams')


def _check(weights, m: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or not len(weights):
        raise ConfigError("Weights must be a non-empty vector.")
    if np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
        raise ConfigError(f"Weights must be non-negative and sum to 1, got sum {weights.sum():.12g}.")
    if int(m) != m or m < 1:
        raise ConfigError(f"Number of replications must be a positive integer, got {m}.")
    return weights


def hamilton(weights, m: int) -> np.ndarray:
    """Largest remainder: floor of the quotas, remaining units to the largest fractional parts."""
    weights = _check(weights, m)
    quotas = weights * m
    counts = np.floor(quotas).astype(int)
    remainder = m - counts.sum()
    order = np.argsort(-(quotas - counts), kind='stable')
    counts[order[:remainder]] += 1
    return counts


def _divisor_method(weights: np.ndarray, m: int, divisor) -> np.ndarray:
    counts = np.zeros(len(weights), dtype=int)
    for _ in range(m):
        counts[int(np.argmax(weights / divisor(counts)))] += 1
    return counts


def webster(weights, m: int) -> np.ndarray:
    """Divisor method with divisors 1, 3, 5, ..."""
    return _divisor_method(_check(weights, m), m, lambda s: 2 * s + 1)


def jefferson(weights, m: int) -> np.ndarray:
    """Divisor method with divisors 1, 2, 3, ..."""
    return _divisor_method(_check(weights, m), m, lambda s: s + 1)


def modified_adams(weights, m: int) -> np.ndarray:
    """Efficient rounding: every condition gets at least one replication.

    Starts from n_j = ceil((m - J/2) w_j), at least 1, then adds to the condition with the smallest n_j / w_j or
    removes from the one with the largest (n_j - 1) / w_j among n_j > 1 until the total is m.
    """
    weights = _check(weights, m)
    J = len(weights)
    if m < J:
        raise DesignSizeError(f"Modified Adams apportionment needs at least one replication per condition: "
                              f"m={m} is below J={J}.")
    counts = np.maximum(np.ceil((m - J / 2) * weights - 1e-12).astype(int), 1)
    with np.errstate(divide='ignore'):
        while counts.sum() < m:
            counts[int(np.argmin(counts / weights))] += 1
        while counts.sum() > m:
            ratios = np.where(counts > 1, (counts - 1) / weights, -np.inf)
            counts[int(np.argmax(ratios))] -= 1
    return counts


APPORTIONMENT = {'hamilton': hamilton, 'webster': webster, 'jefferson': jefferson,
                 'modified-adams': modified_adams}


def apportion(weights, m: int, methods=METHODS) -> pd.DataFrame:
    """Integer replications per condition by each method, one column per method.

    Methods that cannot apportion ``m`` (modified Adams with m < J) are left out with a warning.
    """
    weights = _check(weights, m)
    table = pd.DataFrame({'weight': weights})
    for method in methods:
        if method not in APPORTIONMENT:
            raise ConfigError(f"Unknown apportionment method '{method}'; choose from {METHODS}.")
        try:
            table[method] = APPORTIONMENT[method](weights, m)
        except DesignSizeError as error:
            logger.warning(str(error))
    logger.debug(f"Apportioned {m} replications over {len(weights)} conditions ({math.fsum(weights):.6f})")
    return table
