import numpy as np
import pytest

from glmmtool.exceptions import ConfigError, DesignSizeError
from glmmtool.optim.apportion import apportion, hamilton, jefferson, webster, modified_adams, METHODS

SIX = [0.3, 0.1, 0.1, 0.1, 0.1, 0.3]

# Optimal weights of a six-condition design, symmetric about its centre.
OPTIMAL_SIX = [0.2377032, 0.1311486, 0.1311482, 0.1311482, 0.1311486, 0.2377032]


def test_hamilton_largest_remainders():
    np.testing.assert_array_equal(hamilton(SIX, 2), [1, 0, 0, 0, 0, 1])


def test_optimal_weights_two_replications():
    for method in (hamilton, webster, jefferson):
        np.testing.assert_array_equal(method(OPTIMAL_SIX, 2), [1, 0, 0, 0, 0, 1])
    table = apportion(OPTIMAL_SIX, 2)
    assert 'modified-adams' not in table.columns
    np.testing.assert_array_equal(table['hamilton'], [1, 0, 0, 0, 0, 1])


def test_proportional_weights_apportioned_exactly():
    for method in (hamilton, webster, jefferson, modified_adams):
        np.testing.assert_array_equal(method([0.6, 0.3, 0.1], 10), [6, 3, 1])
        np.testing.assert_array_equal(method([0.5, 0.5], 4), [2, 2])


def test_jefferson_favours_large_weights():
    np.testing.assert_array_equal(jefferson([0.45, 0.35, 0.2], 3), [2, 1, 0])
    np.testing.assert_array_equal(webster([0.45, 0.35, 0.2], 3), [1, 1, 1])


def test_modified_adams_gives_every_condition_a_replication():
    counts = modified_adams([0.9, 0.05, 0.05], 5)
    assert counts.sum() == 5
    assert np.all(counts >= 1)
    with pytest.raises(DesignSizeError):
        modified_adams(SIX, 2)


def test_totals(rng):
    for m in (1, 7, 25):
        weights = rng.dirichlet(np.ones(5))
        weights /= weights.sum()
        table = apportion(weights, m)
        for method in METHODS:
            if method in table:
                assert table[method].sum() == m
                assert np.all(table[method] >= 0)


def test_apportion_skips_methods_that_cannot_apportion():
    table = apportion(SIX, 2)
    assert 'modified-adams' not in table.columns
    assert list(table.columns) == ['weight', 'hamilton', 'webster', 'jefferson']


def test_invalid_input():
    with pytest.raises(ConfigError):
        hamilton([0.5, 0.6], 3)
    with pytest.raises(ConfigError):
        hamilton([0.5, 0.5], 0)
    with pytest.raises(ConfigError):
        apportion([0.5, 0.5], 2, methods=['dhondt'])


def test_random_weights_give_valid_counts(rng):
    for _ in range(1000):
        J = int(rng.integers(1, 9))
        m = int(rng.integers(1, 31))
        weights = rng.dirichlet(np.ones(J))
        weights /= weights.sum()
        for method in METHODS:
            if method == 'modified-adams' and m < J:
                continue
            counts = apportion(weights, m, methods=[method])[method].to_numpy()
            assert np.issubdtype(counts.dtype, np.integer)
            assert counts.sum() == m
            assert np.all(counts >= 0)
            if method == 'modified-adams':
                assert np.all(counts >= 1)
