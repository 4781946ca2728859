import itertools

import numpy as np
import pandas as pd
import pytest

from glmmtool.core.model import GlmmModel
from glmmtool.core.nelder import nelder
from glmmtool.exceptions import ConfigError, DesignSizeError, DegenerateDesignError
from glmmtool.optim.design_space import (DesignSpace, downdate_inverse, update_inverse, local_search, greedy_search,
                                         reverse_greedy, greedy_seed, optimal_design, robust_objective, c_objective,
                                         trace_report)


def _random_spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + n * np.eye(n)


@pytest.fixture
def cluster_space_data():
    data = nelder('~cl(8) > i(2)')
    data['x'] = np.repeat([0.1, 0.5, 0.9, 1.4, 2.0, 2.2, 3.1, 4.0], 2)
    return data


@pytest.fixture
def cluster_model(cluster_space_data):
    return GlmmModel('~ x + (1|gr(cl))', cluster_space_data, covariance=[0.5])


@pytest.fixture
def correlated_model():
    data = nelder('~cl(4) > i(3)')
    data['x'] = np.tile([0.0, 1.0, 2.0], 4) + np.repeat([0.0, 0.3, 0.6, 0.9], 3)
    return GlmmModel('~ x + (1|gr(cl))', data, covariance=[0.5])


def test_downdate_small():
    inverse = np.linalg.inv(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(downdate_inverse(inverse, 1), [[0.5]])


def test_update_and_downdate_match_inversion(rng):
    A = _random_spd(rng, 6)
    np.testing.assert_allclose(update_inverse(np.linalg.inv(A[:5, :5]), A[:5, 5], A[5, 5]), np.linalg.inv(A),
                               rtol=1e-10, atol=1e-12)
    keep = [0, 1, 3, 4, 5]
    np.testing.assert_allclose(downdate_inverse(np.linalg.inv(A), 2), np.linalg.inv(A[np.ix_(keep, keep)]),
                               rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize('n', [2, 5, 10, 25, 50])
def test_rank_one_inverse_updates_on_random_matrices(rng, n):
    A = _random_spd(rng, n)
    inverse = np.linalg.inv(A)
    np.testing.assert_allclose(update_inverse(np.linalg.inv(A[:-1, :-1]), A[:-1, -1], A[-1, -1]), inverse,
                               rtol=1e-8, atol=1e-10)
    for i in rng.choice(n, size=min(n, 3), replace=False):
        keep = np.delete(np.arange(n), i)
        np.testing.assert_allclose(downdate_inverse(inverse, i), np.linalg.inv(A[np.ix_(keep, keep)]),
                                   rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize('n', [3, 20, 50])
def test_add_then_remove_restores_inverse(rng, n):
    A = _random_spd(rng, n)
    start = np.linalg.inv(A[:-1, :-1])
    restored = downdate_inverse(update_inverse(start, A[:-1, -1], A[-1, -1]), n - 1)
    np.testing.assert_allclose(restored, start, atol=1e-7)


def test_uncorrelated_shortcut_matches_correlated_path(cluster_model):
    fast = DesignSpace(cluster_model, [0.0, 1.0], condition='cl')
    slow = DesignSpace(cluster_model, [0.0, 1.0], condition='cl', shortcut=False)
    assert fast.uncorrelated and not slow.uncorrelated
    for labels in ([1, 4, 8], [2, 3, 5, 7], [1, 8]):
        assert fast.evaluate(labels) == pytest.approx(slow.evaluate(labels), rel=1e-9)


def test_rank_one_updates_match_fresh_inversion(correlated_model):
    space = DesignSpace(correlated_model, [0.0, 1.0])
    fresh = DesignSpace(correlated_model, [0.0, 1.0], rank_one=False)
    assert not space.uncorrelated
    selected = [0, 4, 5, 9]
    state = space.state(selected)
    removed = space._removed(state.tracked, selected, 1)
    assert space.objective(removed) == pytest.approx(fresh.state([0, 5, 9]).value, rel=1e-9)
    added = space._added(removed, [0, 5, 9], 7)
    assert space.objective(added) == pytest.approx(fresh.state([0, 5, 9, 7]).value, rel=1e-9)


def test_variance_matches_gls(cluster_model):
    space = DesignSpace(cluster_model, [0.0, 1.0], condition='cl')
    rows = cluster_model.data.index[cluster_model.data['cl'].isin([1, 5, 8])].to_numpy()
    subset = cluster_model.subset_rows(rows)
    assert space.evaluate([1, 5, 8]) == pytest.approx(subset.information_matrix()[1, 1], rel=1e-9)


def test_local_search_close_to_exhaustive(cluster_model):
    space = DesignSpace(cluster_model, [0.0, 1.0], condition='cl')
    best = min(space.state(list(combo)).value for combo in itertools.combinations(range(space.J), 3))
    result = optimal_design(space, 3, algo=[1], restarts=5, seed=11)
    assert result.value <= 1.5 * best
    assert len(result.selected) == 3
    assert np.all(np.diff(result.trace) < 0)


def test_search_traces_are_monotone(rng, cluster_model):
    space = DesignSpace(cluster_model, [0.0, 1.0], condition='cl')
    local = local_search(space, greedy_seed(space, 3, rng))
    assert np.all(np.diff(local.trace) < 0)
    greedy = greedy_search(space, 6, rng=rng)
    assert greedy.size == 6
    assert np.all(np.diff(greedy.trace) <= 1e-12)
    reverse = reverse_greedy(space, 3)
    assert reverse.size == 3
    assert np.all(np.diff(reverse.trace) >= -1e-12)


def test_extreme_covariate_values_chosen(cluster_model):
    space = DesignSpace(cluster_model, [0.0, 1.0], condition='cl')
    result = optimal_design(space, 2, algo=[3])
    assert result.selected == [1, 8]
    assert result.restart_values == [result.value]
    assert result.rows == [0, 1, 14, 15]


def test_duplicate_conditions_merged():
    data = nelder('~cl(6) > i(2)')
    data['x'] = np.repeat([0.0, 0.0, 1.0, 1.0, 1.0, 2.0], 2)
    model = GlmmModel('~ x + (1|gr(cl))', data, covariance=[0.5])
    space = DesignSpace(model, [0.0, 1.0], condition='cl')
    assert space.J == 3
    np.testing.assert_array_equal(space.multiplicity, [2, 3, 1])
    assert space.n_instances == 6
    result = optimal_design(space, 4, algo=[2], restarts=3, seed=5)
    assert sorted(result.selected) == result.selected
    assert len(result.selected) == 4
    no_merge = DesignSpace(model, [0.0, 1.0], condition='cl', deduplicate=False)
    assert no_merge.J == 6


def test_design_size_checked(cluster_model):
    space = DesignSpace(cluster_model, [0.0, 1.0], condition='cl')
    with pytest.raises(DesignSizeError):
        optimal_design(space, 9)
    with pytest.raises(DesignSizeError):
        reverse_greedy(space, 0)


def test_degenerate_design():
    data = pd.DataFrame({'x': [1.0, 1.0, 1.0, 2.0]})
    model = GlmmModel('~ x', data)
    space = DesignSpace(model, [0.0, 1.0])
    with pytest.raises(DegenerateDesignError) as error:
        space.state([0, 0])
    assert error.value.columns


def test_robust_criterion(cluster_space_data):
    models = [GlmmModel('~ x + (1|gr(cl))', cluster_space_data, covariance=[theta]) for theta in (0.2, 1.0)]
    space = DesignSpace(models, [0.0, 1.0], condition='cl', model_weights=[0.25, 0.75])
    state = space.state([0, 3, 7])
    variances = [c_objective(space, state, r) for r in range(2)]
    assert state.value == pytest.approx(0.25 * np.log(variances[0]) + 0.75 * np.log(variances[1]))
    assert robust_objective(space, state, kind='weighted-mean') == pytest.approx(
        0.25 * variances[0] + 0.75 * variances[1])
    with pytest.raises(ConfigError):
        DesignSpace(models, [0.0, 1.0], model_weights=[0.5, 0.6])


def test_removed_columns(cluster_model):
    space = DesignSpace(cluster_model, [1.0], condition='cl', rm_cols=['x'])
    assert space.P == 1
    assert space.evaluate([1, 2]) > 0
    with pytest.raises(ConfigError):
        DesignSpace(cluster_model, [1.0, 0.0, 0.0], condition='cl')


def test_restarts_reproducible(cluster_model):
    space = DesignSpace(cluster_model, [0.0, 1.0], condition='cl')
    first = optimal_design(space, 3, algo=[2, 1], restarts=4, seed=42)
    second = optimal_design(space, 3, algo=[2, 1], restarts=4, seed=42)
    assert first.to_dict() == second.to_dict()
    assert len(first.restart_values) == 4
    assert 'Objective' in trace_report(first)


@pytest.mark.slow
def test_worker_processes_give_same_result(cluster_model):
    space = DesignSpace(cluster_model, [0.0, 1.0], condition='cl')
    serial = optimal_design(space, 3, algo=[1], restarts=4, seed=3)
    parallel = optimal_design(space, 3, algo=[1], restarts=4, seed=3, threads=2)
    assert serial.to_dict() == parallel.to_dict()


@pytest.mark.slow
def test_searches_on_random_instances(rng):
    for _ in range(100):
        J = int(rng.integers(4, 11))
        size = int(rng.integers(2, min(5, J - 1) + 1))
        data = nelder(f'~cl({J}) > i(2)')
        data['x'] = np.repeat(rng.uniform(0.0, 4.0, J), 2)
        model = GlmmModel('~ x + (1|gr(cl))', data, covariance=[rng.uniform(0.1, 1.0)])
        space = DesignSpace(model, [0.0, 1.0], condition='cl')

        best = min(space.state(list(combo)).value for combo in itertools.combinations(range(space.J), size))
        result = optimal_design(space, size, algo=[1], restarts=3, seed=int(rng.integers(1000)))
        assert result.value <= 1.5 * best

        assert np.all(np.diff(local_search(space, greedy_seed(space, size, rng)).trace) < 0)
        assert np.all(np.diff(greedy_search(space, size, rng=rng).trace) <= 1e-12)
        assert np.all(np.diff(reverse_greedy(space, size).trace) >= -1e-12)
