"""Approximate c-optimal designs by combinatorial search over experimental conditions.

A design is a multiset of experimental conditions drawn from a design space. Its quality is the variance
c^T M_d^-1 c of a linear combination of the mean parameters, with M_d = X_d^T Sigma_d^-1 X_d the information matrix
of the observations in the design. With several models the variances are combined by a robust criterion.

Conditions whose rows are identical in every model are merged and kept once with a multiplicity. When conditions are
mutually uncorrelated in every model the information matrix is a sum of per-condition terms; otherwise Sigma_d^-1 is
maintained by rank-1 up- and down-dates as conditions enter and leave the design.

The searches:

- ``1`` local search: best improving swap of a design condition for a candidate, until none improves
- ``2`` greedy search: from a small non-degenerate design add the best condition until the target size
- ``3`` reverse greedy search: from the full space remove the least useful condition until the target size
"""
import logging
import multiprocessing
from dataclasses import dataclass, field
from functools import partial
from typing import Union

import numpy as np
import pandas as pd
import prettytable
import scipy.linalg

from glmmtool.core import sparse
from glmmtool.core.model import GlmmModel
from glmmtool.exceptions import (ConfigError, CovarianceError, DegenerateDesignError, DesignSizeError,
                                 SingularMatrixError)

logger = logging.getLogger(__name__)

ROBUST_CRITERIA = ('log-sum', 'weighted-mean')
ALGORITHMS = {1: 'local', 2: 'greedy', 3: 'reverse-greedy'}
DEGENERATE_TOLERANCE = 1e-10
UPDATE_TOLERANCE = 1e-12
SEED_RETRIES = 50
DEFAULT_RESTARTS = 10


def downdate_inverse(inverse: np.ndarray, i: int) -> np.ndarray:
    """Inverse of a symmetric matrix with row and column ``i`` removed, from the inverse of the full matrix.

    With row and column ``i`` of the inverse permuted last, ``[[C, f], [f^T, e]]``, the result is C - f f^T / e.
    """
    inverse = np.asarray(inverse, dtype=float)
    order = np.r_[np.arange(i), np.arange(i + 1, len(inverse))]
    e = inverse[i, i]
    if abs(e) < UPDATE_TOLERANCE:
        raise SingularMatrixError(f"Rank-1 downdate pivot {e:.3e} is numerically zero")
    f = inverse[order, i]
    return inverse[np.ix_(order, order)] - np.outer(f, f) / e


def update_inverse(inverse: np.ndarray, k: np.ndarray, h: float) -> np.ndarray:
    """Inverse of ``[[Sigma, k], [k^T, h]]`` from the inverse of Sigma by two Sherman-Morrison corrections.

    The expanded matrix is diag(Sigma, h) + u v^T + v u^T with u = (k, 0) and v the last unit vector.
    """
    inverse = np.asarray(inverse, dtype=float)
    if not h > 0:
        raise SingularMatrixError(f"Variance {h} of the added observation is not positive")
    n = len(inverse)
    result = np.zeros((n + 1, n + 1))
    result[:n, :n] = inverse
    result[n, n] = 1 / h
    u = np.append(np.asarray(k, dtype=float), 0.0)

    # diag(Sigma, h) + u v^T
    left = result @ u
    right = result[n].copy()
    result -= np.outer(left, right) / (1 + right @ u)

    # ... + v u^T
    left = result[:, n].copy()
    right = u @ result
    denominator = 1 + right[n]
    if abs(denominator) < UPDATE_TOLERANCE:
        raise SingularMatrixError(f"Sherman-Morrison denominator {denominator:.3e} is numerically zero")
    result -= np.outer(left, right) / denominator
    return result


def _check_information(information: np.ndarray, names: list, X_d: np.ndarray = None):
    """Raise DegenerateDesignError when M_d is not positive definite, suggesting columns to remove."""
    try:
        sparse.dense_cholesky(information, tolerance=DEGENERATE_TOLERANCE)
    except CovarianceError:
        raise DegenerateDesignError("Information matrix of the design is not positive definite",
                                    columns=suggest_columns(information, names, X_d))


def suggest_columns(information: np.ndarray, names: list, X_d: np.ndarray = None) -> list:
    """Mean columns that may make a design degenerate: columns constant at zero in the design, then columns beyond
    the numerical rank of the information matrix."""
    suggested = []
    if X_d is not None and len(X_d):
        suggested = [names[j] for j in np.flatnonzero(np.all(X_d == 0, axis=0))]
    _, r, pivots = scipy.linalg.qr(information, pivoting=True)
    diagonal = np.abs(np.diag(r))
    rank = int(np.sum(diagonal > DEGENERATE_TOLERANCE * max(diagonal[0], 1e-300))) if len(diagonal) else 0
    suggested += [names[j] for j in pivots[rank:] if names[j] not in suggested]
    return suggested


class _ModelTerms:
    """The matrices of one model used by the searches, restricted to the kept mean columns."""

    def __init__(self, model: GlmmModel, c, rm_cols: list):
        keep = [j for j, name in enumerate(model.parameter_names) if name not in rm_cols]
        c = np.asarray(c, dtype=float)
        if len(c) not in (model.P, len(keep)):
            raise ConfigError(f"c vector has {len(c)} entries; the model has {model.P} mean columns "
                              f"({', '.join(model.parameter_names)}).")
        self.c = c[keep] if len(c) == model.P else c
        if not np.any(self.c):
            raise ConfigError("c vector is zero on the kept columns.")
        self.names = [model.parameter_names[j] for j in keep]
        self.X = model.X.matrix[:, keep]
        self.w_inv = 1 / model.glm_weights()
        self.marginal = model.covariance.marginal().toarray() if model.Q else np.zeros((model.n, model.n))

    def sigma(self, rows) -> np.ndarray:
        return self.marginal[np.ix_(rows, rows)] + np.diag(self.w_inv[rows])


@dataclass
class DesignState:
    """A design: ``selected`` lists unique condition ids (with repetition) in the order they entered."""
    selected: list
    value: float
    trace: list = field(default_factory=list)
    tracked: list = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.selected)

    def counts(self, n_conditions: int) -> np.ndarray:
        return np.bincount(np.asarray(self.selected, dtype=int), minlength=n_conditions)


class DesignSpace:
    """Candidate experimental conditions for one or more models of the same rows.

    :param models: models over the same candidate rows
    :param c: c vector per model (a single vector is used for every model)
    :param condition: experimental condition of each row, as an array or a data column name; every row is its own
        condition when omitted
    :param model_weights: prior weights of the models, uniform when omitted
    :param robust: robust criterion combining several models, ``'log-sum'`` or ``'weighted-mean'``
    :param rm_cols: mean columns removed from every model
    :param rank_one: maintain Sigma_d^-1 by rank-1 updates rather than fresh inversions
    :param shortcut: use the per-condition information sum when conditions are mutually uncorrelated
    :param deduplicate: merge conditions whose rows are identical in every model
    """
    models: list
    terms: list

    def __init__(self, models: Union[GlmmModel, list], c, condition=None, model_weights=None,
                 robust: str = 'log-sum', rm_cols: list = None, rank_one: bool = True, shortcut: bool = True,
                 deduplicate: bool = True):
        self.models = [models] if isinstance(models, GlmmModel) else list(models)
        if not self.models:
            raise ConfigError("A design space needs at least one model.")
        n = self.models[0].n
        if any(model.n != n for model in self.models):
            raise ConfigError("All models of a design space must describe the same rows.")
        c_vectors = [c] * len(self.models) if np.ndim(c[0] if len(c) else 0) == 0 else list(c)
        if len(c_vectors) != len(self.models):
            raise ConfigError(f"Got {len(c_vectors)} c vectors for {len(self.models)} models.")
        self.rm_cols = list(rm_cols or [])
        self.terms = [_ModelTerms(model, vector, self.rm_cols) for model, vector in zip(self.models, c_vectors)]

        if model_weights is None:
            model_weights = np.full(len(self.models), 1 / len(self.models))
        self.model_weights = np.asarray(model_weights, dtype=float)
        if len(self.model_weights) != len(self.models) or np.any(self.model_weights < 0) \
                or np.any(self.model_weights > 1) or abs(self.model_weights.sum() - 1) > 1e-9:
            raise ConfigError(f"Model weights must be {len(self.models)} values in [0, 1] summing to 1, "
                              f"got {list(self.model_weights)}.")
        if robust not in ROBUST_CRITERIA:
            raise ConfigError(f"Robust criterion must be one of {ROBUST_CRITERIA}, got '{robust}'.")
        self.robust = robust
        self.rank_one = rank_one

        if condition is None:
            condition = np.arange(n)
        elif isinstance(condition, str):
            condition = self.models[0].data[condition].to_numpy()
        condition = np.asarray(condition)
        if len(condition) != n:
            raise ConfigError(f"Condition assignment has {len(condition)} entries for {n} rows.")
        self.labels, first, self.condition_index = np.unique(condition, return_index=True, return_inverse=True)
        self.condition_index = np.asarray(self.condition_index).reshape(-1)
        by_label = [np.flatnonzero(self.condition_index == e) for e in range(len(self.labels))]
        self.label_rows = {_plain(label): rows for label, rows in zip(self.labels, by_label)}
        # Keep conditions in the order of their first row.
        self.label_order = np.argsort(first, kind='stable')
        condition_rows = [by_label[e] for e in self.label_order]
        self.uncorrelated = shortcut and self._conditions_uncorrelated()
        self._merge(condition_rows, deduplicate)

        if self.uncorrelated:
            self.condition_information = [
                np.stack([self._condition_information(t, rows) for rows in self.rows]) for t in self.terms]
        logger.info(f"Design space: {n} rows, {len(condition_rows)} conditions, {self.J} unique, "
                    f"{'uncorrelated' if self.uncorrelated else 'correlated'} conditions, "
                    f"{len(self.models)} model(s)")

    @property
    def J(self) -> int:
        """Number of unique conditions."""
        return len(self.rows)

    @property
    def n_instances(self) -> int:
        return int(np.sum(self.multiplicity))

    @property
    def P(self) -> int:
        return max(len(t.names) for t in self.terms)

    def _conditions_uncorrelated(self) -> bool:
        for model in self.models:
            if model.Q == 0:
                continue
            marginal = model.covariance.marginal().tocoo()
            if np.any(self.condition_index[marginal.row] != self.condition_index[marginal.col]):
                return False
        return True

    def _signature(self, rows) -> bytes:
        parts = []
        for term, model in zip(self.terms, self.models):
            parts.append(term.X[rows].tobytes())
            parts.append(term.w_inv[rows].tobytes())
            if self.uncorrelated:
                parts.append(term.sigma(rows).tobytes())
            else:
                parts.append(model.covariance.Z[rows].toarray().tobytes())
        return b'|'.join(parts)

    def _merge(self, condition_rows: list, deduplicate: bool):
        self.rows, self.multiplicity, self.members = [], [], []
        seen = {}
        for position, rows in enumerate(condition_rows):
            label = self.labels[self.label_order[position]]
            key = self._signature(rows) if deduplicate else position
            if key in seen:
                k = seen[key]
                self.multiplicity[k] += 1
                self.members[k].append(label)
                continue
            seen[key] = len(self.rows)
            self.rows.append(rows)
            self.multiplicity.append(1)
            self.members.append([label])
        self.multiplicity = np.array(self.multiplicity)

    @staticmethod
    def _condition_information(term: _ModelTerms, rows) -> np.ndarray:
        X = term.X[rows]
        return X.T @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(term.sigma(rows), lower=True), X)

    def conditions_of(self, labels) -> list:
        """Unique condition ids of original condition labels."""
        lookup = {label: k for k, members in enumerate(self.members) for label in members}
        return [lookup[label] for label in labels]

    def expand(self, selected) -> np.ndarray:
        return np.concatenate([self.rows[k] for k in selected]) if len(selected) else np.zeros(0, dtype=int)

    # Tracked quantities per model: the information sum on the uncorrelated path, (Sigma_d^-1, rows) otherwise.

    def _track(self, selected) -> list:
        if self.uncorrelated:
            counts = np.bincount(np.asarray(selected, dtype=int), minlength=self.J)
            return [np.tensordot(counts, information, axes=1) for information in self.condition_information]
        rows = self.expand(selected)
        tracked = []
        for term in self.terms:
            try:
                factor = scipy.linalg.cho_factor(term.sigma(rows), lower=True)
            except np.linalg.LinAlgError:
                raise SingularMatrixError("Covariance of the design observations is singular")
            tracked.append((scipy.linalg.cho_solve(factor, np.eye(len(rows))), rows))
        return tracked

    def _removed(self, tracked: list, selected: list, index: int) -> list:
        k = selected[index]
        if self.uncorrelated:
            return [M - information[k] for M, information in zip(tracked, self.condition_information)]
        remaining = selected[:index] + selected[index + 1:]
        if not self.rank_one:
            return self._track(remaining)
        start = sum(len(self.rows[j]) for j in selected[:index])
        result = []
        for term, (inverse, rows) in zip(self.terms, tracked):
            positions = range(start, start + len(self.rows[k]))
            try:
                for p in reversed(positions):
                    inverse = downdate_inverse(inverse, p)
                rows = np.delete(rows, list(positions))
            except SingularMatrixError:
                logger.warning("Rank-1 downdate failed; refactorising")
                rows = np.delete(rows, list(positions))
                inverse = scipy.linalg.inv(term.sigma(rows))
            result.append((inverse, rows))
        return result

    def _added(self, tracked: list, selected: list, k: int) -> list:
        if self.uncorrelated:
            return [M + information[k] for M, information in zip(tracked, self.condition_information)]
        if not self.rank_one:
            return self._track(list(selected) + [k])
        result = []
        for term, (inverse, rows) in zip(self.terms, tracked):
            for row in self.rows[k]:
                try:
                    inverse = update_inverse(inverse, term.marginal[rows, row],
                                             term.marginal[row, row] + term.w_inv[row])
                    rows = np.append(rows, row)
                except SingularMatrixError:
                    logger.warning("Rank-1 update failed; refactorising")
                    rows = np.append(rows, row)
                    inverse = scipy.linalg.inv(term.sigma(rows))
            result.append((inverse, rows))
        return result

    def informations(self, tracked: list) -> list:
        if self.uncorrelated:
            return list(tracked)
        return [term.X[rows].T @ inverse @ term.X[rows] for term, (inverse, rows) in zip(self.terms, tracked)]

    def variances(self, tracked: list) -> np.ndarray:
        """c_r^T M_{d,r}^-1 c_r for every model."""
        values = []
        for r, (term, information) in enumerate(zip(self.terms, self.informations(tracked))):
            X_d = None if self.uncorrelated else term.X[tracked[r][1]]
            _check_information(information, term.names, X_d)
            values.append(float(term.c @ scipy.linalg.cho_solve(scipy.linalg.cho_factor(information, lower=True),
                                                                 term.c)))
        return np.array(values)

    def criterion(self, variances: np.ndarray) -> float:
        if len(variances) == 1:
            return float(variances[0])
        if self.robust == 'log-sum':
            return float(self.model_weights @ np.log(variances))
        return float(self.model_weights @ variances)

    def objective(self, tracked: list) -> float:
        return self.criterion(self.variances(tracked))

    def state(self, selected) -> DesignState:
        """Design state of a multiset of unique condition ids."""
        selected = [int(k) for k in selected]
        counts = np.bincount(np.asarray(selected, dtype=int), minlength=self.J)
        if len(counts) > self.J or np.any(counts > self.multiplicity):
            raise ConfigError("Design selects conditions more often than they are available.")
        tracked = self._track(selected)
        value = self.objective(tracked)
        return DesignState(selected=selected, value=value, trace=[value], tracked=tracked)

    def evaluate(self, labels) -> float:
        """Objective of a design given by original condition labels."""
        return self.state(self.conditions_of(labels)).value

    def full_design(self) -> list:
        return [k for k in range(self.J) for _ in range(self.multiplicity[k])]

    def available(self, selected) -> np.ndarray:
        return self.multiplicity - np.bincount(np.asarray(selected, dtype=int), minlength=self.J)

    def random_design(self, size: int, rng: np.random.Generator) -> list:
        pool = np.array(self.full_design())
        return sorted(int(k) for k in rng.choice(pool, size=size, replace=False))

    def table(self, state: DesignState) -> pd.DataFrame:
        counts = state.counts(self.J)
        return pd.DataFrame({'condition': [self.members[k][0] for k in range(self.J)],
                             'available': self.multiplicity, 'selected': counts})


def c_objective(space: DesignSpace, state: DesignState, model: int = 0) -> float:
    """c^T M_d^-1 c of one model for a design."""
    return float(space.variances(state.tracked)[model])


def robust_objective(space: DesignSpace, state: DesignState, weights=None, kind: str = None) -> float:
    """Combine the variances of all models: sum_r rho_r log(g_r) (``'log-sum'``) or sum_r rho_r g_r
    (``'weighted-mean'``)."""
    kind = kind or space.robust
    assert kind in ROBUST_CRITERIA, f"Robust criterion must be one of {ROBUST_CRITERIA}."
    weights = space.model_weights if weights is None else np.asarray(weights, dtype=float)
    variances = space.variances(state.tracked)
    return float(weights @ (np.log(variances) if kind == 'log-sum' else variances))


def _improvement_threshold(value: float) -> float:
    return 1e-12 * max(1.0, abs(value))


def local_search(space: DesignSpace, start: DesignState) -> DesignState:
    """Swap conditions of the design for candidates while the best swap improves the objective."""
    selected, tracked, value = list(start.selected), start.tracked, start.value
    trace = list(start.trace)
    while True:
        best = None
        for index, out in enumerate(selected):
            removed = space._removed(tracked, selected, index)
            remaining = selected[:index] + selected[index + 1:]
            available = space.available(remaining)
            for k in range(space.J):
                if k == out or available[k] <= 0:
                    continue
                candidate = space._added(removed, remaining, k)
                try:
                    candidate_value = space.objective(candidate)
                except DegenerateDesignError:
                    continue
                if candidate_value < (best[0] if best else value) - _improvement_threshold(value):
                    best = (candidate_value, remaining + [k], candidate, out, k)
        if best is None:
            break
        value, selected, tracked, out, k = best
        trace.append(value)
        logger.debug(f"Local search swapped condition {out} for {k}: {value:.6g}")
    logger.info(f"Local search finished after {len(trace) - len(start.trace)} swap(s): {value:.6g}")
    return DesignState(selected=selected, value=value, trace=trace, tracked=tracked)


def greedy_search(space: DesignSpace, size: int, start: DesignState = None,
                  rng: np.random.Generator = None) -> DesignState:
    """Add the condition giving the lowest objective until the design has ``size`` conditions.

    Without a start, a random non-degenerate design of max(P, 2) conditions is drawn first.
    """
    _check_size(space, size)
    if start is None:
        start = greedy_seed(space, min(max(space.P, 2), size), rng)
    selected, tracked, trace = list(start.selected), start.tracked, list(start.trace)
    value = start.value
    while len(selected) < size:
        available = space.available(selected)
        best = None
        for k in range(space.J):
            if available[k] <= 0:
                continue
            candidate = space._added(tracked, selected, k)
            try:
                candidate_value = space.objective(candidate)
            except DegenerateDesignError:
                continue
            if best is None or candidate_value < best[0]:
                best = (candidate_value, k, candidate)
        if best is None:
            raise DegenerateDesignError("Every candidate addition gives a degenerate design")
        value, k, tracked = best
        selected.append(k)
        trace.append(value)
    logger.info(f"Greedy search reached {size} condition(s): {value:.6g}")
    return DesignState(selected=selected, value=value, trace=trace, tracked=tracked)


def greedy_seed(space: DesignSpace, size: int, rng: np.random.Generator = None) -> DesignState:
    """Random non-degenerate design of ``size`` conditions."""
    rng = rng if rng is not None else np.random.Generator(np.random.Philox())
    error = None
    for _ in range(SEED_RETRIES):
        try:
            return space.state(space.random_design(size, rng))
        except (DegenerateDesignError, SingularMatrixError) as degenerate:
            error = degenerate
    raise DegenerateDesignError(f"No non-degenerate starting design of {size} conditions in {SEED_RETRIES} draws",
                                columns=getattr(error, 'columns', None))


def reverse_greedy(space: DesignSpace, size: int, start: DesignState = None) -> DesignState:
    """Remove the condition whose removal gives the lowest objective until ``size`` conditions remain."""
    _check_size(space, size)
    start = start or space.state(space.full_design())
    selected, tracked, value, trace = list(start.selected), start.tracked, start.value, list(start.trace)
    while len(selected) > size:
        best = None
        for index in range(len(selected)):
            if index and selected[index] == selected[index - 1]:
                continue
            candidate = space._removed(tracked, selected, index)
            try:
                candidate_value = space.objective(candidate)
            except DegenerateDesignError:
                continue
            if best is None or candidate_value < best[0]:
                best = (candidate_value, index, candidate)
        if best is None:
            raise DegenerateDesignError("Every removal gives a degenerate design")
        value, index, tracked = best
        selected.pop(index)
        trace.append(value)
    logger.info(f"Reverse greedy search reached {size} condition(s): {value:.6g}")
    return DesignState(selected=selected, value=value, trace=trace, tracked=tracked)


def _check_size(space: DesignSpace, size: int):
    if not 1 <= size <= space.n_instances:
        raise DesignSizeError(f"Design size {size} must lie between 1 and the {space.n_instances} available "
                              f"conditions.")


def run_algorithms(space: DesignSpace, size: int, algo, rng: np.random.Generator = None) -> DesignState:
    """Run a chain of searches, each starting from the previous result, e.g. ``[3, 1]``."""
    algo = [algo] if np.ndim(algo) == 0 else list(algo)
    for code in algo:
        if code not in ALGORITHMS:
            raise ConfigError(f"Unknown search algorithm {code}; choose from {ALGORITHMS}.")
    _check_size(space, size)
    rng = rng if rng is not None else np.random.Generator(np.random.Philox())
    state = None
    for code in algo:
        if code == 1:
            state = local_search(space, state if state is not None and state.size == size
                                 else greedy_seed(space, size, rng))
        elif code == 2:
            state = greedy_search(space, size, state if state is not None and state.size < size else None, rng)
        else:
            state = reverse_greedy(space, size, state if state is not None and state.size > size else None)
    return state


def _run_seeded(space: DesignSpace, size: int, algo, seed) -> DesignState:
    return run_algorithms(space, size, algo, np.random.Generator(np.random.Philox(seed)))


@dataclass
class DesignResult:
    selected: list
    value: float
    trace: list
    restart_values: list
    algo: list
    variances: list
    rows: list

    def to_dict(self) -> dict:
        return {'selected': self.selected, 'value': self.value, 'trace': self.trace,
                'restart_values': self.restart_values, 'algo': self.algo, 'variances': self.variances,
                'rows': self.rows}


def optimal_design(space: DesignSpace, size: int, algo=(1,), restarts: int = DEFAULT_RESTARTS,
                   seed: int = None, threads: int = 1) -> DesignResult:
    """Best design over restarts of a search chain.

    Chains that start from a random design are restarted ``restarts`` times with independent streams spawned from
    ``seed``; a chain starting with the reverse greedy search is deterministic and runs once.

    :param threads: worker processes for the restarts
    """
    algo = [algo] if np.ndim(algo) == 0 else [int(code) for code in algo]
    runs = 1 if algo[0] == 3 else max(1, int(restarts))
    seeds = np.random.SeedSequence(seed).spawn(runs)
    if threads > 1 and runs > 1:
        with multiprocessing.Pool(min(threads, runs)) as pool:
            states = pool.map(partial(_run_seeded, space, size, algo), seeds)
    else:
        states = [_run_seeded(space, size, algo, s) for s in seeds]
    values = [state.value for state in states]
    best = states[int(np.argmin(values))]
    selected = sorted(best.selected)
    labels = []
    counts = np.bincount(np.asarray(selected, dtype=int), minlength=space.J)
    for k in np.flatnonzero(counts):
        labels.extend(space.members[k][:counts[k]])
    rows = sorted(int(r) for label in labels for r in space.label_rows[_plain(label)])
    return DesignResult(selected=[_plain(label) for label in labels], value=float(best.value),
                        trace=[float(v) for v in best.trace], restart_values=[float(v) for v in values], algo=algo,
                        variances=[float(v) for v in space.variances(best.tracked)], rows=rows)


def trace_report(result: DesignResult) -> str:
    table = prettytable.PrettyTable(['Step', 'Objective'])
    for step, value in enumerate(result.trace):
        table.add_row([step, f"{value:.7g}"])
    return table.get_string()


def _plain(value):
    return value.item() if isinstance(value, np.generic) else value
