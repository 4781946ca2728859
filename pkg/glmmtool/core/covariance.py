"""Random-effect structure: the matrices Z and D(theta), the Cholesky factor L and the Gaussian log-density of u."""
import logging
import math
from typing import Union

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse

from glmmtool.core import sparse
from glmmtool.core.covariance_functions import check_parameters, get_function
from glmmtool.core.formula import ModelFormula, CovarianceBlockProgram, compile_term, parse_formula
from glmmtool.core.sparse import FactorGroup, group_by_size
from glmmtool.exceptions import CovarianceError, SingularMatrixError, ParameterError

logger = logging.getLogger(__name__)

# Entries of compactly supported kernels below this are structural zeros.
COMPACT_ZERO = 1e-14


class BlockGroup:
    """Blocks of one term sharing the same order ``s``; ``effects`` and ``columns`` are k x s."""

    def __init__(self, term: int, block_ids: list, effects: np.ndarray, offset: int):
        self.term = term
        self.block_ids = block_ids
        self.effects = effects
        self.columns = effects + offset

    @property
    def size(self) -> int:
        return self.effects.shape[1]


class Covariance:
    """Random-effect covariance of a model, bound to a data table.

    Blocks are formed per additive term and subdivided by the levels of its ``gr`` variables. Effects within a term
    are ordered by group, then by the remaining variables.

    :param formula: formula text or parsed formula; only its random-effect terms are used
    :param data: data table
    :param theta: covariance parameters, ordered by term then by function as written
    :param sparse: factorise D by connected components of its sparsity graph (default) rather than by declared
        blocks
    :param effective_range: scaling applied to compactly supported functions, either one value for all terms or a
        mapping from term index to value
    """
    formula: ModelFormula
    terms: list[CovarianceBlockProgram]
    groups: list[BlockGroup]
    Z: scipy.sparse.csr_matrix

    def __init__(self, formula: Union[str, ModelFormula], data: pd.DataFrame, theta=None, sparse: bool = True,
                 effective_range: Union[float, dict] = None):
        self.formula = parse_formula(formula) if isinstance(formula, str) else formula
        self.data = data
        self.sparse = sparse
        self.effective_range = effective_range

        self.terms = []
        offset = 0
        for index, term in enumerate(self.formula.random):
            r = effective_range.get(index) if isinstance(effective_range, dict) else effective_range
            compiled = compile_term(term, data, param_offset=offset, effective_range=r)
            self.terms.append(compiled)
            offset += compiled.n_params

        self.column_offsets = np.cumsum([0] + [term.n_effects for term in self.terms])
        self.groups = []
        self.n_blocks = 0
        for index, term in enumerate(self.terms):
            blocks = term.blocks()
            for size, positions in sorted(group_by_size(blocks).items()):
                effects = np.stack([blocks[p] for p in positions])
                ids = [self.n_blocks + p for p in positions]
                self.groups.append(BlockGroup(index, ids, effects, self.column_offsets[index]))
            self.n_blocks += len(blocks)

        self.Z = self._build_Z()
        self.version = 0
        self._cache = {}
        self._theta = np.zeros(0) if self.n_theta == 0 else None
        if theta is not None:
            self.update_parameters(theta)

    @property
    def Q(self) -> int:
        return int(self.column_offsets[-1])

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def n_theta(self) -> int:
        return sum(term.n_params for term in self.terms)

    @property
    def theta(self) -> np.ndarray:
        assert self._theta is not None, "Covariance parameters are not set. Call update_parameters() first."
        return self._theta.copy()

    @property
    def bounds(self) -> list:
        return [bound for term in self.terms for bound in term.bounds]

    @property
    def parameter_labels(self) -> list:
        labels = []
        for term in self.terms:
            for call in term.term.functions:
                labels.extend(f"{call}[{k + 1}]" for k in range(get_function(call.name).n_params))
        return labels

    def update_parameters(self, theta):
        """Set theta; cached matrices are rebuilt lazily."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if len(theta) != self.n_theta:
            raise ParameterError(f"Covariance formula {self.formula} needs {self.n_theta} parameter(s), "
                                 f"got {len(theta)}.")
        check_parameters(theta, self.bounds, self.parameter_labels)
        self._theta = theta
        self.version += 1
        self._cache = {}

    def _resolve(self, theta):
        if theta is None:
            return self.theta, True
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        check_parameters(theta, self.bounds, self.parameter_labels)
        return theta, False

    def _cached(self, key, theta, compute):
        theta, current = self._resolve(theta)
        if not current:
            return compute(theta)
        if key not in self._cache:
            logger.debug(f"Rebuilding {key} for parameter version {self.version}")
            self._cache[key] = compute(theta)
        return self._cache[key]

    def _build_Z(self) -> scipy.sparse.csr_matrix:
        rows, cols, values = [], [], []
        for index, term in enumerate(self.terms):
            rows.append(np.arange(self.n))
            cols.append(term.row_index + self.column_offsets[index])
            values.append(term.slope)
        if not rows:
            return scipy.sparse.csr_matrix((self.n, 0))
        Z = scipy.sparse.coo_matrix((np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
                                    shape=(self.n, self.Q))
        return sparse.to_crs(Z)

    def build_Z(self) -> scipy.sparse.csr_matrix:
        return self.Z

    def _locate(self, block: int):
        for group in self.groups:
            if block in group.block_ids:
                return group, group.block_ids.index(block)
        raise IndexError(f"Block {block} out of range; the structure has {self.n_blocks} blocks.")

    def eval_D_entry(self, block: int, a: int, b: int, theta=None) -> float:
        """Entry (a, b) of block ``block`` of D, positions counted within the block."""
        theta, _ = self._resolve(theta)
        group, k = self._locate(block)
        term = self.terms[group.term]
        return float(term.evaluate(theta, group.effects[k, a], group.effects[k, b])[0])

    def _group_blocks(self, group: BlockGroup, theta) -> np.ndarray:
        term = self.terms[group.term]
        k, size = group.effects.shape
        lower_a, lower_b = np.tril_indices(size)
        values = term.evaluate(theta, group.effects[:, lower_a].ravel(), group.effects[:, lower_b].ravel())
        values = values.reshape(k, len(lower_a))
        if not np.all(np.isfinite(values)):
            block, position = np.argwhere(~np.isfinite(values))[0]
            raise CovarianceError(f"Non-finite covariance at positions ({lower_a[position]}, {lower_b[position]}) "
                                  f"of term {term.term}", group.block_ids[block], float(values[block, position]))
        if term.compact:
            values[np.abs(values) < COMPACT_ZERO] = 0.0
        blocks = np.zeros((k, size, size))
        blocks[:, lower_a, lower_b] = values
        blocks[:, lower_b, lower_a] = values
        return blocks

    def block_matrices(self, theta=None) -> list:
        """Dense blocks of D as ``(columns k x s, blocks k x s x s)`` per block group."""
        return self._cached('blocks', theta,
                            lambda t: [(group.columns, self._group_blocks(group, t)) for group in self.groups])

    def build_D(self, theta=None) -> scipy.sparse.csr_matrix:
        return self._cached('D', theta, lambda t: sparse.assemble(self.block_matrices(t), self.Q))

    def factors(self, theta=None) -> list:
        """Cholesky factorisation of D as a list of :class:`~glmmtool.core.sparse.FactorGroup` and
        :class:`~glmmtool.core.sparse.BandedFactor`."""
        def compute(t):
            if self.sparse:
                return sparse.sparse_cholesky(self.build_D(t))
            return [FactorGroup(columns=group.columns,
                                factor=sparse.batched_cholesky(blocks, group.block_ids),
                                block_ids=tuple(group.block_ids))
                    for group, (_, blocks) in zip(self.groups, self.block_matrices(t))]
        return self._cached('factors', theta, compute)

    def cholesky(self, theta=None) -> scipy.sparse.csr_matrix:
        """L with L L^T = D in CRS form, lower triangular within the ordering of each factorised component."""
        return self._cached('L', theta, lambda t: sparse.factor_matrix(self.factors(t), self.Q))

    def ZL(self, theta=None) -> scipy.sparse.csr_matrix:
        return self._cached('ZL', theta, lambda t: sparse.to_crs(self.Z @ self.cholesky(t)))

    def log_determinant(self, theta=None) -> float:
        return sparse.log_determinant(self.factors(theta))

    def mvn_loglik(self, u, theta=None):
        """Log-density of u ~ N(0, D(theta)), evaluated block by block.

        :param u: Q-vector, or Q x m matrix of draws (one value returned per column)
        """
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.Q:
            raise ValueError(f"Random effects have {u.shape[0]} rows, expected Q={self.Q}.")
        factors = self.factors(theta)
        z = sparse.forward_solve(factors, u)
        half_log_det = 0.5 * sparse.log_determinant(factors)
        return -0.5 * self.Q * math.log(2 * math.pi) - half_log_det - 0.5 * np.sum(z ** 2, axis=0)

    def simulate_re(self, rng: np.random.Generator, size: int = None) -> np.ndarray:
        """Draw u = L v with v ~ N(0, I); ``size`` draws as columns when given."""
        shape = (self.Q,) if size is None else (self.Q, size)
        return self.cholesky() @ rng.standard_normal(shape)

    def marginal(self) -> scipy.sparse.csr_matrix:
        """Z D Z^T."""
        return sparse.to_crs(self.Z @ self.build_D() @ self.Z.T)

    def subset(self, rows) -> 'Covariance':
        """The same structure restricted to ``rows`` of the data."""
        covariance = Covariance(self.formula, self.data.iloc[rows].reset_index(drop=True), sparse=self.sparse,
                                effective_range=self.effective_range)
        if self._theta is not None:
            covariance.update_parameters(self._theta)
        return covariance

    def new_effects(self, newdata: pd.DataFrame, theta=None):
        """Covariances linking the random effects of new rows with the current effects.

        :return: ``(Z_new, D_11, D_10)``: D_11 covariance among new effects, D_10 covariance with current effects
        """
        theta, _ = self._resolve(theta)
        rows, cols, values = [], [], []
        new_blocks, cross_blocks = [], []
        offset = 0
        for term in self.terms:
            encoded = term.encode(newdata)
            combos, row_index = np.unique(encoded, axis=0, return_inverse=True)
            row_index = np.asarray(row_index).reshape(-1)
            slope = newdata[term.term.slope].to_numpy(dtype=float) if term.term.slope else np.ones(len(newdata))
            rows.append(np.arange(len(newdata)))
            cols.append(row_index + offset)
            values.append(slope)

            local = term.local_theta(theta)
            a, b = np.meshgrid(np.arange(len(combos)), np.arange(len(combos)), indexing='ij')
            new_blocks.append(term.program.evaluate(local, combos[a.ravel()], combos[b.ravel()])
                              .reshape(len(combos), len(combos)))
            a, b = np.meshgrid(np.arange(len(combos)), np.arange(term.n_effects), indexing='ij')
            cross_blocks.append(term.program.evaluate(local, combos[a.ravel()], term.values[b.ravel()])
                                .reshape(len(combos), term.n_effects))
            offset += len(combos)

        Z_new = sparse.to_crs(scipy.sparse.coo_matrix(
            (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))), shape=(len(newdata), offset)))
        return Z_new, scipy.linalg.block_diag(*new_blocks), scipy.linalg.block_diag(*cross_blocks)

    def conditional_effects(self, newdata: pd.DataFrame, U):
        """Distribution of the random effects at new rows given draws U (Q x m) of the current ones.

        :return: ``(Z_new, mean, covariance)`` with the conditional mean averaged over the columns of U
        """
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U[:, None]
        assert U.shape[1] > 0, "At least one sample of the random effects is needed."
        Z_new, D_11, D_10 = self.new_effects(newdata)
        try:
            factors = self.factors()
        except CovarianceError as error:
            raise SingularMatrixError(f"Covariance of the observed random effects is singular: {error}")
        projection = sparse.cholesky_solve(factors, D_10.T).T
        mean = projection @ U.mean(axis=1)
        covariance = D_11 - projection @ D_10.T
        return Z_new, mean, 0.5 * (covariance + covariance.T)

