"""Compressed-row storage helpers and Cholesky factorisation of sparse covariance matrices.

A matrix is split into the connected components of its graph. Small components of equal size are stacked and
factorised together as a :class:`FactorGroup` holding ``k`` dense blocks of size ``s``. Large components whose
bandwidth collapses under a reverse Cuthill-McKee ordering are factorised in banded storage as a
:class:`BandedFactor`, so a compactly supported covariance over one field never becomes a dense matrix.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph

from glmmtool.exceptions import CovarianceError

logger = logging.getLogger(__name__)

PD_TOLERANCE = 1e-12

# Components of at least this order are candidates for the banded factorisation.
BANDED_MIN_ORDER = 64

# Banded storage is used when the reordered bandwidth is at most this fraction of the component order.
BANDED_MAX_FRACTION = 0.25


@dataclass(frozen=True)
class FactorGroup:
    """``k`` diagonal blocks of order ``s``: ``columns`` (k x s) and their lower factors ``factor`` (k x s x s)."""
    columns: np.ndarray
    factor: np.ndarray
    block_ids: tuple = ()

    @property
    def log_diagonal(self) -> np.ndarray:
        return np.log(np.diagonal(self.factor, axis1=1, axis2=2))

    def solve_lower(self, rhs: np.ndarray) -> np.ndarray:
        """L^-1 rhs for ``rhs`` of shape (k, s, m)."""
        if self.factor.shape[1] == 1:
            return rhs / self.factor
        return np.stack([scipy.linalg.solve_triangular(factor, b, lower=True, check_finite=False)
                         for factor, b in zip(self.factor, rhs)])

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """(L L^T)^-1 rhs for ``rhs`` of shape (k, s, m)."""
        if self.factor.shape[1] == 1:
            return rhs / self.factor ** 2
        return np.stack([scipy.linalg.cho_solve((factor, True), b, check_finite=False)
                         for factor, b in zip(self.factor, rhs)])

    def lower(self, size: int) -> scipy.sparse.csr_matrix:
        return assemble([(self.columns, self.factor)], size)


@dataclass(frozen=True)
class BandedFactor:
    """Lower factor of one component in LAPACK lower banded storage.

    ``columns`` lists the component's indices in the bandwidth-reducing order, and ``band[i, j]`` holds
    ``L[j + i, j]`` in that order, so that ``L L^T`` equals the component with rows and columns in ``columns``
    order.
    """
    columns: np.ndarray
    band: np.ndarray
    block_id: int = None

    @property
    def bandwidth(self) -> int:
        return self.band.shape[0] - 1

    @property
    def log_diagonal(self) -> np.ndarray:
        return np.log(self.band[0])

    def solve_lower(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.solve_banded((self.bandwidth, 0), self.band, rhs, check_finite=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve_banded((self.band, True), rhs, check_finite=False)

    def lower(self, size: int) -> scipy.sparse.csr_matrix:
        s = len(self.columns)
        local = scipy.sparse.dia_matrix((self.band, -np.arange(self.bandwidth + 1)), shape=(s, s)).tocoo()
        matrix = scipy.sparse.coo_matrix((local.data, (self.columns[local.row], self.columns[local.col])),
                                         shape=(size, size))
        return to_crs(matrix)


def to_crs(matrix, drop_below: float = 0.0) -> scipy.sparse.csr_matrix:
    """Canonical CRS form: sorted column indices, no duplicates, no stored zeros.

    :param matrix: dense or sparse matrix
    :param drop_below: entries with absolute value below this are removed as structural zeros
    """
    crs = scipy.sparse.csr_matrix(matrix, dtype=float)
    crs.sum_duplicates()
    if drop_below > 0:
        crs.data[np.abs(crs.data) < drop_below] = 0.0
    crs.eliminate_zeros()
    crs.sort_indices()
    return crs


def dense_cholesky(block: np.ndarray, block_index: int = None, tolerance: float = PD_TOLERANCE) -> np.ndarray:
    """Lower Cholesky factor of a dense symmetric block.

    Fails with :class:`CovarianceError` carrying the block index and the offending pivot when a pivot falls below
    ``tolerance`` times the largest diagonal entry.
    """
    block = np.asarray(block, dtype=float)
    if block.size == 0:
        return block.copy()
    if not np.all(np.isfinite(block)):
        raise CovarianceError("Covariance block contains non-finite entries", block_index, np.nan)

    factor, info = scipy.linalg.lapack.dpotrf(block, lower=1, clean=1)
    if info > 0:
        k = info - 1
        pivot = block[k, k] - np.sum(factor[k, :k] ** 2)
        raise CovarianceError(f"Covariance block is not positive definite at order {info}", block_index, pivot)
    assert info == 0, f"Illegal argument {-info} in Cholesky factorisation."

    pivots = np.diag(factor) ** 2
    threshold = tolerance * max(np.max(np.diag(block)), 0.0)
    if np.min(pivots) <= threshold:
        k = int(np.argmin(pivots))
        raise CovarianceError(f"Covariance block is numerically singular at order {k + 1}", block_index,
                              float(pivots[k]))
    return np.tril(factor)


def batched_cholesky(blocks: np.ndarray, block_ids, tolerance: float = PD_TOLERANCE) -> np.ndarray:
    """Factor a stack (k x s x s) of symmetric blocks, reporting the first failing block by its id."""
    try:
        factor = np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError as error:
        for block, block_id in zip(blocks, block_ids):
            dense_cholesky(block, block_id, tolerance)
        raise CovarianceError(f"Batched Cholesky factorisation failed ({error})", None, np.nan)
    pivots = np.diagonal(factor, axis1=1, axis2=2) ** 2
    thresholds = tolerance * np.max(np.diagonal(blocks, axis1=1, axis2=2), axis=1)
    failing = np.flatnonzero(~np.all(pivots > thresholds[:, None], axis=1))
    if len(failing):
        k = failing[0]
        order = int(np.argmin(pivots[k]))
        raise CovarianceError(f"Covariance block is numerically singular at order {order + 1}", block_ids[k],
                              float(pivots[k, order]))
    return factor


def banded_cholesky(component: scipy.sparse.csr_matrix, columns: np.ndarray, block_id: int = None,
                    tolerance: float = PD_TOLERANCE) -> BandedFactor:
    """Factor one component already permuted into ``columns`` order."""
    coo = component.tocoo()
    lower = coo.row >= coo.col
    offsets = coo.row[lower] - coo.col[lower]
    band = np.zeros((offsets.max() + 1, component.shape[0]))
    band[offsets, coo.col[lower]] = coo.data[lower]
    if not np.all(np.isfinite(band)):
        raise CovarianceError("Covariance block contains non-finite entries", block_id, np.nan)
    try:
        factor = scipy.linalg.cholesky_banded(band, lower=True, check_finite=False)
    except np.linalg.LinAlgError as error:
        raise CovarianceError(f"Covariance block is not positive definite ({error})", block_id, np.nan)
    pivots = factor[0] ** 2
    threshold = tolerance * np.max(band[0])
    if np.min(pivots) <= threshold:
        k = int(np.argmin(pivots))
        raise CovarianceError(f"Covariance block is numerically singular at order {k + 1}", block_id,
                              float(pivots[k]))
    return BandedFactor(columns=columns, band=factor, block_id=block_id)


def group_by_size(index_sets: list) -> dict:
    """Positions of ``index_sets`` grouped by their length."""
    groups = defaultdict(list)
    for position, indices in enumerate(index_sets):
        groups[len(indices)].append(position)
    return groups


def connected_blocks(matrix: scipy.sparse.spmatrix) -> list:
    """Index sets of the connected components of a symmetric sparse matrix's graph, each sorted ascending."""
    n_components, labels = scipy.sparse.csgraph.connected_components(matrix, directed=False)
    order = np.argsort(labels, kind='stable')
    boundaries = np.flatnonzero(np.diff(labels[order])) + 1
    blocks = np.split(order, boundaries)
    blocks.sort(key=lambda indices: indices[0])
    return blocks


def gather_blocks(matrix: scipy.sparse.spmatrix, columns: np.ndarray) -> np.ndarray:
    """Dense stack of the diagonal blocks of ``matrix`` indexed by the rows of ``columns`` (k x s).

    Every stored entry must lie inside one of the blocks or outside all of them, as for connected components.
    """
    k, s = columns.shape
    coo = to_crs(matrix).tocoo()
    slot = np.full(matrix.shape[0], -1)
    slot[columns.ravel()] = np.repeat(np.arange(k), s)
    local = np.zeros(matrix.shape[0], dtype=int)
    local[columns.ravel()] = np.tile(np.arange(s), k)
    keep = slot[coo.row] >= 0
    blocks = np.zeros((k, s, s))
    blocks[slot[coo.row[keep]], local[coo.row[keep]], local[coo.col[keep]]] = coo.data[keep]
    return blocks


def _banded_order(component: scipy.sparse.csr_matrix):
    """Reverse Cuthill-McKee order of a component and its bandwidth in that order."""
    order = scipy.sparse.csgraph.reverse_cuthill_mckee(component, symmetric_mode=True)
    permuted = component[order][:, order].tocoo()
    return order, int(np.max(np.abs(permuted.row - permuted.col)))


def sparse_cholesky(matrix: scipy.sparse.spmatrix) -> list:
    """Factor a sparse symmetric matrix by the connected components of its graph.

    :return: list of :class:`FactorGroup` and :class:`BandedFactor`
    """
    matrix = to_crs(matrix)
    if matrix.shape[0] == 0:
        return []
    components = connected_blocks(matrix)
    factors, dense = [], []
    for position, indices in enumerate(components):
        if len(indices) >= BANDED_MIN_ORDER:
            component = matrix[indices][:, indices]
            order, bandwidth = _banded_order(component)
            if bandwidth <= BANDED_MAX_FRACTION * len(indices):
                factors.append(banded_cholesky(component[order][:, order], indices[order], position))
                continue
        dense.append(position)

    for size, positions in sorted(group_by_size([components[p] for p in dense]).items()):
        positions = [dense[p] for p in positions]
        columns = np.stack([components[p] for p in positions])
        factor = batched_cholesky(gather_blocks(matrix, columns), positions)
        factors.append(FactorGroup(columns=columns, factor=factor, block_ids=tuple(positions)))
    logger.debug(f"Sparse Cholesky over {len(components)} components: "
                 f"{len(components) - len(dense)} banded, {len(dense)} dense")
    return factors


def assemble(groups: list, size: int, drop_below: float = 0.0) -> scipy.sparse.csr_matrix:
    """Place stacked blocks ``(columns k x s, values k x s x s)`` into a ``size x size`` CRS matrix."""
    rows, cols, values = [], [], []
    for columns, block in groups:
        k, s = columns.shape
        rows.append(np.broadcast_to(columns[:, :, None], (k, s, s)).ravel())
        cols.append(np.broadcast_to(columns[:, None, :], (k, s, s)).ravel())
        values.append(np.asarray(block).ravel())
    if not rows:
        return scipy.sparse.csr_matrix((size, size))
    matrix = scipy.sparse.coo_matrix((np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
                                     shape=(size, size))
    return to_crs(matrix, drop_below=drop_below)


def factor_matrix(factors: list, size: int) -> scipy.sparse.csr_matrix:
    """L with L L^T equal to the factorised matrix; lower triangular within each component's ordering."""
    matrix = scipy.sparse.csr_matrix((size, size))
    for factor in factors:
        matrix = matrix + factor.lower(size)
    return to_crs(matrix)


def _apply(factors: list, u: np.ndarray, method: str) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        return _apply(factors, u[:, None], method)[:, 0]
    out = np.empty_like(u)
    for factor in factors:
        out[factor.columns] = getattr(factor, method)(u[factor.columns])
    return out


def forward_solve(factors: list, u: np.ndarray) -> np.ndarray:
    """Solve L z = u factor by factor; ``u`` may be a vector or hold draws as columns."""
    return _apply(factors, u, 'solve_lower')


def cholesky_solve(factors: list, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b."""
    return _apply(factors, b, 'solve')


def log_determinant(factors: list) -> float:
    return float(2 * sum(np.sum(factor.log_diagonal) for factor in factors))


def write_matrix_market(path: str, matrix, comment: str = ''):
    logger.debug(f"Writing {matrix.shape[0]}x{matrix.shape[1]} matrix to {path}")
    if scipy.sparse.issparse(matrix):
        matrix = to_crs(matrix)
    scipy.io.mmwrite(path, matrix, comment=comment)
