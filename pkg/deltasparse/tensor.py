"""
Dense float32 matrices, the causal mask and the exact attention oracle.

Every approximation in the package is validated against
:func:`dense_attention`. All functions here are pure.
"""
from logging import getLogger
from typing import Optional

import numpy as np

from deltasparse.exceptions import ContractError, ShapeError

logger = getLogger(__name__)

# Working precision of every matrix in the package.
SCALAR = np.float32

# A 2-D, C-contiguous, float32 numpy array.
DenseMatrix = np.ndarray


def as_matrix(data, check_finite: bool = True) -> DenseMatrix:
    """
    Convert array-like data to a DenseMatrix.

    Parameters
    ----------
    data: array-like
        Nested sequences or an ndarray with two dimensions.
    check_finite: bool, optional (default=True)
        If True, reject NaN and Inf entries.

    Returns
    -------
    DenseMatrix
        A C-contiguous float32 array.
    """
    matrix = np.ascontiguousarray(data, dtype=SCALAR)
    if matrix.ndim != 2:
        raise ShapeError(
            "A matrix must have 2 dimensions but {} were given.".format(
                matrix.ndim))

    if check_finite and not np.isfinite(matrix).all():
        raise ContractError("The matrix contains NaN or Inf entries.")

    return matrix


def as_vector(data, length: Optional[int] = None) -> np.ndarray:
    """
    Convert array-like data to a 1-D float32 vector.

    Parameters
    ----------
    data: array-like
        The vector elements.
    length: int, optional
        If given, the required number of elements.
    """
    vector = np.ascontiguousarray(data, dtype=SCALAR)
    if vector.ndim != 1:
        raise ShapeError(
            "A vector must have 1 dimension but {} were given.".format(
                vector.ndim))

    if length is not None and vector.shape[0] != length:
        raise ShapeError(
            "The vector length {} does not match {}.".format(
                vector.shape[0], length))

    if not np.isfinite(vector).all():
        raise ContractError("The vector contains NaN or Inf entries.")

    return vector


class CausalMask(object):
    """
    The lower-triangular attention mask of a sequence.

    Attributes
    ----------
    n: int
        The sequence length.

    Note
    ----
    Entry (i, j) is active if and only if j <= i.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ShapeError("The mask length must be positive.")

        self.n = int(n)

    def is_active(self, i: int, j: int) -> bool:
        return j <= i

    def as_array(self) -> np.ndarray:
        """
        Get the mask as a boolean (n, n) array, True where active.
        """
        return np.tri(self.n, dtype=bool)

    def __eq__(self, other) -> bool:
        return isinstance(other, CausalMask) and other.n == self.n

    def __repr__(self) -> str:
        return "CausalMask({})".format(self.n)


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """
    Multiply two matrices.

    Parameters
    ----------
    a: DenseMatrix
        Left operand of shape (m, k).
    b: DenseMatrix
        Right operand of shape (k, n).

    Returns
    -------
    DenseMatrix
        The (m, n) product.

    Note
    ----
    Each output element is accumulated over the inner index in
    ascending order with float32 multiply and add, so an entry has the
    same bits whether it is computed in a full product or in any
    sub-block of it.
    """
    a = as_matrix(a, check_finite=False)
    b = as_matrix(b, check_finite=False)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            "Cannot multiply a {} matrix by a {} matrix.".format(
                a.shape, b.shape))

    inner = a.shape[1]
    if inner == 0:
        return np.zeros((a.shape[0], b.shape[1]), dtype=SCALAR)

    out = a[:, 0:1] * b[0:1, :]
    for k in range(1, inner):
        out += a[:, k:k + 1] * b[k:k + 1, :]

    return np.ascontiguousarray(out)


def row_softmax(
        scores: DenseMatrix,
        mask: Optional[CausalMask] = None) -> DenseMatrix:
    """
    Row-wise softmax with optional causal masking.

    Parameters
    ----------
    scores: DenseMatrix
        Scaled attention scores. Masked entries may hold any value.
    mask: CausalMask, optional
        If given, entries above the diagonal are excluded.

    Returns
    -------
    DenseMatrix
        Probabilities; masked entries are exactly 0 and every row
        sums to 1.
    """
    scores = np.asarray(scores, dtype=SCALAR)
    if scores.ndim != 2:
        raise ShapeError("Scores must be a 2-D matrix.")

    if mask is None:
        active = np.ones(scores.shape, dtype=bool)
    else:
        if scores.shape != (mask.n, mask.n):
            raise ShapeError(
                "Scores of shape {} do not match {}.".format(
                    scores.shape, mask))

        active = mask.as_array()

    if not active.any(axis=1).all():
        raise ContractError("A fully masked row cannot be normalized.")

    if not np.isfinite(scores[active]).all():
        raise ContractError("Unmasked scores must be finite.")

    masked = np.where(active, scores, SCALAR(-np.inf))
    row_max = masked.max(axis=1, keepdims=True)
    weights = np.where(active, np.exp(masked - row_max), SCALAR(0.0))
    return np.ascontiguousarray(
        weights / weights.sum(axis=1, keepdims=True), dtype=SCALAR)


def attention_scale(d_head: int) -> np.float32:
    """
    The score scaling factor 1/sqrt(d_head) in working precision.
    """
    return SCALAR(1.0 / np.sqrt(float(d_head)))


def dense_scores(q: DenseMatrix, k: DenseMatrix) -> DenseMatrix:
    """
    Exact pre-scaling scores q · kᵀ.
    """
    q = as_matrix(q)
    k = as_matrix(k)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(
            "Query width {} does not match key width {}.".format(
                q.shape[1], k.shape[1]))

    return matmul(q, k.T)


def dense_attention(
        q: DenseMatrix,
        k: DenseMatrix,
        v: DenseMatrix,
        causal: bool = True) -> DenseMatrix:
    """
    Exact scaled-dot-product attention.

    Parameters
    ----------
    q, k, v: DenseMatrix
        Queries (m, d_head), keys (n, d_head) and values (n, d_v).
    causal: bool, optional (default=True)
        Apply the causal mask. Requires m == n.

    Returns
    -------
    DenseMatrix
        softmax(q·kᵀ / sqrt(d_head), mask) · v
    """
    q = as_matrix(q)
    k = as_matrix(k)
    v = as_matrix(v)
    if k.shape[0] != v.shape[0]:
        raise ShapeError(
            "Key count {} does not match value count {}.".format(
                k.shape[0], v.shape[0]))

    scores = dense_scores(q, k) * attention_scale(q.shape[1])
    mask = None
    if causal:
        if q.shape[0] != k.shape[0]:
            raise ShapeError(
                "Causal attention needs as many queries as keys.")

        mask = CausalMask(q.shape[0])

    return matmul(row_softmax(scores, mask), v)


def dense_single_query(
        q_row: np.ndarray,
        k: DenseMatrix,
        v: DenseMatrix) -> np.ndarray:
    """
    Exact attention of one query over all given keys (no mask).
    """
    q_row = as_vector(q_row)
    return dense_attention(q_row[np.newaxis, :], k, v, causal=False)[0]
