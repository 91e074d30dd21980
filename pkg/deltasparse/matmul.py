"""
Regular-delta score computation.

Scores against a delta-encoded key sequence are built one key position
at a time: position 0 is the exact product with the basis, and every
later position adds the product with its sparse delta column to the
previous one. Zero delta elements are skipped and counted.
"""
from __future__ import annotations
from enum import IntEnum
from logging import getLogger
from typing import Optional, Sequence

import numpy as np

from deltasparse.encoding import DeltaEncoding
from deltasparse.exceptions import BoundsError, ShapeError
from deltasparse.tensor import SCALAR, DenseMatrix, as_matrix, as_vector

logger = getLogger(__name__)


class Exactness(IntEnum):
    """
    How a score entry was obtained. The integer values are the codes
    written to exactness heatmaps.
    """

    MASKED = 0
    APPROXIMATE = 1
    FULL = 2


class MacCounter(object):
    """
    Multiply-accumulate bookkeeping.

    Attributes
    ----------
    mac: int
        Multiply-accumulates performed, basis products included.
    skipped: int
        Multiply-accumulates avoided because a delta element was zero.
    basis: int
        The part of `mac` spent on dense basis products.
    exact: int
        The part of `mac` spent on exact products outside the delta
        recursion, such as jigsaw blocks and the decode ring.

    Note
    ----
    mac + skipped is the dense-equivalent count of the covered region.
    """

    def __init__(
            self,
            mac: int = 0,
            skipped: int = 0,
            basis: int = 0,
            exact: int = 0):
        self.mac = int(mac)
        self.skipped = int(skipped)
        self.basis = int(basis)
        self.exact = int(exact)

    @property
    def dense_equivalent(self) -> int:
        return self.mac + self.skipped

    @property
    def skipped_fraction(self) -> float:
        """
        Skipped work over all covered work.
        """
        total = self.mac + self.skipped
        return self.skipped / total if total else 0.0

    @property
    def delta_skipped_fraction(self) -> float:
        """
        Skipped work over the work of the delta columns only, basis
        and exact products excluded; equals the element sparsity of
        the encoding when every query row visits every column.
        """
        total = self.mac - self.basis - self.exact + self.skipped
        return self.skipped / total if total else 0.0

    def add_exact(self, count: int) -> None:
        """
        Count dense multiply-accumulates outside the delta path.
        """
        self.mac += int(count)
        self.exact += int(count)

    def merge(self, other: MacCounter) -> MacCounter:
        """
        Add the counts of another counter into this one.
        """
        self.mac += other.mac
        self.skipped += other.skipped
        self.basis += other.basis
        self.exact += other.exact
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, MacCounter):
            return NotImplemented

        return (self.mac, self.skipped, self.basis, self.exact) == \
            (other.mac, other.skipped, other.basis, other.exact)

    def __repr__(self) -> str:
        return "MacCounter(mac={}, skipped={}, basis={}, exact={})".format(
            self.mac, self.skipped, self.basis, self.exact)


class ScoreMatrix(object):
    """
    Pre-softmax scores with a per-entry exactness map.

    Attributes
    ----------
    scores: DenseMatrix
        Scores of shape (n_query, n_key), before scaling.
    exactness: np.ndarray
        int8 array of Exactness codes with the same shape.
    scale: float
        The factor applied by `scaled()`, 1/sqrt(d_head).
    """

    def __init__(
            self,
            scores: DenseMatrix,
            exactness: np.ndarray,
            scale: float = 1.0):
        if scores.shape != exactness.shape:
            raise ShapeError(
                "The exactness map {} does not match scores {}.".format(
                    exactness.shape, scores.shape))

        self.scores = scores
        self.exactness = np.asarray(exactness, dtype=np.int8)
        self.scale = SCALAR(scale)

    @property
    def shape(self):
        return self.scores.shape

    def scaled(self) -> DenseMatrix:
        """
        The scores multiplied by the scale factor.
        """
        return self.scores * self.scale

    def mask(self, code: Exactness) -> np.ndarray:
        """
        Boolean map of entries with the given exactness.
        """
        return self.exactness == int(code)

    def transpose(self) -> ScoreMatrix:
        return ScoreMatrix(
            np.ascontiguousarray(self.scores.T),
            np.ascontiguousarray(self.exactness.T),
            self.scale)


def _basis_products(
        q: DenseMatrix,
        basis: np.ndarray) -> np.ndarray:
    # Same ascending accumulation as tensor.matmul.
    acc = q[:, 0] * basis[0]
    for e in range(1, basis.shape[0]):
        acc = acc + q[:, e] * basis[e]

    return acc


def _accumulate(
        q: DenseMatrix,
        enc: DeltaEncoding,
        counter: MacCounter,
        row_start: np.ndarray,
        upto: int) -> np.ndarray:
    """
    Run the recursion over key steps 0..upto for query rows
    row_start[t]..n_query-1 at step t.

    row_start must be nondecreasing: a row leaves the recursion once it
    needs no further columns.
    """
    n_query, d_head = q.shape
    scores = np.zeros((n_query, upto + 1), dtype=SCALAR)

    lo = int(row_start[0])
    acc = np.zeros(n_query, dtype=SCALAR)
    acc[lo:] = _basis_products(q[lo:], enc.basis)
    scores[lo:, 0] = acc[lo:]
    active = n_query - lo
    counter.mac += active * d_head
    counter.basis += active * d_head

    for t in range(1, upto + 1):
        lo = int(row_start[t])
        if lo >= n_query:
            break

        column = enc.columns[t - 1]
        active = n_query - lo
        if column.nnz > 0:
            indices = column.indices
            values = column.values32
            partial = q[lo:, indices[0]] * values[0]
            for e in range(1, column.nnz):
                partial = partial + q[lo:, indices[e]] * values[e]

            acc[lo:] = acc[lo:] + partial

        scores[lo:, t] = acc[lo:]
        counter.mac += active * column.nnz
        counter.skipped += active * (d_head - column.nnz)

    return scores


def delta_score_columns(
        q: DenseMatrix,
        enc: DeltaEncoding,
        counter: Optional[MacCounter] = None,
        row_start: Optional[Sequence[int]] = None) -> ScoreMatrix:
    """
    Compute q · âᵀ for every encoded position by the delta recursion.

    Parameters
    ----------
    q: DenseMatrix
        Query rows, shape (n_query, d_head).
    enc: DeltaEncoding
        The encoded key sequence.
    counter: MacCounter, optional
        Incremented with n_query × d_head for the basis and
        n_query × nnz for every delta column.
    row_start: Sequence[int], optional
        Per encoding step, the first query row that still needs the
        recursion (nondecreasing). Rows above it are left as 0 and
        flagged MASKED. Defaults to all rows for all steps.

    Returns
    -------
    ScoreMatrix
        Scores of shape (n_query, n) in encoding-step order, not scaled.
        Column 0 is exact, the others approximate.
    """
    q = as_matrix(q)
    if q.shape[1] != enc.d_head:
        raise ShapeError(
            "Query width {} does not match encoding width {}.".format(
                q.shape[1], enc.d_head))

    if counter is None:
        counter = MacCounter()

    n_query = q.shape[0]
    if row_start is None:
        row_start = np.zeros(enc.n, dtype=np.intp)
    else:
        row_start = np.minimum(
            np.asarray(row_start, dtype=np.intp), n_query)
        if row_start.shape[0] != enc.n:
            raise ShapeError(
                "row_start needs one entry per encoded position.")

        if np.any(np.diff(row_start) < 0):
            raise ShapeError("row_start must be nondecreasing.")

    scores = _accumulate(q, enc, counter, row_start, enc.n - 1)
    rows = np.arange(n_query)[:, np.newaxis]
    exactness = np.where(
        rows >= row_start[np.newaxis, :],
        int(Exactness.APPROXIMATE), int(Exactness.MASKED)).astype(np.int8)
    exactness[rows[:, 0] >= row_start[0], 0] = int(Exactness.FULL)
    logger.debug("Delta scores {}x{}: {}".format(
        n_query, enc.n, counter))
    return ScoreMatrix(scores, exactness)


def delta_score_single_query(
        q_row: np.ndarray,
        enc: DeltaEncoding,
        upto: int,
        counter: Optional[MacCounter] = None) -> np.ndarray:
    """
    Delta scores of one query against encoded positions 0..upto.

    Parameters
    ----------
    q_row: np.ndarray
        The query vector.
    enc: DeltaEncoding
        The encoded key sequence.
    upto: int
        The last encoding step to score.
    counter: MacCounter, optional
        Incremented as in `delta_score_columns`.

    Returns
    -------
    np.ndarray
        upto + 1 scores, bit-identical to the matching row of
        `delta_score_columns`.
    """
    q_row = as_vector(q_row, length=enc.d_head)
    if upto < 0 or upto >= enc.n:
        raise BoundsError(
            "upto={} is out of the encoded range [0, {}).".format(
                upto, enc.n))

    if counter is None:
        counter = MacCounter()

    scores = _accumulate(
        q_row[np.newaxis, :], enc, counter,
        np.zeros(upto + 1, dtype=np.intp), upto)
    return scores[0]
