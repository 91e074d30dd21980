"""
Thresholded delta encoding of a sequence of vectors.

A sequence a(0), a(1), ... is stored as a dense basis vector and one
sparse delta column per following step. An element of the delta column
is emitted only when the element changed by more than the threshold
since it was last emitted; otherwise the held reference keeps its value.
"""
from __future__ import annotations
from enum import Enum
from logging import getLogger
from typing import List, Optional, Tuple, Union

import numpy as np

from deltasparse.exceptions import ConfigError, ShapeError
from deltasparse.tensor import SCALAR, DenseMatrix, as_matrix, as_vector

logger = getLogger(__name__)


class ConstructionStrategy(Enum):
    """
    Which operand carries the deltas and where the basis sits.

    - TOP_DOWN_QUERY: deltas over query rows, basis = first query.
    - BOTTOM_UP_QUERY: deltas over query rows, basis = last query.
    - TOP_DOWN_KEY: deltas over key rows, basis = first key.
    """

    TOP_DOWN_QUERY = 'top-down-query'
    BOTTOM_UP_QUERY = 'bottom-up-query'
    TOP_DOWN_KEY = 'top-down-key'

    @classmethod
    def from_name(
            cls,
            name: Union[str, ConstructionStrategy, None]
    ) -> ConstructionStrategy:
        """
        Get the strategy from its name.

        Parameters
        ----------
        name: str, ConstructionStrategy, None
            One of 'top-down-query', 'bottom-up-query', 'top-down-key'.
            Underscores are accepted in place of hyphens.
            If None, the default strategy is returned.
        """
        if name is None:
            return DEFAULT_STRATEGY

        if isinstance(name, cls):
            return name

        normalized = str(name).strip().lower().replace('_', '-')
        for strategy in cls:
            if strategy.value == normalized:
                return strategy

        raise ConfigError(
            "'{}' is not a valid construction strategy.".format(name))


DEFAULT_STRATEGY = ConstructionStrategy.TOP_DOWN_KEY


class Direction(Enum):
    """
    The order in which the rows of a sequence are consumed.
    """

    TOP_DOWN = 'top-down'
    BOTTOM_UP = 'bottom-up'

    @classmethod
    def from_name(cls, name: Union[str, Direction]) -> Direction:
        if isinstance(name, cls):
            return name

        normalized = str(name).strip().lower().replace('_', '-')
        for direction in cls:
            if direction.value == normalized:
                return direction

        raise ConfigError("'{}' is not a valid direction.".format(name))


class DeltaState(object):
    """
    The running state of an encoder.

    Attributes
    ----------
    reference: np.ndarray
        The held reference vector (float32, length d_head).
    step: int
        The number of vectors consumed after the basis.
    """

    def __init__(self, reference: np.ndarray, step: int = 0):
        self.reference = np.array(reference, dtype=SCALAR)
        self.step = int(step)

    @property
    def d_head(self) -> int:
        return self.reference.shape[0]

    def copy(self) -> DeltaState:
        return DeltaState(self.reference, self.step)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DeltaState):
            return NotImplemented

        return self.step == other.step and \
            self.reference.tobytes() == other.reference.tobytes()

    def __repr__(self) -> str:
        return "DeltaState(step={}, reference={})".format(
            self.step, self.reference.tolist())


class SparseDeltaColumn(object):
    """
    One thresholded delta vector in compressed (index, value) form.

    Attributes
    ----------
    index: int
        The position of the vector in the sequence.
    indices: np.ndarray
        Element indices, strictly ascending.
    values: np.ndarray
        The nonzero delta values (float64) at those indices.

    Note
    ----
    Values are held at double width: the difference of two float32
    numbers is exact in float64, so adding the deltas back onto the
    basis reproduces the float32 inputs bit-exactly.
    """

    def __init__(self, index: int, indices, values):
        self.index = int(index)
        self.indices = np.asarray(indices, dtype=np.intp)
        self.values = np.asarray(values, dtype=np.float64)
        self._values32 = None

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    @property
    def entries(self) -> List[Tuple[int, float]]:
        """
        The column as a list of (element-index, delta value) pairs.
        """
        return [(int(i), float(v)) for i, v in zip(
            self.indices, self.values)]

    @property
    def values32(self) -> np.ndarray:
        """
        The delta values rounded to working precision, used by
        the scoring kernel.
        """
        if self._values32 is None:
            self._values32 = self.values.astype(SCALAR)

        return self._values32

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseDeltaColumn):
            return NotImplemented

        return self.index == other.index and \
            np.array_equal(self.indices, other.indices) and \
            self.values.tobytes() == other.values.tobytes()

    def __repr__(self) -> str:
        return "SparseDeltaColumn({}, {})".format(self.index, self.entries)


class DeltaEncoding(object):
    """
    A sequence stored as a basis vector plus sparse delta columns.

    Attributes
    ----------
    basis: np.ndarray
        The dense first vector (last vector for bottom-up encodings).
    columns: List[SparseDeltaColumn]
        Delta columns in the order they were produced.
    terminal_state: DeltaState
        The encoder state after the last column, used to continue
        encoding in the decoding stage.
    theta: float
        The threshold.
    d_head: int
        The vector length.
    direction: Direction
        TOP_DOWN if the basis is the first row of the sequence.
    """

    def __init__(
            self,
            basis: np.ndarray,
            columns: List[SparseDeltaColumn],
            terminal_state: DeltaState,
            theta: float,
            direction: Direction = Direction.TOP_DOWN):
        self.basis = np.array(as_vector(basis))
        self.columns = columns
        self.terminal_state = terminal_state
        self.theta = float(theta)
        self.d_head = self.basis.shape[0]
        self.direction = direction

    @property
    def n(self) -> int:
        """
        The number of encoded positions, basis included.
        """
        return len(self.columns) + 1

    @property
    def nnz(self) -> int:
        """
        The total number of stored delta values.
        """
        return sum(column.nnz for column in self.columns)

    def position_of(self, step: int) -> int:
        """
        Map an encoding step (0 = basis) to a sequence position.
        """
        if self.direction is Direction.BOTTOM_UP:
            return self.n - 1 - step

        return step

    def __repr__(self) -> str:
        return "DeltaEncoding(n={}, d_head={}, theta={}, nnz={})".format(
            self.n, self.d_head, self.theta, self.nnz)


def check_theta(theta: float) -> float:
    theta = float(theta)
    if not theta >= 0.0 or theta == float('inf'):
        raise ConfigError(
            "The threshold must be a finite value >= 0 but {}.".format(
                theta))

    return theta


def init_state(basis: np.ndarray) -> DeltaState:
    """
    Create an encoder state whose reference is the basis vector.

    Parameters
    ----------
    basis: np.ndarray
        The first vector of the sequence.

    Returns
    -------
    DeltaState
        reference = basis, step = 0
    """
    return DeltaState(as_vector(basis), 0)


def delta_encode_step(
        x: np.ndarray,
        state: DeltaState,
        theta: float) -> Tuple[SparseDeltaColumn, DeltaState]:
    """
    Encode one vector against the held reference.

    Parameters
    ----------
    x: np.ndarray
        The next vector of the sequence.
    state: DeltaState
        The current encoder state. It is not modified.
    theta: float
        The threshold. An element fires when its change is strictly
        greater than theta.

    Returns
    -------
    (SparseDeltaColumn, DeltaState)
        The delta column for position state.step + 1 and the new state.
    """
    theta = check_theta(theta)
    x = as_vector(x, length=state.d_head)
    diff = x.astype(np.float64) - state.reference.astype(np.float64)
    fired = np.flatnonzero(np.abs(diff) > theta)

    reference = state.reference.copy()
    reference[fired] = x[fired]
    step = state.step + 1
    return (
        SparseDeltaColumn(step, fired, diff[fired]),
        DeltaState(reference, step),
    )


def build_delta_encoding(
        seq: DenseMatrix,
        theta: float,
        direction: Union[str, Direction] = Direction.TOP_DOWN
) -> DeltaEncoding:
    """
    Encode a whole sequence.

    Parameters
    ----------
    seq: DenseMatrix
        The sequence, one vector per row.
    theta: float
        The threshold.
    direction: str, Direction, optional (default=TOP_DOWN)
        TOP_DOWN uses the first row as the basis. BOTTOM_UP reverses
        the rows, encodes them top-down and labels each column with
        its position in the original sequence.

    Returns
    -------
    DeltaEncoding
    """
    theta = check_theta(theta)
    direction = Direction.from_name(direction)
    seq = as_matrix(seq)
    if seq.shape[0] < 1:
        raise ShapeError("Cannot encode an empty sequence.")

    rows = seq if direction is Direction.TOP_DOWN else seq[::-1]
    n = rows.shape[0]
    state = init_state(rows[0])
    columns = []
    for t in range(1, n):
        column, state = delta_encode_step(rows[t], state, theta)
        if direction is Direction.BOTTOM_UP:
            column.index = n - 1 - t

        columns.append(column)

    encoding = DeltaEncoding(
        basis=rows[0],
        columns=columns,
        terminal_state=state,
        theta=theta,
        direction=direction)
    logger.debug("Encoded {}".format(encoding))
    return encoding


def reconstruct(enc: DeltaEncoding) -> DenseMatrix:
    """
    Rebuild the reference trajectory from an encoding.

    Parameters
    ----------
    enc: DeltaEncoding
        The encoding.

    Returns
    -------
    DenseMatrix
        Row t is the basis plus the prefix sum of the delta columns up
        to t, in the original row order of the sequence.
    """
    reference = enc.basis.astype(np.float64)
    rows = [reference.astype(SCALAR)]
    for column in enc.columns:
        reference[column.indices] += column.values
        rows.append(reference.astype(SCALAR))

    matrix = np.stack(rows)
    if enc.direction is Direction.BOTTOM_UP:
        matrix = matrix[::-1]

    return np.ascontiguousarray(matrix, dtype=SCALAR)


def element_sparsity(enc: DeltaEncoding) -> float:
    """
    The fraction of zero elements in the delta columns.

    Parameters
    ----------
    enc: DeltaEncoding
        The encoding.

    Returns
    -------
    float
        1 - nnz / ((n - 1) * d_head). The dense basis is excluded.
        An encoding of a single vector has no delta columns and
        returns 1.0 by convention.
    """
    if not enc.columns:
        return 1.0

    return 1.0 - enc.nnz / (len(enc.columns) * enc.d_head)


def element_sparsity_with_basis(enc: DeltaEncoding) -> float:
    """
    The fraction of zero elements when the basis is counted as a
    dense column.
    """
    return 1.0 - (enc.nnz + enc.d_head) / (enc.n * enc.d_head)


def check_hold_rule(
        state: DeltaState,
        x: np.ndarray,
        theta: float) -> Optional[float]:
    """
    Check |reference - x| <= theta elementwise.

    Returns
    -------
    float or None
        The largest violation, or None if the bound holds.
    """
    gap = np.abs(
        state.reference.astype(np.float64) - np.asarray(x, np.float64))
    worst = float(gap.max()) if gap.size else 0.0
    if worst > theta:
        return worst

    return None
