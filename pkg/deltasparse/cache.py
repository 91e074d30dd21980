"""
The delta KV-cache used in the decoding stage.

The cache keeps the basis key, every delta column, the most recent
W_d keys in exact form and every value vector. Older keys are only
available through the delta recursion.
"""
from __future__ import annotations
from collections import deque
from logging import getLogger
import os
from pathlib import Path
import tempfile
from typing import Deque, List, Optional, Tuple, Union

import numpy as np

from deltasparse.encoding import (
    DeltaEncoding, DeltaState, Direction, SparseDeltaColumn, init_state)
from deltasparse.exceptions import CacheStateError, ConfigError, ShapeError
from deltasparse.tensor import SCALAR, DenseMatrix, as_vector

logger = getLogger(__name__)


class DeltaKVCache(object):
    """
    Per-head cache state of the decoding stage.

    Attributes
    ----------
    d_head: int
        The key width.
    w_d: int
        The number of most recent keys held exactly, the current
        token included.
    theta: float, optional
        The threshold the deltas were encoded with. None until the
        cache is initialized.
    basis: np.ndarray
        The first key, dense.
    delta_columns: List[SparseDeltaColumn]
        One column per position 1..length-1, in position order.
    exact_ring: Deque[Tuple[int, np.ndarray]]
        (position, key) pairs of the last w_d positions, oldest first.
    values: List[np.ndarray]
        One value vector per position.
    state: DeltaState
        The encoder state after the last appended position.
    """

    def __init__(self, d_head: int, w_d: int,
                 theta: Optional[float] = None):
        if w_d < 1:
            raise ConfigError("w_d must be >= 1 but {}.".format(w_d))

        self.d_head = int(d_head)
        self.w_d = int(w_d)
        self.theta = None if theta is None else float(theta)
        self.basis = None
        self.delta_columns: List[SparseDeltaColumn] = []
        self.exact_ring: Deque[Tuple[int, np.ndarray]] = deque(
            maxlen=self.w_d)
        self.values: List[np.ndarray] = []
        self.state: Optional[DeltaState] = None

    @property
    def initialized(self) -> bool:
        return self.basis is not None

    @property
    def length(self) -> int:
        """
        The number of cached positions.
        """
        return len(self.values)

    def ring_positions(self) -> List[int]:
        return [pos for pos, _ in self.exact_ring]

    def ring_keys(self) -> DenseMatrix:
        """
        The exact keys of the ring as a matrix, oldest first.
        """
        return np.stack([key for _, key in self.exact_ring])

    def value_matrix(self) -> DenseMatrix:
        return np.stack(self.values)

    def as_encoding(self) -> DeltaEncoding:
        """
        View the cached keys as a top-down encoding.
        """
        if not self.initialized:
            raise CacheStateError("The cache is not initialized.")

        return DeltaEncoding(
            basis=self.basis,
            columns=self.delta_columns,
            terminal_state=self.state,
            theta=self.theta or 0.0,
            direction=Direction.TOP_DOWN)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DeltaKVCache):
            return NotImplemented

        if (self.d_head, self.w_d, self.theta, self.length) != \
                (other.d_head, other.w_d, other.theta, other.length):
            return False

        if self.initialized != other.initialized:
            return False

        if not self.initialized:
            return True

        return self.basis.tobytes() == other.basis.tobytes() and \
            self.delta_columns == other.delta_columns and \
            self.ring_positions() == other.ring_positions() and \
            all(a.tobytes() == b.tobytes() for (_, a), (_, b) in zip(
                self.exact_ring, other.exact_ring)) and \
            all(a.tobytes() == b.tobytes() for a, b in zip(
                self.values, other.values)) and \
            self.state == other.state

    def __repr__(self) -> str:
        return "DeltaKVCache(length={}, d_head={}, w_d={}, theta={})".format(
            self.length, self.d_head, self.w_d, self.theta)


def cache_init(
        basis_key: np.ndarray,
        first_value: np.ndarray,
        w_d: int,
        theta: Optional[float] = None) -> DeltaKVCache:
    """
    Create a cache holding a single position.

    Parameters
    ----------
    basis_key: np.ndarray
        The key of position 0.
    first_value: np.ndarray
        The value of position 0.
    w_d: int
        The decode window.
    theta: float, optional
        The threshold later deltas will be encoded with.

    Returns
    -------
    DeltaKVCache
        length 1, the basis in the exact ring, no delta columns.
    """
    basis_key = as_vector(basis_key)
    cache = DeltaKVCache(basis_key.shape[0], w_d, theta)
    cache.basis = basis_key.copy()
    cache.state = init_state(basis_key)
    cache.exact_ring.append((0, basis_key.copy()))
    cache.values.append(as_vector(first_value).copy())
    return cache


def cache_append(
        cache: DeltaKVCache,
        delta: SparseDeltaColumn,
        k_new: np.ndarray,
        v_new: np.ndarray) -> DeltaKVCache:
    """
    Append a new position to the cache.

    Parameters
    ----------
    cache: DeltaKVCache
        The cache. Its state must already have been advanced by the
        encoder that produced `delta`.
    delta: SparseDeltaColumn
        The delta column of the new position.
    k_new, v_new: np.ndarray
        The new key and value.

    Returns
    -------
    DeltaKVCache
        The same cache; the oldest exact key leaves the ring when it
        holds more than w_d keys.
    """
    if not cache.initialized:
        raise CacheStateError("The cache is not initialized.")

    position = cache.length
    if delta.index != position:
        raise CacheStateError(
            "Delta column for position {} cannot follow position {}.".format(
                delta.index, position - 1))

    if cache.state is None or cache.state.step != position:
        raise CacheStateError(
            "The encoder state has not been advanced to position {}.".format(
                position))

    k_new = as_vector(k_new, length=cache.d_head)
    v_new = as_vector(v_new)
    if v_new.shape[0] != cache.values[0].shape[0]:
        raise ShapeError("The value width does not match the cache.")

    if len(cache.exact_ring) == cache.w_d:
        logger.debug("Evict exact key at {}".format(cache.exact_ring[0][0]))

    cache.delta_columns.append(delta)
    cache.exact_ring.append((position, k_new.copy()))
    cache.values.append(v_new.copy())
    return cache


def cache_from_encoding(
        enc: DeltaEncoding,
        k: DenseMatrix,
        v: DenseMatrix,
        w_d: int) -> DeltaKVCache:
    """
    Build the cache a prefill over k and v leaves behind.

    Parameters
    ----------
    enc: DeltaEncoding
        The top-down encoding of k.
    k, v: DenseMatrix
        The prefilled keys and values.
    w_d: int
        The decode window.
    """
    if enc.direction is not Direction.TOP_DOWN:
        raise CacheStateError("Only top-down key encodings can be cached.")

    n = k.shape[0]
    if enc.n != n or v.shape[0] != n:
        raise ShapeError("Encoding, keys and values differ in length.")

    cache = DeltaKVCache(enc.d_head, w_d, enc.theta)
    cache.basis = enc.basis.copy()
    cache.state = enc.terminal_state.copy()
    cache.delta_columns = list(enc.columns)
    for pos in range(max(0, n - cache.w_d), n):
        cache.exact_ring.append((pos, np.array(k[pos], dtype=SCALAR)))

    cache.values = [np.array(row, dtype=SCALAR) for row in v]
    return cache


def cache_memory_report(cache: DeltaKVCache) -> dict:
    """
    Count the scalars held by the cache.

    Returns
    -------
    dict
        delta_scalars, exact_scalars, value_scalars, basis_scalars and
        dense_equivalent (the scalars of a dense key cache).
    """
    d_v = cache.values[0].shape[0] if cache.values else 0
    return {
        'positions': cache.length,
        'delta_scalars': sum(c.nnz for c in cache.delta_columns),
        'exact_scalars': len(cache.exact_ring) * cache.d_head,
        'value_scalars': cache.length * d_v,
        'basis_scalars': cache.d_head if cache.initialized else 0,
        'dense_equivalent': cache.length * cache.d_head,
    }


class CacheCheckpoint(object):
    """
    Serialized form of a DeltaKVCache.
    """

    __schema__ = """
        @0xc4f1d7a2b96e3085;

        struct DeltaColumn {
            index @0 :UInt32;
            positions @1 :List(UInt32);
            values @2 :List(Float64);
        }

        struct ExactKey {
            position @0 :UInt32;
            key @1 :List(Float32);
        }

        struct DeltaKVCache {
            dHead @0 :UInt32;
            wD @1 :UInt32;
            theta @2 :Float64;
            basis @3 :List(Float32);
            reference @4 :List(Float32);
            step @5 :UInt32;
            columns @6 :List(DeltaColumn);
            ring @7 :List(ExactKey);
            valueWidth @8 :UInt32;
            values @9 :List(Float32);
        }
        """
    __record_type__ = "DeltaKVCache"

    _schema = None

    @classmethod
    def schema(cls):
        """
        Compile the schema once and return the record type.
        """
        if cls._schema is None:
            import capnp
            with tempfile.TemporaryDirectory() as tmpdir:
                path = os.path.join(tmpdir, 'deltasparse_cache.capnp')
                with open(path, 'w') as f:
                    f.write(cls.__schema__)

                cls._schema = capnp.load(path)

        return getattr(cls._schema, cls.__record_type__)


def save_cache(cache: DeltaKVCache, path: Union[str, Path]) -> None:
    """
    Write the cache to a file.
    """
    if not cache.initialized:
        raise CacheStateError("Cannot save an uninitialized cache.")

    record = CacheCheckpoint.schema().new_message()
    record.dHead = cache.d_head
    record.wD = cache.w_d
    record.theta = cache.theta if cache.theta is not None else -1.0
    record.basis = cache.basis.tolist()
    record.reference = cache.state.reference.tolist()
    record.step = cache.state.step
    columns = record.init('columns', len(cache.delta_columns))
    for i, column in enumerate(cache.delta_columns):
        columns[i].index = column.index
        columns[i].positions = column.indices.tolist()
        columns[i].values = column.values.tolist()

    ring = record.init('ring', len(cache.exact_ring))
    for i, (pos, key) in enumerate(cache.exact_ring):
        ring[i].position = pos
        ring[i].key = key.tolist()

    values = cache.value_matrix()
    record.valueWidth = values.shape[1]
    record.values = values.ravel().tolist()
    with open(path, 'wb') as f:
        record.write(f)

    logger.debug("Saved {} to '{}'".format(cache, path))


def load_cache(path: Union[str, Path]) -> DeltaKVCache:
    """
    Read a cache written by `save_cache`.
    """
    with open(path, 'rb') as f:
        record = CacheCheckpoint.schema().read(
            f, traversal_limit_in_words=2**63 - 1)
        theta = record.theta if record.theta >= 0.0 else None
        cache = DeltaKVCache(record.dHead, record.wD, theta)
        cache.basis = np.array(list(record.basis), dtype=SCALAR)
        cache.state = DeltaState(
            np.array(list(record.reference), dtype=SCALAR), record.step)
        cache.delta_columns = [
            SparseDeltaColumn(
                c.index, list(c.positions), list(c.values))
            for c in record.columns]
        for entry in record.ring:
            cache.exact_ring.append(
                (entry.position, np.array(list(entry.key), dtype=SCALAR)))

        flat = np.array(list(record.values), dtype=SCALAR)
        cache.values = list(flat.reshape(-1, record.valueWidth))

    logger.debug("Loaded {} from '{}'".format(cache, path))
    return cache
