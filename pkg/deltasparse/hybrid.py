"""
Hybrid attention: exact scores near the diagonal, delta scores
elsewhere.

In the prefilling stage the exact region is a staircase of diagonal
blocks ("jigsaw" window) whose width grows with the sequence length.
In the decoding stage the most recent W_d keys are scored exactly
from the cache ring and older keys through the delta recursion.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from logging import getLogger
from typing import Optional, Tuple

import numpy as np

from deltasparse.cache import (
    DeltaKVCache, cache_append, cache_from_encoding)
from deltasparse.encoding import (
    DEFAULT_STRATEGY, ConstructionStrategy, DeltaEncoding, Direction,
    check_theta, build_delta_encoding, delta_encode_step)
from deltasparse.exceptions import CacheStateError, ConfigError, ShapeError
from deltasparse.matmul import (
    Exactness, MacCounter, ScoreMatrix, delta_score_columns,
    delta_score_single_query)
from deltasparse.report import (
    FLAG_WINDOW_CLAMPED, AttentionReport, ErrorStats, Stage,
    build_report, compare_to_oracle, computational_sparsity, error_stats)
from deltasparse.tensor import (
    SCALAR, CausalMask, DenseMatrix, as_matrix, as_vector,
    attention_scale, dense_attention, dense_scores, matmul, row_softmax)

logger = getLogger(__name__)

__all__ = [
    'HybridConfig', 'PrefillResult', 'prefill_window', 'jigsaw_membership',
    'jigsaw_map', 'prefill_attention', 'prefill_attention_ablation',
    'decode_step', 'cached_scores', 'cached_attention',
    'computational_sparsity',
]


@dataclass(frozen=True)
class HybridConfig:
    """
    Tunables of the hybrid mechanism.

    Attributes
    ----------
    theta: float
        Delta threshold, >= 0.
    gamma: float
        Prefill window ratio, in (0, 1).
    w_max: int
        Upper bound of the prefill window, >= 1.
    w_d: int
        Decode window, >= 1.
    strategy: ConstructionStrategy
        Which operand is delta-encoded.
    """

    theta: float = 0.1
    gamma: float = 0.05
    w_max: int = 64
    w_d: int = 4
    strategy: ConstructionStrategy = field(default=DEFAULT_STRATEGY)

    def __post_init__(self):
        object.__setattr__(self, 'theta', check_theta(self.theta))
        object.__setattr__(
            self, 'strategy', ConstructionStrategy.from_name(self.strategy))
        if not 0.0 < float(self.gamma) < 1.0:
            raise ConfigError(
                "gamma must be in (0, 1) but {}.".format(self.gamma))

        if int(self.w_max) < 1 or int(self.w_d) < 1:
            raise ConfigError("w_max and w_d must be >= 1.")

        object.__setattr__(self, 'gamma', float(self.gamma))
        object.__setattr__(self, 'w_max', int(self.w_max))
        object.__setattr__(self, 'w_d', int(self.w_d))


def prefill_window(n: int, gamma: float, w_max: int) -> int:
    """
    Width of the prefill jigsaw window.

    Parameters
    ----------
    n: int
        The sequence length, >= 1.
    gamma: float
        The window ratio.
    w_max: int
        The upper bound.

    Returns
    -------
    int
        min(floor(gamma * n), w_max), clamped to at least 1.
    """
    if n < 1:
        raise ShapeError("The sequence length must be positive.")

    window = min(int(np.floor(gamma * n)), int(w_max))
    if window < 1:
        logger.warning("Window for n={} clamped to 1".format(n))
        return 1

    return window


def _window_clamped(n: int, gamma: float, w_max: int) -> bool:
    return min(int(np.floor(gamma * n)), int(w_max)) < 1


def jigsaw_membership(i: int, j: int, w: int) -> Exactness:
    """
    Classify a score entry of the prefill matrix.

    Returns
    -------
    Exactness
        MASKED when j > i, FULL when i and j share a diagonal block of
        width w, otherwise APPROXIMATE.
    """
    if j > i:
        return Exactness.MASKED

    if i // w == j // w:
        return Exactness.FULL

    return Exactness.APPROXIMATE


def jigsaw_map(n: int, w: int) -> np.ndarray:
    """
    The exactness codes of a whole n x n prefill matrix.
    """
    pos = np.arange(n)
    same_block = (pos[:, np.newaxis] // w) == (pos[np.newaxis, :] // w)
    causal = np.tri(n, dtype=bool)
    codes = np.full((n, n), int(Exactness.MASKED), dtype=np.int8)
    codes[causal] = int(Exactness.APPROXIMATE)
    codes[causal & same_block] = int(Exactness.FULL)
    return codes


class PrefillResult(object):
    """
    Everything a prefill produces.

    Attributes
    ----------
    output: DenseMatrix
        The attention output, shape (n, d_v).
    scores: ScoreMatrix
        Merged unscaled scores with the jigsaw exactness map.
    delta_scores: ScoreMatrix
        The raw output of the delta kernel, in sequence orientation,
        before exact blocks were merged in.
    encoding: DeltaEncoding
        The delta encoding of the encoded operand.
    cache: DeltaKVCache or None
        The cache left for decoding; None for ablation strategies.
    report: AttentionReport
        Sparsity, MAC and error figures.
    window: int
        The prefill window.
    strategy: ConstructionStrategy
        The strategy used.
    basis_axis: str
        'column' when the basis is a key, 'row' when it is a query.
    basis_index: int
        The position of the basis.
    counter: MacCounter
        The MAC counts behind the report.
    """

    def __init__(self, **kwargs):
        self.output = kwargs['output']
        self.scores = kwargs['scores']
        self.delta_scores = kwargs['delta_scores']
        self.encoding = kwargs['encoding']
        self.cache = kwargs.get('cache')
        self.report = kwargs['report']
        self.window = kwargs['window']
        self.strategy = kwargs['strategy']
        self.basis_axis = kwargs['basis_axis']
        self.basis_index = kwargs['basis_index']
        self.counter = kwargs['counter']

    def __repr__(self) -> str:
        return "PrefillResult(n={}, window={}, strategy={})".format(
            self.output.shape[0], self.window, self.strategy.value)


def _check_qkv(q, k, v) -> Tuple[DenseMatrix, DenseMatrix, DenseMatrix]:
    q = as_matrix(q)
    k = as_matrix(k)
    v = as_matrix(v)
    if q.shape != k.shape:
        raise ShapeError(
            "Queries {} and keys {} must have the same shape.".format(
                q.shape, k.shape))

    if v.shape[0] != q.shape[0]:
        raise ShapeError("There must be one value per key.")

    if q.shape[0] < 1 or q.shape[1] < 1:
        raise ShapeError("Prefill needs at least one position.")

    return q, k, v


def _fill_exact_blocks(
        q: DenseMatrix,
        k: DenseMatrix,
        raw: DenseMatrix,
        window: int,
        counter: MacCounter) -> None:
    n, d_head = q.shape
    for start in range(0, n, window):
        stop = min(start + window, n)
        size = stop - start
        raw[start:stop, start:stop] = matmul(q[start:stop], k[start:stop].T)
        counter.add_exact(size * (size + 1) // 2 * d_head)


def _finish_prefill(
        q: DenseMatrix,
        k: DenseMatrix,
        v: DenseMatrix,
        cfg: HybridConfig,
        raw: DenseMatrix,
        delta_scores: ScoreMatrix,
        enc: DeltaEncoding,
        counter: MacCounter,
        window: int,
        compare: bool) -> Tuple[ScoreMatrix, DenseMatrix, AttentionReport]:
    n, d_head = q.shape
    exactness = jigsaw_map(n, window)
    raw[exactness == int(Exactness.MASKED)] = 0.0
    scores = ScoreMatrix(raw, exactness, attention_scale(d_head))
    probs = row_softmax(scores.scaled(), CausalMask(n))
    output = matmul(probs, v)

    errors: Optional[ErrorStats] = None
    output_err = 0.0
    if compare:
        errors = compare_to_oracle(scores, dense_scores(q, k))
        output_err = error_stats(output, dense_attention(q, k, v)).max_abs

    flags = []
    if _window_clamped(n, cfg.gamma, cfg.w_max):
        flags.append(FLAG_WINDOW_CLAMPED)

    report = build_report(
        stage=Stage.PREFILL,
        n=n,
        window=window,
        delta_nnz=enc.nnz,
        delta_elements=len(enc.columns) * enc.d_head,
        basis_elements=enc.d_head,
        counter=counter,
        errors=errors,
        output_err_max=output_err,
        flags=flags)
    logger.debug("Prefill n={} window={}: s_m={:.4f} s_c={:.4f}".format(
        n, window, report.s_m, report.s_c))
    return scores, output, report


def prefill_attention(
        q: DenseMatrix,
        k: DenseMatrix,
        v: DenseMatrix,
        cfg: Optional[HybridConfig] = None,
        compare: bool = True) -> PrefillResult:
    """
    Hybrid causal attention over a whole prompt.

    Parameters
    ----------
    q, k, v: DenseMatrix
        Queries and keys of shape (n, d_head), values (n, d_v).
    cfg: HybridConfig, optional
        The tunables. Query strategies are handed to
        `prefill_attention_ablation`.
    compare: bool, optional (default=True)
        Fill the error fields of the report from the dense oracle.

    Returns
    -------
    PrefillResult
        The output, the merged scores, the report and the delta
        KV-cache for the decoding stage.

    Note
    ----
    Entries in the diagonal blocks of the jigsaw window are exact
    products. Every other unmasked entry comes from the delta
    recursion over the keys, which only visits the query rows below
    the block of each key.
    """
    cfg = cfg or HybridConfig()
    if cfg.strategy is not ConstructionStrategy.TOP_DOWN_KEY:
        return prefill_attention_ablation(q, k, v, cfg, compare=compare)

    q, k, v = _check_qkv(q, k, v)
    n = q.shape[0]
    window = prefill_window(n, cfg.gamma, cfg.w_max)
    enc = build_delta_encoding(k, cfg.theta, Direction.TOP_DOWN)
    counter = MacCounter()
    raw = np.zeros((n, n), dtype=SCALAR)
    _fill_exact_blocks(q, k, raw, window, counter)

    row_start = np.minimum((np.arange(n) // window + 1) * window, n)
    delta_scores = delta_score_columns(q, enc, counter, row_start=row_start)
    approx = jigsaw_map(n, window) == int(Exactness.APPROXIMATE)
    raw[approx] = delta_scores.scores[approx]

    scores, output, report = _finish_prefill(
        q, k, v, cfg, raw, delta_scores, enc, counter, window, compare)
    return PrefillResult(
        output=output,
        scores=scores,
        delta_scores=delta_scores,
        encoding=enc,
        cache=cache_from_encoding(enc, k, v, cfg.w_d),
        report=report,
        window=window,
        strategy=cfg.strategy,
        basis_axis='column',
        basis_index=0,
        counter=counter)


def prefill_attention_ablation(
        q: DenseMatrix,
        k: DenseMatrix,
        v: DenseMatrix,
        cfg: HybridConfig,
        compare: bool = True) -> PrefillResult:
    """
    Hybrid prefill with the queries delta-encoded instead of the keys.

    Parameters
    ----------
    q, k, v: DenseMatrix
        As in `prefill_attention`.
    cfg: HybridConfig
        strategy must be TOP_DOWN_QUERY or BOTTOM_UP_QUERY.
    compare: bool, optional (default=True)
        Fill the error fields of the report.

    Returns
    -------
    PrefillResult
        No cache is produced. The exact line of the delta kernel is a
        row: row 0 for top-down, row n-1 for bottom-up.

    Note
    ----
    The delta kernel is run over the full rectangle (every key against
    every encoded query) and counted as such. With top-down queries the
    exact row 0 has a single unmasked entry; with bottom-up queries the
    exact row n-1 is the one that sees every key.
    """
    if cfg.strategy is ConstructionStrategy.TOP_DOWN_KEY:
        raise ConfigError(
            "Use prefill_attention for the top-down-key strategy.")

    q, k, v = _check_qkv(q, k, v)
    n = q.shape[0]
    direction = Direction.TOP_DOWN \
        if cfg.strategy is ConstructionStrategy.TOP_DOWN_QUERY \
        else Direction.BOTTOM_UP
    window = prefill_window(n, cfg.gamma, cfg.w_max)
    enc = build_delta_encoding(q, cfg.theta, direction)
    counter = MacCounter()

    # Keys play the query role; rows of the transpose follow
    # encoding steps.
    delta_scores = delta_score_columns(k, enc, counter).transpose()
    if direction is Direction.BOTTOM_UP:
        delta_scores = ScoreMatrix(
            np.ascontiguousarray(delta_scores.scores[::-1]),
            np.ascontiguousarray(delta_scores.exactness[::-1]))

    raw = np.zeros((n, n), dtype=SCALAR)
    _fill_exact_blocks(q, k, raw, window, counter)
    approx = jigsaw_map(n, window) == int(Exactness.APPROXIMATE)
    raw[approx] = delta_scores.scores[approx]

    scores, output, report = _finish_prefill(
        q, k, v, cfg, raw, delta_scores, enc, counter, window, compare)
    return PrefillResult(
        output=output,
        scores=scores,
        delta_scores=delta_scores,
        encoding=enc,
        cache=None,
        report=report,
        window=window,
        strategy=cfg.strategy,
        basis_axis='row',
        basis_index=0 if direction is Direction.TOP_DOWN else n - 1,
        counter=counter)


def _check_decode_config(cache: DeltaKVCache, cfg: HybridConfig) -> None:
    if cfg.strategy is not ConstructionStrategy.TOP_DOWN_KEY:
        raise ConfigError(
            "Decoding needs the top-down-key strategy, not '{}'.".format(
                cfg.strategy.value))

    if not cache.initialized:
        raise CacheStateError("The cache is not initialized.")

    if cache.theta is not None and cache.theta != cfg.theta:
        raise ConfigError(
            "The cache was built with theta={} but theta={} is used.".format(
                cache.theta, cfg.theta))


def _check_oracle(
        oracle: Tuple[DenseMatrix, DenseMatrix],
        length: int) -> Tuple[DenseMatrix, DenseMatrix]:
    keys = as_matrix(oracle[0])
    values = as_matrix(oracle[1])
    if keys.shape[0] != length or values.shape[0] != length:
        raise ShapeError(
            "The oracle must hold the {} cached positions.".format(length))

    return keys, values


def cached_scores(
        q_new: np.ndarray,
        cache: DeltaKVCache,
        counter: Optional[MacCounter] = None) -> ScoreMatrix:
    """
    Pre-softmax scores of one query against every cached position.

    Positions in the exact ring are exact products; older positions
    come from the delta recursion. The result has a single row.
    """
    if not cache.initialized:
        raise CacheStateError("The cache is not initialized.")

    if counter is None:
        counter = MacCounter()

    q_new = as_vector(q_new, length=cache.d_head)
    length = cache.length
    first_exact = cache.exact_ring[0][0]

    raw = np.zeros(length, dtype=SCALAR)
    exact_keys = cache.ring_keys()
    raw[first_exact:] = matmul(q_new[np.newaxis, :], exact_keys.T)[0]
    counter.add_exact(exact_keys.shape[0] * cache.d_head)
    if first_exact > 0:
        raw[:first_exact] = delta_score_single_query(
            q_new, cache.as_encoding(), upto=first_exact - 1,
            counter=counter)

    exactness = np.full(
        (1, length), int(Exactness.APPROXIMATE), dtype=np.int8)
    exactness[0, first_exact:] = int(Exactness.FULL)
    return ScoreMatrix(
        raw[np.newaxis, :], exactness, attention_scale(cache.d_head))


def cached_attention(
        q_new: np.ndarray,
        cache: DeltaKVCache,
        cfg: HybridConfig,
        oracle: Optional[Tuple[DenseMatrix, DenseMatrix]] = None
) -> Tuple[np.ndarray, AttentionReport]:
    """
    Attention of one query over every position in the cache.

    Parameters
    ----------
    q_new: np.ndarray
        The query of the newest position.
    cache: DeltaKVCache
        The cache, including the newest position.
    cfg: HybridConfig
        The tunables.
    oracle: (DenseMatrix, DenseMatrix), optional
        The exact keys and values of every cached position. If given,
        the error fields of the report are filled.

    Returns
    -------
    (np.ndarray, AttentionReport)
        The output vector and the report of this step.
    """
    _check_decode_config(cache, cfg)
    q_new = as_vector(q_new, length=cache.d_head)
    length = cache.length
    counter = MacCounter()
    scores = cached_scores(q_new, cache, counter)
    probs = row_softmax(scores.scaled())
    output = matmul(probs, cache.value_matrix())[0]

    errors = None
    output_err = 0.0
    if oracle is not None:
        keys, values = _check_oracle(oracle, length)
        errors = compare_to_oracle(scores, dense_scores(
            q_new[np.newaxis, :], keys))
        exact_out = dense_attention(
            q_new[np.newaxis, :], keys, values, causal=False)[0]
        output_err = error_stats(output, exact_out).max_abs

    delta_nnz = sum(c.nnz for c in cache.delta_columns)
    report = build_report(
        stage=Stage.DECODE,
        n=length,
        window=cfg.w_d,
        delta_nnz=delta_nnz,
        delta_elements=len(cache.delta_columns) * cache.d_head,
        basis_elements=cache.d_head,
        counter=counter,
        errors=errors,
        output_err_max=output_err)
    return output, report


def decode_step(
        q_new: np.ndarray,
        k_new: np.ndarray,
        v_new: np.ndarray,
        cache: DeltaKVCache,
        cfg: HybridConfig,
        oracle: Optional[Tuple[DenseMatrix, DenseMatrix]] = None
) -> Tuple[np.ndarray, AttentionReport]:
    """
    Append one token to the cache and attend over all positions.

    Parameters
    ----------
    q_new, k_new, v_new: np.ndarray
        Query, key and value of the new token.
    cache: DeltaKVCache
        The cache; it grows by one position.
    cfg: HybridConfig
        The tunables. theta must match the cache.
    oracle: (DenseMatrix, DenseMatrix), optional
        The exact keys and values including the new token.

    Returns
    -------
    (np.ndarray, AttentionReport)
        The output vector and the report of this step.
    """
    _check_decode_config(cache, cfg)
    if oracle is not None:
        _check_oracle(oracle, cache.length + 1)

    column, state = delta_encode_step(k_new, cache.state, cfg.theta)
    previous, cache.state = cache.state, state
    try:
        cache_append(cache, column, k_new, v_new)
    except Exception:
        cache.state = previous
        raise

    if cache.theta is None:
        cache.theta = cfg.theta

    return cached_attention(q_new, cache, cfg, oracle=oracle)
