"""
Per-head driver of the prefilling and decoding stages.
"""
from __future__ import annotations
from enum import Enum
from logging import getLogger
from typing import List, Optional, Tuple, Union

import numpy as np

from deltasparse.cache import DeltaKVCache, cache_init
from deltasparse.encoding import ConstructionStrategy
from deltasparse.exceptions import CacheStateError, ConfigError, ShapeError
from deltasparse.hybrid import (
    HybridConfig, PrefillResult, cached_attention, decode_step,
    prefill_attention)
from deltasparse.matmul import MacCounter
from deltasparse.report import (
    AttentionReport, ErrorStats, Stage, build_report, combine_decode_steps)
from deltasparse.tensor import (
    SCALAR, DenseMatrix, as_matrix, as_vector, dense_single_query)

logger = getLogger(__name__)


class Scenario(Enum):
    """
    Which stages use the hybrid mechanism.

    - PREFILL_ONLY: hybrid prefill, dense decoding.
    - END_TO_END: hybrid prefill and hybrid decoding over the
      delta KV-cache.
    """

    PREFILL_ONLY = 'prefill-only'
    END_TO_END = 'end-to-end'

    @classmethod
    def from_name(cls, name: Union[str, Scenario]) -> Scenario:
        if isinstance(name, cls):
            return name

        normalized = str(name).strip().lower().replace('_', '-')
        for scenario in cls:
            if scenario.value == normalized:
                return scenario

        raise ConfigError("'{}' is not a valid scenario.".format(name))


class DeltaAttentionHead(object):
    """
    One attention head with its own cache.

    Attributes
    ----------
    cfg: HybridConfig
        The tunables.
    dense_decode: bool
        If True, decoding attends densely over all stored keys.
    cache: DeltaKVCache
        The delta KV-cache, None before the first token.
    keys, values: List[np.ndarray]
        Every key and value seen so far, used by dense decoding.
    """

    def __init__(self, cfg: HybridConfig, dense_decode: bool = False):
        self.cfg = cfg
        self.dense_decode = dense_decode
        self.cache: Optional[DeltaKVCache] = None
        self.keys: List[np.ndarray] = []
        self.values: List[np.ndarray] = []

    @property
    def length(self) -> int:
        return len(self.keys)

    def prefill(
            self,
            q: DenseMatrix,
            k: DenseMatrix,
            v: DenseMatrix,
            compare: bool = True) -> PrefillResult:
        """
        Run the prefilling stage on an empty head.
        """
        if self.length > 0:
            raise CacheStateError("The head has already been prefilled.")

        result = prefill_attention(q, k, v, self.cfg, compare=compare)
        self.cache = result.cache
        self.keys = [np.array(row, dtype=SCALAR) for row in as_matrix(k)]
        self.values = [np.array(row, dtype=SCALAR) for row in as_matrix(v)]
        return result

    def decode(
            self,
            q_new: np.ndarray,
            k_new: np.ndarray,
            v_new: np.ndarray,
            compare: bool = True) -> Tuple[np.ndarray, AttentionReport]:
        """
        Process one new token.

        Parameters
        ----------
        q_new, k_new, v_new: np.ndarray
            Query, key and value of the token.
        compare: bool, optional (default=True)
            Compare against dense attention over the same history.

        Returns
        -------
        (np.ndarray, AttentionReport)
            The output vector and the report of this step.
        """
        if not self.dense_decode and self.cache is None and self.length > 0:
            raise CacheStateError(
                "The prefill strategy '{}' leaves no cache to decode "
                "from.".format(self.cfg.strategy.value))

        k_new = as_vector(k_new)
        v_new = as_vector(v_new)
        self.keys.append(k_new.copy())
        self.values.append(v_new.copy())
        if self.dense_decode:
            return self._dense_step(q_new)

        oracle = (np.stack(self.keys), np.stack(self.values)) \
            if compare else None
        if self.cache is None:
            self.cache = cache_init(
                k_new, v_new, self.cfg.w_d, self.cfg.theta)
            return cached_attention(q_new, self.cache, self.cfg, oracle)

        return decode_step(
            q_new, k_new, v_new, self.cache, self.cfg, oracle=oracle)

    def _dense_step(
            self, q_new: np.ndarray) -> Tuple[np.ndarray, AttentionReport]:
        keys = np.stack(self.keys)
        n, d_head = keys.shape
        output = dense_single_query(q_new, keys, np.stack(self.values))
        counter = MacCounter()
        counter.add_exact(n * d_head)
        report = build_report(
            stage=Stage.DECODE,
            n=n,
            window=self.cfg.w_d,
            delta_nnz=(n - 1) * d_head,
            delta_elements=(n - 1) * d_head,
            basis_elements=d_head,
            counter=counter,
            errors=ErrorStats())
        return output, report


class HeadResult(object):
    """
    Outcome of one head.

    Attributes
    ----------
    prefill: PrefillResult
        The prefill result.
    decode_report: AttentionReport or None
        Decode figures accumulated over all steps; None without steps.
    decode_outputs: DenseMatrix
        One output row per decode step.
    head: DeltaAttentionHead
        The head, holding the final cache.
    """

    def __init__(self, prefill, decode_report, decode_outputs, head):
        self.prefill = prefill
        self.decode_report = decode_report
        self.decode_outputs = decode_outputs
        self.head = head


def run_head(
        q: DenseMatrix,
        k: DenseMatrix,
        v: DenseMatrix,
        n_prefill: int,
        cfg: HybridConfig,
        scenario: Union[str, Scenario] = Scenario.END_TO_END,
        compare: bool = True) -> HeadResult:
    """
    Prefill the first n_prefill positions and decode the rest.

    Parameters
    ----------
    q, k, v: DenseMatrix
        The whole token stream of the head.
    n_prefill: int
        The prompt length.
    cfg: HybridConfig
        The tunables.
    scenario: str, Scenario
        PREFILL_ONLY decodes densely.
    compare: bool, optional (default=True)
        Run the dense oracle in lockstep.

    Returns
    -------
    HeadResult
    """
    scenario = Scenario.from_name(scenario)
    q = as_matrix(q)
    k = as_matrix(k)
    v = as_matrix(v)
    total = q.shape[0]
    if not 1 <= n_prefill <= total:
        raise ShapeError(
            "The prompt length {} is out of [1, {}].".format(
                n_prefill, total))

    if scenario is Scenario.END_TO_END and total > n_prefill and \
            cfg.strategy is not ConstructionStrategy.TOP_DOWN_KEY:
        raise ConfigError(
            "End-to-end decoding needs the top-down-key strategy.")

    head = DeltaAttentionHead(
        cfg, dense_decode=scenario is Scenario.PREFILL_ONLY)
    prefill = head.prefill(
        q[:n_prefill], k[:n_prefill], v[:n_prefill], compare=compare)

    outputs = []
    steps = []
    for t in range(n_prefill, total):
        output, report = head.decode(q[t], k[t], v[t], compare=compare)
        outputs.append(output)
        steps.append(report)

    decode_report = combine_decode_steps(steps) if steps else None
    decode_outputs = np.stack(outputs) if outputs \
        else np.zeros((0, v.shape[1]), dtype=SCALAR)
    return HeadResult(prefill, decode_report, decode_outputs, head)
