"""
Sparsity, MAC and approximation-error reporting.

Task accuracy cannot be measured without model weights, so reports
carry score-level error (pre-softmax, after scaling) and output-level
error against the dense oracle instead.
"""
from __future__ import annotations
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from logging import getLogger
import math
from typing import Iterable, List, Optional, Union

import numpy as np

from deltasparse.exceptions import ConfigError, ShapeError
from deltasparse.matmul import Exactness, MacCounter, ScoreMatrix
from deltasparse.tensor import DenseMatrix

logger = getLogger(__name__)

# Flags recorded in reports.
FLAG_BASIS_DENSE = 'basis-dense'
FLAG_SINGLE_POSITION = 'single-position'
FLAG_WINDOW_CLAMPED = 'window-clamped'
FLAG_WINDOW_EXCEEDS_LENGTH = 'window-exceeds-length'
FLAG_NOT_COMPARED = 'not-compared'


class Stage(Enum):
    """
    Inference stage a report refers to.
    """

    PREFILL = 'prefill'
    DECODE = 'decode'

    @classmethod
    def from_name(cls, name: Union[str, Stage]) -> Stage:
        if isinstance(name, cls):
            return name

        for stage in cls:
            if stage.value == str(name).strip().lower():
                return stage

        raise ConfigError("'{}' is not a valid stage.".format(name))


def computational_sparsity(
        s_m: float,
        window: int,
        n: int,
        stage: Union[str, Stage] = Stage.PREFILL) -> float:
    """
    Effective computational sparsity of the hybrid mechanism.

    Parameters
    ----------
    s_m: float
        Element sparsity of the delta matrix, in [0, 1].
    window: int
        The full-attention window: the prefill window for
        the prefilling stage, W_d for decoding.
    n: int
        The sequence length.
    stage: str, Stage
        'prefill' or 'decode'. The formula is the same for both.

    Returns
    -------
    float
        s_m * (1 - window / n), or 0.0 when window exceeds n.
    """
    Stage.from_name(stage)
    if not 0.0 <= s_m <= 1.0:
        raise ConfigError("s_m must be in [0, 1] but {}.".format(s_m))

    if window < 1 or n < 1:
        raise ConfigError("window and n must be positive.")

    if window > n:
        logger.warning(
            "Window {} exceeds length {}; sparsity is 0.".format(window, n))
        return 0.0

    return s_m * (1.0 - window / n)


@dataclass
class ErrorStats:
    """
    Entrywise error of approximate values against exact ones.

    The sums are kept so that statistics of several comparisons can be
    combined exactly.
    """

    max_abs: float = 0.0
    count: int = 0
    abs_sum: float = 0.0
    sq_err_sum: float = 0.0
    sq_ref_sum: float = 0.0

    @property
    def mean_abs(self) -> float:
        return self.abs_sum / self.count if self.count else 0.0

    @property
    def frobenius_rel(self) -> float:
        if self.sq_ref_sum == 0.0:
            return 0.0 if self.sq_err_sum == 0.0 else math.inf

        return math.sqrt(self.sq_err_sum) / math.sqrt(self.sq_ref_sum)

    def merge(self, other: ErrorStats) -> ErrorStats:
        return ErrorStats(
            max_abs=max(self.max_abs, other.max_abs),
            count=self.count + other.count,
            abs_sum=self.abs_sum + other.abs_sum,
            sq_err_sum=self.sq_err_sum + other.sq_err_sum,
            sq_ref_sum=self.sq_ref_sum + other.sq_ref_sum,
        )


def compare_to_oracle(
        approx_scores: ScoreMatrix,
        exact_scores: DenseMatrix) -> ErrorStats:
    """
    Compare approximate scores with exact ones.

    Parameters
    ----------
    approx_scores: ScoreMatrix
        The approximate scores; its scale factor is applied to both
        operands and its MASKED entries are excluded.
    exact_scores: DenseMatrix
        The exact scores, in the same (unscaled) units.

    Returns
    -------
    ErrorStats
        max/mean absolute error and relative Frobenius error over the
        unmasked entries.
    """
    exact_scores = np.asarray(exact_scores)
    if approx_scores.shape != exact_scores.shape:
        raise ShapeError(
            "Cannot compare scores of shape {} with {}.".format(
                approx_scores.shape, exact_scores.shape))

    active = approx_scores.exactness != int(Exactness.MASKED)
    scale = approx_scores.scale
    approx = (approx_scores.scores * scale)[active].astype(np.float64)
    exact = (exact_scores.astype(approx_scores.scores.dtype) * scale)[
        active].astype(np.float64)
    return error_stats(approx, exact)


def error_stats(approx: np.ndarray, exact: np.ndarray) -> ErrorStats:
    """
    Error statistics of two equally shaped arrays.
    """
    approx = np.asarray(approx, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    if approx.shape != exact.shape:
        raise ShapeError("Cannot compare arrays of different sizes.")

    if approx.size == 0:
        return ErrorStats()

    diff = np.abs(approx - exact)
    return ErrorStats(
        max_abs=float(diff.max()),
        count=int(diff.size),
        abs_sum=float(diff.sum()),
        sq_err_sum=float(np.square(diff).sum()),
        sq_ref_sum=float(np.square(exact).sum()),
    )


@dataclass
class AttentionReport:
    """
    Measured sparsity, MAC counts and error of one attention run.

    Attributes
    ----------
    stage: str
        'prefill' or 'decode'.
    n: int
        The sequence length.
    window: int
        The full-attention window used in the sparsity formula.
    s_m: float
        Element sparsity of the delta columns (basis excluded).
    s_c: float
        Effective computational sparsity, s_m * (1 - window / n).
    s_m_with_basis: float
        Element sparsity counting the basis as a dense column.
    delta_nnz, delta_elements, basis_elements: int
        Counts behind s_m, kept for exact merging.
    mac_used, mac_skipped, mac_basis: int
        Multiply-accumulates performed, skipped, and spent on the basis.
    mac_exact: int
        The part of mac_used spent on exact products outside the
        delta recursion.
    mac_skipped_fraction: float
        mac_skipped over the work of the delta columns.
    err_max_abs, err_mean_abs, err_frobenius_rel: float
        Score error against the oracle, after scaling.
    output_err_max: float
        Largest absolute error of the attention output.
    heads: int
        Number of merged heads.
    flags: List[str]
        Conventions and clamps that apply to the figures.
    """

    stage: str
    n: int
    window: int
    s_m: float
    s_c: float
    s_m_with_basis: float = 1.0
    delta_nnz: int = 0
    delta_elements: int = 0
    basis_elements: int = 0
    mac_used: int = 0
    mac_skipped: int = 0
    mac_basis: int = 0
    mac_exact: int = 0
    mac_skipped_fraction: float = 0.0
    err_max_abs: float = 0.0
    err_mean_abs: float = 0.0
    err_frobenius_rel: float = 0.0
    output_err_max: float = 0.0
    err_count: int = 0
    err_abs_sum: float = 0.0
    err_sq_sum: float = 0.0
    ref_sq_sum: float = 0.0
    heads: int = 1
    flags: List[str] = field(default_factory=list)

    @property
    def errors(self) -> ErrorStats:
        return ErrorStats(
            max_abs=self.err_max_abs,
            count=self.err_count,
            abs_sum=self.err_abs_sum,
            sq_err_sum=self.err_sq_sum,
            sq_ref_sum=self.ref_sq_sum,
        )

    def as_dict(self) -> dict:
        """
        Convert the report to a JSON-compatible dict.
        """
        return asdict(self)

    @classmethod
    def from_dict(cls, jsonable: dict) -> AttentionReport:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in jsonable.items() if k in names})


def build_report(
        stage: Union[str, Stage],
        n: int,
        window: int,
        delta_nnz: int,
        delta_elements: int,
        basis_elements: int,
        counter: MacCounter,
        errors: Optional[ErrorStats] = None,
        output_err_max: float = 0.0,
        flags: Iterable[str] = ()) -> AttentionReport:
    """
    Assemble a report from raw counts.

    Note
    ----
    s_m is 1.0 by convention when there are no delta elements
    (a single position); the report is then flagged.
    """
    stage = Stage.from_name(stage)
    flags = set(flags)
    flags.add(FLAG_BASIS_DENSE)
    if delta_elements == 0:
        s_m = 1.0
        flags.add(FLAG_SINGLE_POSITION)
        logger.warning("Single position; s_m is 1.0 by convention.")
    else:
        s_m = 1.0 - delta_nnz / delta_elements

    if window > n:
        flags.add(FLAG_WINDOW_EXCEEDS_LENGTH)

    dense_total = delta_elements + basis_elements
    s_m_with_basis = 1.0 - (delta_nnz + basis_elements) / dense_total \
        if dense_total else 1.0

    if errors is None:
        errors = ErrorStats()
        flags.add(FLAG_NOT_COMPARED)

    return AttentionReport(
        stage=stage.value,
        n=int(n),
        window=int(window),
        s_m=s_m,
        s_c=computational_sparsity(s_m, window, n, stage),
        s_m_with_basis=s_m_with_basis,
        delta_nnz=int(delta_nnz),
        delta_elements=int(delta_elements),
        basis_elements=int(basis_elements),
        mac_used=counter.mac,
        mac_skipped=counter.skipped,
        mac_basis=counter.basis,
        mac_exact=counter.exact,
        mac_skipped_fraction=counter.delta_skipped_fraction,
        err_max_abs=errors.max_abs,
        err_mean_abs=errors.mean_abs,
        err_frobenius_rel=errors.frobenius_rel,
        output_err_max=float(output_err_max),
        err_count=errors.count,
        err_abs_sum=errors.abs_sum,
        err_sq_sum=errors.sq_err_sum,
        ref_sq_sum=errors.sq_ref_sum,
        flags=sorted(flags),
    )


def _combine(
        reports: List[AttentionReport],
        n: int,
        window: int,
        delta_nnz: int,
        delta_elements: int,
        basis_elements: int,
        heads: int) -> AttentionReport:
    errors = ErrorStats()
    counter = MacCounter()
    flags = set()
    for report in reports:
        errors = errors.merge(report.errors)
        counter.merge(MacCounter(
            report.mac_used, report.mac_skipped, report.mac_basis,
            report.mac_exact))
        flags.update(report.flags)

    not_compared = all(FLAG_NOT_COMPARED in r.flags for r in reports)
    flags.discard(FLAG_NOT_COMPARED)
    if not_compared:
        flags.add(FLAG_NOT_COMPARED)

    merged = build_report(
        stage=reports[0].stage,
        n=n,
        window=window,
        delta_nnz=delta_nnz,
        delta_elements=delta_elements,
        basis_elements=basis_elements,
        counter=counter,
        errors=errors,
        output_err_max=max(r.output_err_max for r in reports),
        flags=flags,
    )
    merged.heads = heads
    return merged


def merge_reports(reports: List[AttentionReport]) -> AttentionReport:
    """
    Merge reports of several heads.

    Parameters
    ----------
    reports: List[AttentionReport]
        Reports of the same stage, sequence length and window.

    Returns
    -------
    AttentionReport
        MAC counts and element counts summed, s_m recomputed from the
        summed counts, error maxima maximized and means weighted by
        the number of compared entries.
    """
    if not reports:
        raise ConfigError("There are no reports to merge.")

    first = reports[0]
    for report in reports[1:]:
        if report.stage != first.stage:
            raise ConfigError("Cannot merge reports of different stages.")

        if report.n != first.n or report.window != first.window:
            raise ConfigError(
                "Cannot merge reports of different lengths or windows.")

    return _combine(
        reports,
        n=first.n,
        window=first.window,
        delta_nnz=sum(r.delta_nnz for r in reports),
        delta_elements=sum(r.delta_elements for r in reports),
        basis_elements=sum(r.basis_elements for r in reports),
        heads=sum(r.heads for r in reports),
    )


def combine_decode_steps(steps: List[AttentionReport]) -> AttentionReport:
    """
    Summarize the decode steps of one head.

    MAC counts and errors are accumulated over all steps; length,
    window and sparsity are those of the last step, whose cache holds
    the whole delta history.
    """
    if not steps:
        raise ConfigError("There are no decode steps to combine.")

    for step in steps:
        if step.stage != Stage.DECODE.value:
            raise ConfigError("Only decode reports can be combined.")

    last = steps[-1]
    return _combine(
        steps,
        n=last.n,
        window=last.window,
        delta_nnz=last.delta_nnz,
        delta_elements=last.delta_elements,
        basis_elements=last.basis_elements,
        heads=last.heads,
    )
