"""
Experiment driver: generate streams, run every head, check invariants
and write reports.
"""
from concurrent.futures import ThreadPoolExecutor
import csv
import datetime
import itertools
import json
from logging import getLogger
import os
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from deltasparse.cache import cache_memory_report
from deltasparse.config import ExperimentConfig
from deltasparse.encoding import ConstructionStrategy, check_hold_rule
from deltasparse.engine import HeadResult, Scenario, run_head
from deltasparse.exceptions import InvariantViolation, ShapeError
from deltasparse.hybrid import HybridConfig
from deltasparse.matmul import Exactness
from deltasparse.report import (
    AttentionReport, computational_sparsity, merge_reports)
from deltasparse.synthetic import gen_synthetic
from deltasparse.tensor import dense_scores
from deltasparse.tensorfile import save_tensor

logger = getLogger(__name__)

SWEEP_COLUMNS = [
    'theta', 'gamma', 'w_d', 'scenario', 'n', 'window', 's_m', 's_c',
    'mac_used', 'mac_skipped', 'err_max_abs', 'err_mean_abs',
    'err_frobenius_rel', 'output_err_max',
    'decode_n', 'decode_window', 'decode_s_m', 'decode_s_c',
    'decode_mac_used', 'decode_mac_skipped', 'decode_err_max_abs',
    'decode_output_err_max',
]


class ExperimentResult(object):
    """
    The outcome of one experiment.

    Attributes
    ----------
    config: dict
        The configuration values used.
    prefill: AttentionReport
        Prefill figures merged over heads.
    decode: AttentionReport or None
        Decode figures merged over heads; None without decode steps.
    heads: List[HeadResult]
        Per-head results, in head order.
    """

    def __init__(self, config: dict, prefill: AttentionReport,
                 decode: Optional[AttentionReport],
                 heads: List[HeadResult]):
        self.config = config
        self.prefill = prefill
        self.decode = decode
        self.heads = heads

    def as_dict(self) -> dict:
        """
        The report as a JSON-compatible dict without run-dependent
        values, so that equal runs give equal reports.
        """
        heads = []
        for i, head in enumerate(self.heads):
            entry = {
                'head': i,
                'prefill': head.prefill.report.as_dict(),
                'decode': head.decode_report.as_dict()
                if head.decode_report else None,
            }
            cache = head.head.cache
            if cache is not None and cache.initialized:
                entry['cache_memory'] = cache_memory_report(cache)

            heads.append(entry)

        return {
            'config': self.config,
            'prefill': self.prefill.as_dict(),
            'decode': self.decode.as_dict() if self.decode else None,
            'heads': heads,
        }


def check_head_invariants(
        result: HeadResult,
        q: np.ndarray,
        k: np.ndarray,
        n_prefill: int,
        cfg: HybridConfig,
        scenario: Scenario) -> None:
    """
    Verify the runtime invariants of one head.

    Raises
    ------
    InvariantViolation
        When a check fails.
    """
    prefill = result.prefill
    report = prefill.report
    expected = computational_sparsity(report.s_m, report.window, report.n)
    if report.s_c != expected:
        raise InvariantViolation(
            "s_c={} but s_m*(1-W/n)={}.".format(report.s_c, expected))

    n = n_prefill
    d_head = q.shape[1]
    if cfg.strategy is ConstructionStrategy.TOP_DOWN_KEY:
        covered = n * (n + 1) // 2 * d_head
    else:
        # Full delta rectangle plus the exact blocks.
        covered = (n * n + _exact_entries(n, prefill.window)) * d_head

    if report.mac_used + report.mac_skipped != covered:
        raise InvariantViolation(
            "MAC counts {} + {} do not cover {} dense MACs.".format(
                report.mac_used, report.mac_skipped, covered))

    exact = dense_scores(q[:n], k[:n])
    scores = prefill.scores
    full = scores.mask(Exactness.FULL)
    if scores.scores[full].tobytes() != exact[full].tobytes():
        raise InvariantViolation("Exact-window scores differ from exact.")

    if prefill.basis_axis == 'column':
        line = prefill.delta_scores.scores[:, 0]
        active = prefill.delta_scores.exactness[:, 0] != int(Exactness.MASKED)
        if line[active].tobytes() != exact[active, 0].tobytes():
            raise InvariantViolation("Basis column scores are not exact.")

    cache = result.head.cache
    if scenario is Scenario.END_TO_END and cache is not None:
        total = n + result.decode_outputs.shape[0]
        if cache.length != total or \
                len(cache.delta_columns) != total - 1 or \
                len(cache.exact_ring) != min(cfg.w_d, total):
            raise InvariantViolation(
                "Cache holds {} positions, {} deltas and {} exact keys "
                "after {} tokens.".format(
                    cache.length, len(cache.delta_columns),
                    len(cache.exact_ring), total))

        worst = check_hold_rule(cache.state, k[total - 1], cfg.theta)
        if worst is not None:
            raise InvariantViolation(
                "Held reference is {} away from the last key.".format(worst))


def _exact_entries(n: int, window: int) -> int:
    count = 0
    for start in range(0, n, window):
        size = min(window, n - start)
        count += size * (size + 1) // 2

    return count


def _prepare_streams(
        cfg: ExperimentConfig,
        tensors: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    if tensors is None:
        tensors = gen_synthetic(cfg)

    q, k, v = tensors
    n = cfg.n
    total = n + cfg.decode_steps
    if q.shape[1] < total:
        raise ShapeError(
            "The streams hold {} tokens but {} are needed.".format(
                q.shape[1], total))

    return q, k, v, n, total


def run_experiment(
        cfg: ExperimentConfig,
        output_dir: Union[str, Path, None] = None,
        tensors: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
        check: bool = True,
        compare: bool = True) -> ExperimentResult:
    """
    Run one experiment.

    Parameters
    ----------
    cfg: ExperimentConfig
        The configuration.
    output_dir: str, Path, optional
        If given, report.json, metadata.json and the generated tensors
        are written there.
    tensors: (np.ndarray, np.ndarray, np.ndarray), optional
        q, k and v of shape (heads, tokens, d_head). Generated from
        the configuration if omitted.
    check: bool, optional (default=True)
        Verify the runtime invariants of every head.
    compare: bool, optional (default=True)
        Compare with the dense oracle.

    Returns
    -------
    ExperimentResult
    """
    cfg.check()
    hybrid = cfg.hybrid()
    scenario = Scenario.from_name(cfg.scenario)
    generated = tensors is None and cfg.key_process != 'file'
    q, k, v, n, total = _prepare_streams(cfg, tensors)

    def _one_head(h: int) -> HeadResult:
        result = run_head(
            q[h, :total], k[h, :total], v[h, :total], n, hybrid,
            scenario=scenario, compare=compare)
        if check:
            check_head_invariants(
                result, q[h], k[h], n, hybrid, scenario)

        logger.debug("Head {}: {}".format(h, result.prefill))
        return result

    heads = q.shape[0]
    with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
        results = list(executor.map(_one_head, range(heads)))

    prefill = merge_reports([r.prefill.report for r in results])
    decode_reports = [r.decode_report for r in results
                      if r.decode_report is not None]
    decode = merge_reports(decode_reports) if decode_reports else None
    experiment = ExperimentResult(cfg.as_dict(), prefill, decode, results)

    if output_dir is not None:
        write_outputs(experiment, output_dir,
                      (q, k, v) if generated else None)

    return experiment


def write_json(path: Union[str, Path], content: dict) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(content, f, indent=2, sort_keys=True)
        f.write('\n')


def write_outputs(
        experiment: ExperimentResult,
        output_dir: Union[str, Path],
        tensors: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None
) -> None:
    """
    Write the reports and, if given, the tensors of an experiment.
    """
    from deltasparse import __version__

    os.makedirs(output_dir, exist_ok=True)
    output_dir = Path(output_dir)
    write_json(output_dir / 'report.json', experiment.as_dict())
    write_json(output_dir / 'metadata.json', {
        'version': __version__,
        'created': datetime.datetime.now(
            datetime.timezone.utc).isoformat(),
    })
    if tensors is not None:
        for name, tensor in zip(('q', 'k', 'v'), tensors):
            save_tensor(output_dir / '{}.dtns'.format(name), tensor)

    logger.info("Wrote results to '{}'".format(output_dir))


def sweep_row(
        cfg: ExperimentConfig,
        experiment: ExperimentResult) -> dict:
    """
    One CSV row of a sweep.
    """
    pre = experiment.prefill
    row = {
        'theta': cfg.theta,
        'gamma': cfg.gamma,
        'w_d': cfg.w_d,
        'scenario': cfg.scenario,
        'n': pre.n,
        'window': pre.window,
        's_m': pre.s_m,
        's_c': pre.s_c,
        'mac_used': pre.mac_used,
        'mac_skipped': pre.mac_skipped,
        'err_max_abs': pre.err_max_abs,
        'err_mean_abs': pre.err_mean_abs,
        'err_frobenius_rel': pre.err_frobenius_rel,
        'output_err_max': pre.output_err_max,
    }
    dec = experiment.decode
    row.update({
        'decode_n': dec.n if dec else '',
        'decode_window': dec.window if dec else '',
        'decode_s_m': dec.s_m if dec else '',
        'decode_s_c': dec.s_c if dec else '',
        'decode_mac_used': dec.mac_used if dec else '',
        'decode_mac_skipped': dec.mac_skipped if dec else '',
        'decode_err_max_abs': dec.err_max_abs if dec else '',
        'decode_output_err_max': dec.output_err_max if dec else '',
    })
    return row


def _csv_value(value):
    if isinstance(value, float):
        return repr(value)

    return value


def write_sweep_csv(path: Union[str, Path], rows: Iterable[dict]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_value(v) for k, v in row.items()})


def sweep(
        cfg: ExperimentConfig,
        thetas: Sequence[float] = (),
        gammas: Sequence[float] = (),
        w_ds: Sequence[int] = (),
        path: Union[str, Path, None] = None,
        progress: bool = False) -> List[dict]:
    """
    Run the experiment over the cartesian product of tunables.

    Parameters
    ----------
    cfg: ExperimentConfig
        The base configuration. An empty sequence keeps its value.
    thetas, gammas, w_ds: Sequence
        The values to sweep.
    path: str, Path, optional
        If given, the rows are written there as CSV.
    progress: bool, optional (default=False)
        Show a progress bar.

    Returns
    -------
    List[dict]
        One row per combination, in product order.
    """
    thetas = list(thetas) or [cfg.theta]
    gammas = list(gammas) or [cfg.gamma]
    w_ds = list(w_ds) or [cfg.w_d]
    combos = list(itertools.product(thetas, gammas, w_ds))
    tensors = gen_synthetic(cfg)

    rows = []
    with tqdm(total=len(combos), mininterval=0.5, ascii=True,
              disable=not progress) as pbar:
        for theta, gamma, w_d in combos:
            point = cfg.copy(theta=theta, gamma=gamma, w_d=w_d)
            experiment = run_experiment(point, tensors=tensors)
            rows.append(sweep_row(point, experiment))
            pbar.update(1)

    if path is not None:
        write_sweep_csv(path, rows)
        logger.info("Wrote {} sweep rows to '{}'".format(len(rows), path))

    return rows
