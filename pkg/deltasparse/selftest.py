"""
Built-in invariant checks, run by ``deltasparse selftest``.
"""
from logging import getLogger
import os
import tempfile
from typing import Callable, List, Tuple

import numpy as np
from tqdm import tqdm

from deltasparse.cache import cache_init
from deltasparse.config import ExperimentConfig
from deltasparse.encoding import (
    build_delta_encoding, check_hold_rule, delta_encode_step,
    element_sparsity, init_state, reconstruct)
from deltasparse.exceptions import InvariantViolation
from deltasparse.harness import run_experiment
from deltasparse.hybrid import (
    HybridConfig, decode_step, jigsaw_map, prefill_attention)
from deltasparse.matmul import Exactness, delta_score_columns
from deltasparse.synthetic import make_generator, random_walk_keys
from deltasparse.tensor import SCALAR, dense_attention, dense_scores
from deltasparse.tensorfile import load_tensor, save_tensor

logger = getLogger(__name__)


def _streams(seed: int, n: int, d: int, sigma: float = 0.0):
    rng = make_generator(seed)
    q = rng.standard_normal((n, d)).astype(SCALAR)
    if sigma > 0.0:
        k = random_walk_keys(rng, n, d, sigma)
    else:
        k = rng.standard_normal((n, d)).astype(SCALAR)

    v = rng.standard_normal((n, d)).astype(SCALAR)
    return q, k, v


def check_zero_threshold(seed: int) -> str:
    q, k, v = _streams(seed, 64, 64)
    result = prefill_attention(q, k, v, HybridConfig(theta=0.0))
    err = float(np.abs(result.output - dense_attention(q, k, v)).max())
    if err > 1e-4:
        raise InvariantViolation(
            "theta=0 output differs from dense by {}".format(err))

    return "max output error {:.3g}".format(err)


def check_reconstruction(seed: int) -> str:
    _, k, _ = _streams(seed, 48, 16)
    enc = build_delta_encoding(k, 0.0)
    if reconstruct(enc).tobytes() != k.tobytes():
        raise InvariantViolation("theta=0 reconstruction is not exact")

    return "bit-exact"


def check_basis_column(seed: int) -> str:
    q, k, _ = _streams(seed, 32, 16, sigma=0.05)
    enc = build_delta_encoding(k, 0.2)
    column = delta_score_columns(q, enc).scores[:, 0]
    if column.tobytes() != dense_scores(q, k)[:, 0].tobytes():
        raise InvariantViolation("basis column is not exact")

    return "bit-exact"


def check_hold_rule_bound(seed: int) -> str:
    _, k, _ = _streams(seed, 128, 16, sigma=0.05)
    theta = 0.1
    state = init_state(k[0])
    for t in range(1, k.shape[0]):
        _, state = delta_encode_step(k[t], state, theta)
        worst = check_hold_rule(state, k[t], theta)
        if worst is not None:
            raise InvariantViolation(
                "reference off by {} at {}".format(worst, t))

    return "bound holds at {} steps".format(k.shape[0] - 1)


def check_monotone_sparsity(seed: int) -> str:
    _, k, _ = _streams(seed, 128, 16, sigma=0.05)
    sparsity = [element_sparsity(build_delta_encoding(k, theta))
                for theta in (0.0, 0.02, 0.05, 0.1, 0.2, 0.5)]
    if any(b < a for a, b in zip(sparsity, sparsity[1:])):
        raise InvariantViolation(
            "sparsity is not monotone: {}".format(sparsity))

    return "s_m from {:.3f} to {:.3f}".format(sparsity[0], sparsity[-1])


def check_cache_consistency(seed: int) -> str:
    q, k, v = _streams(seed, 24, 8, sigma=0.05)
    cfg = HybridConfig(theta=0.1, w_d=3)
    prefilled = prefill_attention(q, k, v, cfg, compare=False).cache
    cache = cache_init(k[0], v[0], cfg.w_d, cfg.theta)
    for t in range(1, k.shape[0]):
        decode_step(q[t], k[t], v[t], cache, cfg)

    if cache != prefilled:
        raise InvariantViolation("prefill and decode caches differ")

    return "{} positions".format(cache.length)


def check_score_error_bound(seed: int) -> str:
    q, k, v = _streams(seed, 40, 16, sigma=0.05)
    theta = 0.1
    result = prefill_attention(
        q, k, v, HybridConfig(theta=theta, gamma=0.1), compare=False)
    approx = result.scores.mask(Exactness.APPROXIMATE)
    gap = np.abs(result.scores.scaled().astype(np.float64) - (
        dense_scores(q, k) * result.scores.scale).astype(np.float64))
    bound = theta * np.abs(q).sum(axis=1, keepdims=True) / np.sqrt(16)
    slack = bound + 1e-4
    if np.any(gap[approx] > np.broadcast_to(slack, gap.shape)[approx]):
        raise InvariantViolation("score error exceeds theta * |q|_1")

    return "{} approximate entries".format(int(approx.sum()))


def check_strategy_exactness(seed: int) -> str:
    q, k, v = _streams(seed, 20, 8, sigma=0.05)
    exact = dense_scores(q, k)
    for strategy, axis, index in (
            ('top-down-key', 'column', 0),
            ('bottom-up-query', 'row', 19),
            ('top-down-query', 'row', 0)):
        cfg = HybridConfig(theta=0.2, strategy=strategy)
        result = prefill_attention(q, k, v, cfg, compare=False)
        if (result.basis_axis, result.basis_index) != (axis, index):
            raise InvariantViolation(
                "{} reports the basis at {} {}".format(
                    strategy, result.basis_axis, result.basis_index))

        line = result.scores.scores[:, 0] if axis == 'column' \
            else result.delta_scores.scores[index]
        expected = exact[:, 0] if axis == 'column' else exact[index]
        if line.tobytes() != expected.tobytes():
            raise InvariantViolation(
                "{} basis {} is not exact".format(strategy, axis))

    return "3 strategies"


def check_mac_accounting(seed: int) -> str:
    q, k, v = _streams(seed, 50, 8, sigma=0.05)
    result = prefill_attention(
        q, k, v, HybridConfig(theta=0.1, gamma=0.1), compare=False)
    counter = result.counter
    covered = 50 * 51 // 2 * 8
    if counter.mac + counter.skipped != covered:
        raise InvariantViolation(
            "{} does not cover {} MACs".format(counter, covered))

    # Column t is visited by every row below its diagonal block.
    window = result.window
    predicted = 0
    for column in result.encoding.columns:
        rows = 50 - min((column.index // window + 1) * window, 50)
        predicted += rows * (8 - column.nnz)

    if counter.skipped != predicted:
        raise InvariantViolation(
            "skipped {} MACs, the delta columns predict {}".format(
                counter.skipped, predicted))

    q, k, v = _streams(seed, 128, 32, sigma=0.05)
    result = prefill_attention(
        q, k, v, HybridConfig(theta=0.1, gamma=0.25), compare=False)
    fraction = result.report.mac_skipped_fraction
    s_m = element_sparsity(result.encoding)
    if abs(fraction - s_m) > 0.02:
        raise InvariantViolation(
            "skipped fraction {:.4f} differs from s_m {:.4f}".format(
                fraction, s_m))

    return "{} used, {} skipped, fraction {:.3f}".format(
        counter.mac, counter.skipped, fraction)


def check_tensor_file(seed: int) -> str:
    rng = make_generator(seed)
    tensor = rng.standard_normal((3, 7, 5)).astype(SCALAR)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'roundtrip.dtns')
        save_tensor(path, tensor)
        loaded = load_tensor(path)

    if loaded.shape != tensor.shape or loaded.tobytes() != tensor.tobytes():
        raise InvariantViolation("tensor file round trip is not exact")

    return "bit-exact"


def check_jigsaw_partition(seed: int) -> str:
    n, w = 37, 5
    codes = jigsaw_map(n, w)
    full = int((codes == int(Exactness.FULL)).sum())
    approx = int((codes == int(Exactness.APPROXIMATE)).sum())
    masked = int((codes == int(Exactness.MASKED)).sum())
    if full + approx != n * (n + 1) // 2 or masked != n * (n - 1) // 2:
        raise InvariantViolation("jigsaw map does not partition the mask")

    return "{} exact, {} approximate".format(full, approx)


def check_determinism(seed: int) -> str:
    cfg = ExperimentConfig(
        seed=seed, n=32, d_head=8, heads=2, decode_steps=4, workers=2)
    first = run_experiment(cfg).as_dict()
    second = run_experiment(cfg).as_dict()
    if first != second:
        raise InvariantViolation("equal runs gave different reports")

    return "reports identical"


CHECKS: List[Tuple[str, Callable[[int], str]]] = [
    ('zero-threshold', check_zero_threshold),
    ('reconstruction', check_reconstruction),
    ('basis-column', check_basis_column),
    ('hold-rule', check_hold_rule_bound),
    ('monotone-sparsity', check_monotone_sparsity),
    ('cache-consistency', check_cache_consistency),
    ('score-error-bound', check_score_error_bound),
    ('strategy-exactness', check_strategy_exactness),
    ('mac-accounting', check_mac_accounting),
    ('tensor-file', check_tensor_file),
    ('jigsaw-partition', check_jigsaw_partition),
    ('determinism', check_determinism),
]


def run_selftest(
        seed: int = 0,
        progress: bool = True) -> List[Tuple[str, bool, str]]:
    """
    Run every built-in check.

    Returns
    -------
    List[Tuple[str, bool, str]]
        (name, passed, detail) per check.
    """
    outcomes = []
    for name, check in tqdm(CHECKS, mininterval=0.5, ascii=True,
                            disable=not progress):
        try:
            outcomes.append((name, True, check(seed)))
        except InvariantViolation as e:
            logger.warning("{} failed: {}".format(name, e))
            outcomes.append((name, False, str(e)))

    return outcomes
