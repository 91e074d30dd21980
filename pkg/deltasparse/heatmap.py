"""
CSV dumps of score, probability and exactness matrices.
"""
import csv
from logging import getLogger
from pathlib import Path
from typing import Union

import numpy as np

from deltasparse.exceptions import ConfigError, ShapeError
from deltasparse.hybrid import PrefillResult, jigsaw_map
from deltasparse.tensor import (
    SCALAR, CausalMask, attention_scale, dense_scores, row_softmax)

logger = getLogger(__name__)

KINDS = ('exactness', 'scores', 'probs')


def heatmap_matrix(result: PrefillResult, kind: str) -> np.ndarray:
    """
    Select the matrix of a prefill result to dump.

    Parameters
    ----------
    result: PrefillResult
        The prefill result.
    kind: str
        'exactness' for the codes 0 (masked), 1 (approximate) and
        2 (exact), 'scores' for the scaled scores or 'probs' for the
        attention probabilities.
    """
    if kind == 'exactness':
        return result.scores.exactness

    if kind == 'scores':
        return result.scores.scaled()

    if kind == 'probs':
        return row_softmax(
            result.scores.scaled(), CausalMask(result.scores.shape[0]))

    raise ConfigError(
        "'{}' is not a heatmap kind; choose from {}.".format(
            kind, ', '.join(KINDS)))


def oracle_heatmap_matrix(
        q: np.ndarray, k: np.ndarray, kind: str) -> np.ndarray:
    """
    The same matrices for dense attention, where every unmasked entry
    is exact.
    """
    n = q.shape[0]
    if kind == 'exactness':
        return jigsaw_map(n, n)

    scores = dense_scores(q, k) * attention_scale(q.shape[1])
    if kind == 'scores':
        return scores

    if kind == 'probs':
        return row_softmax(scores, CausalMask(n))

    raise ConfigError(
        "'{}' is not a heatmap kind; choose from {}.".format(
            kind, ', '.join(KINDS)))


def dump_heatmap(matrix: np.ndarray, path: Union[str, Path]) -> None:
    """
    Write a matrix as CSV, one line per row.

    Integer matrices are written as integers, float matrices with
    enough digits to be read back exactly.
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ShapeError("Only 2-D matrices can be dumped.")

    if np.issubdtype(matrix.dtype, np.integer):
        def fmt(x):
            return str(int(x))
    else:
        def fmt(x):
            return repr(float(x))

    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        for row in matrix:
            writer.writerow([fmt(x) for x in row])

    logger.debug("Dumped {} heatmap to '{}'".format(matrix.shape, path))


def load_heatmap(
        path: Union[str, Path],
        integer: bool = False) -> np.ndarray:
    """
    Read a matrix written by `dump_heatmap`.

    Parameters
    ----------
    path: str, Path
        The CSV file.
    integer: bool, optional (default=False)
        Read int8 codes instead of float32 values.
    """
    with open(path, 'r', newline='') as f:
        rows = [row for row in csv.reader(f) if row]

    if integer:
        return np.array(
            [[int(x) for x in row] for row in rows], dtype=np.int8)

    return np.array([[float(x) for x in row] for row in rows], dtype=SCALAR)
