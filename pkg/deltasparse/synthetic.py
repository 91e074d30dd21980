"""
Synthetic query, key and value streams.

Real activations are not available here, so keys come from a
stochastic process whose step size controls how much adjacent keys
resemble each other.
"""
from logging import getLogger
from typing import Tuple

import numpy as np

from deltasparse.config import ExperimentConfig
from deltasparse.exceptions import ConfigError, ShapeError
from deltasparse.tensor import SCALAR
from deltasparse.tensorfile import load_tensor

logger = getLogger(__name__)


def make_generator(seed) -> np.random.Generator:
    """
    Create the generator used everywhere in the package.
    """
    return np.random.Generator(np.random.PCG64(seed))


def head_generators(seed: int, heads: int):
    """
    Independent generators, one per head, derived from one seed.
    """
    children = np.random.SeedSequence(seed).spawn(heads)
    return [make_generator(child) for child in children]


def random_walk_keys(
        rng: np.random.Generator,
        length: int,
        d_head: int,
        sigma: float) -> np.ndarray:
    """
    Keys following k(t) = k(t-1) + N(0, sigma^2), k(0) ~ N(0, 1).

    The walk is accumulated at double precision and rounded once.
    """
    start = rng.standard_normal(d_head)
    if sigma > 0.0:
        steps = rng.normal(0.0, sigma, size=(length - 1, d_head))
    else:
        steps = np.zeros((length - 1, d_head))

    walk = np.cumsum(np.vstack([start[np.newaxis, :], steps]), axis=0)
    return walk.astype(SCALAR)


def gen_head(
        rng: np.random.Generator,
        length: int,
        d_head: int,
        key_process: str,
        sigma: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Generate the streams of one head.

    Returns
    -------
    (np.ndarray, np.ndarray, np.ndarray)
        q, k and v, each of shape (length, d_head).
    """
    q = rng.standard_normal((length, d_head)).astype(SCALAR)
    if key_process == 'random-walk':
        k = random_walk_keys(rng, length, d_head, sigma)
    elif key_process == 'iid-gaussian':
        k = rng.standard_normal((length, d_head)).astype(SCALAR)
    else:
        raise ConfigError(
            "'{}' cannot be generated.".format(key_process))

    v = rng.standard_normal((length, d_head)).astype(SCALAR)
    return q, k, v


def _as_heads(tensor: np.ndarray, name: str) -> np.ndarray:
    if tensor.ndim == 2:
        return tensor[np.newaxis, :, :]

    if tensor.ndim != 3:
        raise ShapeError(
            "The {} tensor must have 2 or 3 dimensions.".format(name))

    return tensor


def load_streams(
        cfg: ExperimentConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Read q, k and v from the tensor files named in the configuration.
    """
    q = _as_heads(load_tensor(cfg.q_file, check_finite=True), 'query')
    k = _as_heads(load_tensor(cfg.k_file, check_finite=True), 'key')
    v = _as_heads(load_tensor(cfg.v_file, check_finite=True), 'value')
    if q.shape != k.shape or q.shape[:2] != v.shape[:2]:
        raise ShapeError(
            "Tensor shapes {}, {} and {} do not agree.".format(
                q.shape, k.shape, v.shape))

    return q, k, v


def gen_synthetic(
        cfg: ExperimentConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Produce the token streams of an experiment.

    Parameters
    ----------
    cfg: ExperimentConfig
        Uses seed, n, decode_steps, heads, d_head, key_process and
        sigma.

    Returns
    -------
    (np.ndarray, np.ndarray, np.ndarray)
        q, k and v of shape (heads, n + decode_steps, d_head).
        The same configuration always yields the same bits.
    """
    if cfg.key_process == 'file':
        return load_streams(cfg)

    length = cfg.n + cfg.decode_steps
    streams = [
        gen_head(rng, length, cfg.d_head, cfg.key_process, cfg.sigma)
        for rng in head_generators(cfg.seed, cfg.heads)]
    q, k, v = (np.stack(part) for part in zip(*streams))
    logger.debug("Generated {} heads of {} tokens".format(
        cfg.heads, length))
    return q, k, v
