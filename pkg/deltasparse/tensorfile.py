"""
Reading and writing tensor files.

Layout (little-endian)::

    magic    4 bytes  b'DTNS'
    version  u16      1
    ndim     u16
    dims     u64 x ndim
    payload  f32 x prod(dims), row-major
"""
from functools import reduce
from logging import getLogger
import operator
from pathlib import Path
import struct
from typing import Optional, Union

import numpy as np

from deltasparse.exceptions import (
    ConfigError, ShapeError, TensorContentError, TensorMagicError,
    TensorSizeError, TensorVersionError)
from deltasparse.tensor import SCALAR, DenseMatrix, as_matrix

logger = getLogger(__name__)

MAGIC = b'DTNS'
VERSION = 1
_HEADER = struct.Struct('<4sHH')


def save_tensor(path: Union[str, Path], tensor: np.ndarray) -> None:
    """
    Write a float32 tensor of any rank.

    Parameters
    ----------
    path: str, Path
        The output file.
    tensor: np.ndarray
        The tensor; it is converted to float32.
    """
    tensor = np.ascontiguousarray(tensor, dtype=SCALAR)
    header = _HEADER.pack(MAGIC, VERSION, tensor.ndim)
    dims = struct.pack('<{}Q'.format(tensor.ndim), *tensor.shape)
    with open(path, 'wb') as f:
        f.write(header)
        f.write(dims)
        f.write(tensor.astype('<f4').tobytes())

    logger.debug("Saved tensor {} to '{}'".format(tensor.shape, path))


def load_tensor(
        path: Union[str, Path],
        check_finite: bool = False) -> np.ndarray:
    """
    Read a tensor file.

    Parameters
    ----------
    path: str, Path
        The file.
    check_finite: bool, optional (default=False)
        Reject payloads holding NaN or Inf.

    Returns
    -------
    np.ndarray
        A float32 array with the dimensions stored in the header.

    Raises
    ------
    TensorMagicError, TensorVersionError, TensorSizeError
        When the header or the payload length is not valid.
    TensorContentError
        When check_finite is set and the payload is not finite.
    """
    with open(path, 'rb') as f:
        data = f.read()

    if data[:4] != MAGIC:
        raise TensorMagicError(
            "'{}' is not a tensor file.".format(path))

    if len(data) < _HEADER.size:
        raise TensorSizeError("'{}' has a truncated header.".format(path))

    _, version, ndim = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise TensorVersionError(
            "'{}' has format version {}, expected {}.".format(
                path, version, VERSION))

    offset = _HEADER.size + 8 * ndim
    if len(data) < offset:
        raise TensorSizeError("'{}' has a truncated header.".format(path))

    dims = struct.unpack_from('<{}Q'.format(ndim), data, _HEADER.size)
    count = reduce(operator.mul, dims, 1)
    if len(data) - offset != 4 * count:
        raise TensorSizeError(
            "'{}' holds {} payload bytes but dims {} need {}.".format(
                path, len(data) - offset, dims, 4 * count))

    payload = np.frombuffer(data, dtype='<f4', count=count, offset=offset)
    if check_finite and not np.all(np.isfinite(payload)):
        raise TensorContentError(
            "'{}' holds NaN or Inf entries.".format(path))

    return payload.astype(SCALAR).reshape(dims)


def load_matrix(
        path: Union[str, Path],
        head: Optional[int] = None) -> DenseMatrix:
    """
    Read a 2-D matrix, or one head of a 3-D (heads, n, d) tensor.
    """
    tensor = load_tensor(path, check_finite=True)
    if tensor.ndim == 3:
        if head is None:
            raise ShapeError(
                "'{}' holds {} heads; choose one.".format(
                    path, tensor.shape[0]))

        tensor = tensor[head]

    return as_matrix(tensor)


def tensor_io(
        action: str,
        path: Union[str, Path],
        tensor: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """
    Load or save a tensor file.

    Parameters
    ----------
    action: str
        'load' or 'save'.
    path: str, Path
        The file.
    tensor: np.ndarray, optional
        The tensor to save.
    """
    if action == 'load':
        return load_tensor(path)

    if action == 'save':
        if tensor is None:
            raise ShapeError("Nothing to save.")

        save_tensor(path, tensor)
        return None

    raise ConfigError("Unknown action '{}'.".format(action))
