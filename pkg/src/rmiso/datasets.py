"""Readers for the on-disk formats: dense CSV matrices, sparse svmlight text, IDX images."""
from __future__ import annotations

import gzip
import struct

import numpy as np
from sklearn.datasets import load_svmlight_file

from .exceptions import ConfigurationError

__all__ = ["read_dense_csv", "write_dense_csv", "read_svmlight", "read_idx",
           "images_to_shards"]

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_dense_csv(path, header: bool = False) -> np.ndarray:
    """Comma separated matrix, one row per line."""
    data = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2)
    return data.astype(float)


def write_dense_csv(path, X, header=None) -> None:
    with open(path, "w") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(X):
            fh.write(",".join(format(float(x), ".17g") for x in row) + "\n")


def read_svmlight(path, n_features=None):
    """``label index:value`` rows; labels mapped to +-1 (``0`` becomes ``-1``)."""
    X, y = load_svmlight_file(str(path), n_features=n_features)
    y = np.where(y > 0, 1.0, -1.0)
    return X.tocsr(), y


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip compressed)."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise ConfigurationError(f"{path}: bad IDX magic")
    dtype = _IDX_TYPES.get(buf[2])
    if dtype is None:
        raise ConfigurationError(f"{path}: unknown IDX data type 0x{buf[2]:02x}")
    ndim = buf[3]
    dims = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    data = np.frombuffer(buf, dtype=dtype, offset=4 + 4 * ndim, count=int(np.prod(dims)))
    return data.reshape(dims)


def images_to_shards(images, labels, batch: int = 100, scale: float = 255.0):
    """Group images by label into batches and concatenate each batch horizontally.

    ``images`` has shape ``(n, h, w)``; each shard is ``h x (w * batch)`` with
    values divided by ``scale``.  Returns ``(shards, shard_labels)``.
    """
    from .problems import shard_by_label

    images = np.asarray(images, dtype=float) / scale
    groups = shard_by_label(labels, batch)
    shards = [np.concatenate(list(images[g]), axis=1) for g in groups]
    return shards, np.array([labels[g[0]] for g in groups])
