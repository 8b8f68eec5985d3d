import gzip
import struct

import numpy as np
import pytest

from rmiso.datasets import (images_to_shards, read_dense_csv, read_idx, read_svmlight,
                            write_dense_csv)
from rmiso.exceptions import ConfigurationError


def test_dense_csv_round_trip_is_exact(tmp_path):
    X = np.random.default_rng(0).normal(size=(4, 3)) * 1e3
    path = tmp_path / "x.csv"
    write_dense_csv(path, X)
    assert np.array_equal(read_dense_csv(path), X)
    write_dense_csv(path, X, header=["a", "b", "c"])
    assert path.read_text().splitlines()[0] == "a,b,c"
    assert np.array_equal(read_dense_csv(path, header=True), X)


def test_dense_csv_single_row(tmp_path):
    path = tmp_path / "row.csv"
    path.write_text("1,2,3\n")
    assert read_dense_csv(path).shape == (1, 3)


def test_svmlight_labels_mapped(tmp_path):
    path = tmp_path / "a.txt"
    path.write_text("+1 1:1 3:1\n-1 2:1\n0 1:0.5\n")
    X, y = read_svmlight(path, n_features=4)
    assert y.tolist() == [1.0, -1.0, -1.0]
    assert X.shape == (3, 4)
    assert X[0, 0] == 1.0 and X[0, 2] == 1.0 and X[2, 0] == 0.5


def _write_idx(path, arr, code=0x08):
    arr = np.asarray(arr)
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    data = head + arr.astype(">u1" if code == 0x08 else ">f8").tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(data)


@pytest.mark.parametrize("name", ["img.idx", "img.idx.gz"])
def test_idx_round_trip(tmp_path, name):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    _write_idx(tmp_path / name, arr)
    assert np.array_equal(read_idx(tmp_path / name), arr)


def test_idx_float_payload(tmp_path):
    arr = np.linspace(0, 1, 6).reshape(2, 3)
    _write_idx(tmp_path / "f.idx", arr, code=0x0E)
    assert np.array_equal(read_idx(tmp_path / "f.idx"), arr)


def test_idx_bad_magic(tmp_path):
    (tmp_path / "bad.idx").write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x01\x05")
    with pytest.raises(ConfigurationError):
        read_idx(tmp_path / "bad.idx")
    (tmp_path / "bad2.idx").write_bytes(b"\x00\x00\x07\x01\x00\x00\x00\x01\x05")
    with pytest.raises(ConfigurationError):
        read_idx(tmp_path / "bad2.idx")


def test_images_to_shards_concatenates_batches():
    images = np.stack([np.full((2, 3), 255.0 * (i + 1) / 10) for i in range(5)])
    labels = np.array([1, 0, 1, 0, 1])
    shards, shard_labels = images_to_shards(images, labels, batch=2)
    assert [s.shape for s in shards] == [(2, 6), (2, 6), (2, 3)]
    assert shard_labels.tolist() == [0, 1, 1]
    assert np.allclose(shards[0][:, :3], 0.2) and np.allclose(shards[0][:, 3:], 0.4)
    assert np.all((0 <= shards[1]) & (shards[1] <= 1))
