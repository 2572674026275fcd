import struct

import numpy as np
import pytest

from splitmask.data import (Dataset, load_dataset, read_csv_dataset, read_idx_dataset, synthetic_blobs,
                            write_csv_dataset, write_idx)
from splitmask.errors import IngestionError


def test_blobs_geometry():
    ds = synthetic_blobs(n=3000, n_classes=3, dim=8, separation=4.0, seed=1)
    c = ds.centers
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.isclose(np.linalg.norm(c[i] - c[j]), 4.0, rtol=1e-12)
    assert np.bincount(ds.y).tolist() == [1000, 1000, 1000]
    for k in range(3):
        assert np.allclose(ds.X[ds.y == k].mean(axis=0), c[k], atol=0.15)
    assert np.array_equal(synthetic_blobs(seed=4).X, synthetic_blobs(seed=4).X)


def test_blobs_validation():
    with pytest.raises(ValueError):
        synthetic_blobs(n_classes=5, dim=3)
    with pytest.raises(IngestionError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 2)


def test_split_and_reshape():
    ds = synthetic_blobs(n=40, dim=16, seed=0).split(0.25, 3)
    assert len(ds) == 30 and len(ds.X_val) == 10
    r = ds.reshape((1, 4, 4))
    assert r.X.shape == (30, 1, 4, 4) and r.X_val.shape == (10, 1, 4, 4)
    with pytest.raises(IngestionError):
        ds.reshape((3, 3))


def test_csv_roundtrip(tmp_path):
    ds = synthetic_blobs(n=12, dim=5, seed=2)
    path = tmp_path / "d.csv"
    write_csv_dataset(path, ds.X, ds.y)
    back = read_csv_dataset(path)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    assert back.n_classes == 2


@pytest.mark.parametrize("text,fragment", [
    ("", "empty"),
    ("lbl,f0\n1,2\n", "header"),
    ("label,f0,f1\n1,2\n", "line 2"),
    ("label,f0\n1,abc\n", "line 2"),
])
def test_csv_errors(tmp_path, text, fragment):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(IngestionError, match=fragment):
        read_csv_dataset(path)


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    labels = np.array([0, 3, 9, 1, 1], dtype=np.uint8)
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", labels)
    ds = read_idx_dataset(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(ds.X, imgs / 255.0)
    np.testing.assert_array_equal(ds.y, labels)


def test_idx_wrong_magic_names_found_value(tmp_path):
    write_idx(tmp_path / "l", np.zeros(3, dtype=np.uint8))
    with pytest.raises(IngestionError, match="0x00000801") as exc:
        read_idx_dataset(tmp_path / "l", tmp_path / "l")
    assert exc.value.offset == 0
    (tmp_path / "w").write_bytes(struct.pack(">I", 0x803) + b"\0" * 12)
    with pytest.raises(IngestionError, match="0x00000803"):
        read_idx_dataset(tmp_path / "l", tmp_path / "w")


def test_idx_truncation_reports_offset(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 2, 2), dtype=np.uint8))
    data = (tmp_path / "i").read_bytes()
    (tmp_path / "t").write_bytes(data[:-3])
    write_idx(tmp_path / "l", np.zeros(2, dtype=np.uint8))
    with pytest.raises(IngestionError) as exc:
        read_idx_dataset(tmp_path / "t", tmp_path / "l")
    assert exc.value.offset == 16 + 5
    (tmp_path / "h").write_bytes(data[:2])
    with pytest.raises(IngestionError, match="truncated"):
        read_idx_dataset(tmp_path / "h", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", np.zeros((2, 2, 2), dtype=np.uint8))
    write_idx(tmp_path / "l", np.zeros(3, dtype=np.uint8))
    with pytest.raises(IngestionError, match="2 images but 3 labels"):
        read_idx_dataset(tmp_path / "i", tmp_path / "l")


def test_load_dataset(tmp_path):
    ds = load_dataset({"kind": "synthetic-blobs", "n": 20, "dim": 4, "seed": 1, "val_fraction": 0.5})
    assert len(ds) == 10 and len(ds.X_val) == 10
    write_csv_dataset(tmp_path / "d.csv", ds.X, ds.y)
    assert len(load_dataset({"kind": "csv", "path": str(tmp_path / "d.csv")})) == 10
    with pytest.raises(IngestionError, match="unknown dataset kind"):
        load_dataset({"kind": "parquet"})
