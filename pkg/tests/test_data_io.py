import struct

import numpy as np
import pytest

from snnprune.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    VersionError,
    load_checkpoint,
    save_checkpoint,
)
from snnprune.data import FormatError, find_mnist, load_mnist, load_mnist_idx, synthetic_dataset, write_idx
from snnprune.metrics import COLUMNS, MetricsWriter, read_metrics


def idx_pair(tmp_path, n=5, m=None):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = rng.integers(0, 10, size=m or n, dtype=np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lab", labels)
    return tmp_path / "img", tmp_path / "lab", images, labels


def test_idx_round_trip_and_scaling(tmp_path):
    img, lab, images, labels = idx_pair(tmp_path)
    ds = load_mnist_idx(img, lab)
    assert ds.inputs.shape == (5, 784) and ds.features == 784
    assert ds.inputs[0, 0] == 1.0
    assert np.array_equal(ds.inputs * 255.0, images.reshape(5, -1).astype(np.float64))
    assert np.array_equal(ds.labels, labels)


def test_idx_wrong_magic(tmp_path):
    img, lab, *_ = idx_pair(tmp_path)
    with pytest.raises(FormatError, match="magic"):
        load_mnist_idx(img, img)


def test_idx_truncated(tmp_path):
    img, lab, *_ = idx_pair(tmp_path)
    img.write_bytes(img.read_bytes()[:-7])
    with pytest.raises(FormatError):
        load_mnist_idx(img, lab)
    img.write_bytes(b"\x00\x00")
    with pytest.raises(FormatError):
        load_mnist_idx(img, lab)


def test_idx_count_mismatch(tmp_path):
    img, lab, *_ = idx_pair(tmp_path, n=5, m=4)
    with pytest.raises(FormatError, match="labels"):
        load_mnist_idx(img, lab)


def test_mnist_lookup_reports_missing(tmp_path, monkeypatch):
    monkeypatch.delenv("SNNPRUNE_DATA_DIR", raising=False)
    assert find_mnist(str(tmp_path)) is None
    with pytest.raises(FileNotFoundError):
        load_mnist(str(tmp_path))


def test_official_mnist_shapes():
    if find_mnist(None, "train") is None:
        pytest.skip("MNIST IDX files not available (set SNNPRUNE_DATA_DIR)")
    train, test = load_mnist(None, "train"), load_mnist(None, "test")
    assert train.inputs.shape == (60000, 784) and test.inputs.shape == (10000, 784)


def test_synthetic_deterministic_and_balanced():
    a = synthetic_dataset(3, 10, 2, 6)
    b = synthetic_dataset(3, 10, 2, 6)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [5, 5]
    assert a.inputs.min() >= 0 and a.inputs.max() <= 1
    assert not np.array_equal(a.inputs, synthetic_dataset(4, 10, 2, 6).inputs)


def test_synthetic_zero_spread_is_nearest_mean_separable():
    ds = synthetic_dataset(0, 40, 4, 8, spread=0.0)
    means = np.array([ds.inputs[ds.labels == c][0] for c in range(4)])
    for c in range(4):
        assert np.all(ds.inputs[ds.labels == c] == means[c])
    d = ((ds.inputs[:, None, :] - means[None]) ** 2).sum(-1)
    assert np.array_equal(d.argmin(1), ds.labels)


def test_synthetic_rejects_empty():
    with pytest.raises(ValueError):
        synthetic_dataset(0, 0, 2, 3)


def sample_checkpoint():
    rng = np.random.default_rng(5)
    gen = np.random.default_rng([1, 2])
    tensors = {"w": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300, np.inf])}
    meta = {"s": 1 / 3, "y": [0.1, 0.2], "z": 1e5, "rng": gen.bit_generator.state, "tag": "0.25"}
    return Checkpoint({"kind": "test"}, tensors, meta)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ck = sample_checkpoint()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    for k, v in ck.tensors.items():
        assert np.array_equal(back.tensors[k].view(np.uint64), v.view(np.uint64))
    assert back.meta == ck.meta and back.arch == ck.arch
    gen = np.random.default_rng()
    gen.bit_generator.state = back.meta["rng"]
    assert gen.random() == np.random.default_rng([1, 2]).random()


def test_checkpoint_corrupt_length(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, sample_checkpoint())
    raw = bytearray(path.read_bytes())
    (hlen,) = struct.unpack_from("<I", raw, 12)
    struct.pack_into("<Q", raw, 16 + hlen, 10 ** 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="payload length"):
        load_checkpoint(path)


def test_checkpoint_flipped_byte_and_bad_magic(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, sample_checkpoint())
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_newer_version_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, Checkpoint({}, {}, {}, version=2))
    assert path.read_bytes()[:8] == MAGIC
    with pytest.raises(VersionError):
        load_checkpoint(path)


def row(epoch, s):
    return {"epoch": epoch, "phase": "prune", "loss": 0.5, "acc": 0.9, "s": s, "y": 0.0,
            "z": 0.0, "resource": 1.0, "counted_sparsity": 0.0}


def test_metrics_header_once_and_append(tmp_path):
    path = tmp_path / "m.csv"
    with MetricsWriter(path) as w:
        w.append(row(1, 0.0))
        assert path.read_text().count("\n") == 2      # flushed per row
    with MetricsWriter(path) as w:
        w.append(row(2, 3.5))
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(COLUMNS)
    assert sum(l.startswith("epoch") for l in lines) == 1
    rows = read_metrics(path)
    assert [r["epoch"] for r in rows] == [1, 2] and rows[1]["s"] == 3.5
