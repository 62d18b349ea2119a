import struct
from collections import Counter

import numpy as np
import pytest

from sigmetric.config import TrainConfig
from sigmetric.errors import (
    BadMagic,
    BatchTooSmall,
    InsufficientClassSamples,
    ShapeManifestMismatch,
    VersionUnsupported,
)
from sigmetric.metric import LossWeights
from sigmetric.micronet import init_params
from sigmetric.signal_io import DatasetManifest, ManifestEntry, SignalMatrix, save_signal_csv
from sigmetric.trainer import (
    EpochRecord,
    ImageCache,
    RunHistory,
    load_checkpoint,
    load_tensor_container,
    make_batches,
    save_checkpoint,
    save_tensor_container,
    train,
)

FAST = TrainConfig(batch_size=8, epochs=3, target_width=16)


def two_class_manifest(root, n=20, length=16):
    """Two linearly separable classes: constant low vs constant high rows plus noise."""
    rng = np.random.default_rng(0)
    entries = []
    for label, level in (("A", -1.0), ("B", 1.0)):
        for i in range(n):
            t = np.linspace(0, 1, length)
            vals = np.stack([level * t, -level * t, level * np.ones(length)])
            vals = vals + rng.normal(0, 0.05, vals.shape)
            name = f"{label}_{i}.csv"
            save_signal_csv(SignalMatrix(vals, ("x", "y", "z"), "inertial"), root / name)
            entries.append(ManifestEntry(str(root / name), label, f"S{i}", "inertial"))
    return DatasetManifest(tuple(entries))


class TestMakeBatches:
    def test_four_classes_batch_eight(self):
        labels = np.repeat(np.arange(4), 8)
        batches = make_batches(labels, 8, seed=0, epoch=1)
        assert len(batches) == 4
        for b in batches:
            assert sorted(Counter(labels[b]).values()) == [2, 2, 2, 2]

    def test_hundred_classes(self):
        labels = np.repeat(np.arange(100), 6)
        batches = make_batches(labels, 32, seed=1, epoch=1)
        emitted = 0
        for b in batches:
            counts = Counter(labels[b])
            assert len(counts) == 16 and set(counts.values()) == {2}
            emitted += len(b)
        # enumeration bound: 300 pairs, 16 per batch
        assert emitted == 32 * (300 // 16) <= 600
        all_idx = np.concatenate(batches)
        assert len(set(all_idx.tolist())) == len(all_idx)

    def test_deterministic_in_seed_and_epoch(self):
        labels = np.repeat(np.arange(10), 5)
        a = make_batches(labels, 8, 3, 2)
        b = make_batches(labels, 8, 3, 2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == len(b)
        c = make_batches(labels, 8, 3, 3)
        assert any(not np.array_equal(x, y) for x, y in zip(a, c))

    def test_few_classes_repeat(self):
        labels = np.repeat(np.arange(3), 10)
        for b in make_batches(labels, 16, 0, 1):
            counts = Counter(labels[b])
            assert len(b) == 16 and len(counts) >= 2 and min(counts.values()) >= 2

    @pytest.mark.parametrize("size", [2, 7, 0])
    def test_too_small(self, size):
        with pytest.raises(BatchTooSmall):
            make_batches([0, 0, 1, 1], size, 0, 1)


class TestTrain:
    def test_deterministic(self, small_dataset):
        manifest, proto, _ = small_dataset
        p1, h1 = train(manifest, proto.aux_classes, FAST)
        p2, h2 = train(manifest, proto.aux_classes, FAST)
        assert h1 == h2
        assert all(np.array_equal(p1[k], p2[k]) for k in p1)

    def test_loss_decreases_on_separable_toy(self, tmp_path):
        manifest = two_class_manifest(tmp_path)
        cfg = TrainConfig(batch_size=4, epochs=30, target_width=16)
        _, hist = train(manifest, ["A", "B"], cfg)
        assert hist.records[-1].mean_total_loss < hist.records[0].mean_total_loss
        assert [r.epoch for r in hist.records] == list(range(1, 31))
        assert all(r.mean_total_loss >= 0 for r in hist.records)
        assert hist.metadata["lr"] == 1e-3 and hist.metadata["published_lr"] == 1e-6

    def test_insufficient_samples(self, small_dataset, tmp_path):
        manifest, proto, _ = small_dataset
        lonely = manifest.entries + (ManifestEntry(manifest.entries[0].path, "Z9", "s", "synthetic"),)
        with pytest.raises(InsufficientClassSamples) as info:
            train(DatasetManifest(lonely), list(proto.aux_classes) + ["Z9"], FAST)
        assert "Z9" in str(info.value)

    def test_cache_reused(self, small_dataset):
        manifest, proto, _ = small_dataset
        cache = ImageCache()
        train(manifest, proto.aux_classes, FAST.replace(epochs=1), cache)
        n = len(cache)
        train(manifest, proto.aux_classes, FAST.replace(epochs=1), cache)
        assert n == 18 and len(cache) == n

    def test_history_csv(self, tmp_path):
        h = RunHistory()
        h.append(EpochRecord(1, 1.5, 0.5, 2.5, 3, 4, 0.25))
        h.append(EpochRecord(2, 1.0, 0.25, 1.75, 5, 6, 0.5))
        with pytest.raises(ValueError):
            h.append(EpochRecord(2, 1.0, 0.25, 1.75, 5, 6))
        h.to_csv(tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,total,triplet,ce,pos_pairs,neg_pairs,seconds"
        assert lines[2].split(",")[:6] == ["2", "1.0", "0.25", "1.75", "5", "6"]


class TestCheckpoint:
    def test_round_trip_exact_at_32_bit(self, tmp_path):
        p = init_params(4, 7)
        cfg = TrainConfig(num_labels=7, weights=LossWeights(alpha=0.25, beta=0.75))
        save_checkpoint(p, cfg, tmp_path / "m.ckpt", classes=list("abcdefg"))
        q, cfg2, classes = load_checkpoint(tmp_path / "m.ckpt", with_classes=True)
        assert cfg2 == cfg and classes == list("abcdefg")
        for k in p:
            assert q[k].dtype == np.float64
            assert np.array_equal(q[k].astype(np.float32), p[k].astype(np.float32))
        # a second trip is lossless
        save_checkpoint(q, cfg2, tmp_path / "m2.ckpt")
        r, _ = load_checkpoint(tmp_path / "m2.ckpt")
        assert all(np.array_equal(r[k], q[k]) for k in q)

    def test_header_layout(self, tmp_path):
        save_tensor_container(tmp_path / "t.bin", {"a": np.arange(6.0).reshape(2, 3)}, {"k": 1})
        raw = (tmp_path / "t.bin").read_bytes()
        assert raw[:6] == b"SLDML1"
        (n,) = struct.unpack("<Q", raw[6:14])
        body = raw[14 + n:]
        assert np.array_equal(np.frombuffer(body, "<f4"), np.arange(6.0, dtype=np.float32))
        header, tensors = load_tensor_container(tmp_path / "t.bin")
        assert header["tensors"][0] == {"name": "a", "shape": [2, 3], "dtype": "f32",
                                        "byte_offset": 0, "byte_len": 24}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(0, 3), TrainConfig(num_labels=3), path)
        raw = bytearray(path.read_bytes())
        raw[0:2] = b"XX"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagic):
            load_checkpoint(path)

    def test_label_count_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(0, 20), TrainConfig(num_labels=20), path)
        with pytest.raises(ShapeManifestMismatch):
            load_checkpoint(path, expected_num_labels=100)

    def test_tensor_shape_mismatch(self, tmp_path):
        p = init_params(0, 20)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, TrainConfig(num_labels=100), path)
        with pytest.raises(ShapeManifestMismatch):
            load_checkpoint(path)

    def test_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_params(0, 3), TrainConfig(num_labels=3), path)
        raw = path.read_bytes()
        (n,) = struct.unpack("<Q", raw[6:14])
        head = raw[14:14 + n].replace(b'"format_version": 1', b'"format_version": 9')
        path.write_bytes(raw[:6] + struct.pack("<Q", len(head)) + head + raw[14 + n:])
        with pytest.raises(VersionUnsupported):
            load_checkpoint(path)
