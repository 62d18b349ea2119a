"""Joint training of the embedding and classifier, plus checkpoint I/O."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from ._util import natural_sorted
from .config import PUBLISHED_LR, TrainConfig
from .encoder import SignalImage, encode
from .errors import (
    BadMagic,
    BatchTooSmall,
    DatasetTooSmall,
    InsufficientClassSamples,
    ShapeManifestMismatch,
    ShapeMismatch,
    VersionUnsupported,
)
from .micronet import compute_loss, init_opt_state, init_params, param_shapes, rmsprop_step
from .signal_io import DatasetManifest, ManifestEntry, load_entry

log = logging.getLogger(__name__)

MAGIC = b"SLDML1"
FORMAT_VERSION = 1


# -- batching ---------------------------------------------------------------

def make_batches(labels, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Class-balanced batches of ``batch_size // 2`` two-sample pairs.

    Every class is shuffled and cut into same-class pairs. A batch takes one
    pair from each of ``batch_size // 2`` distinct classes, preferring the
    classes with most pairs left. When the dataset has fewer classes than
    that, classes repeat within a batch. Pairs that cannot fill a batch are
    dropped for the epoch.
    """
    if batch_size < 4 or batch_size % 2:
        raise BatchTooSmall(f"batch_size must be even and >= 4, got {batch_size}")
    labels = list(labels)
    rng = np.random.default_rng([seed, epoch])
    classes = natural_sorted(set(labels))
    by_class = {c: [i for i, y in enumerate(labels) if y == c] for c in classes}
    pools = {}
    for c in classes:
        idx = rng.permutation(by_class[c])
        pools[c] = [idx[i:i + 2] for i in range(0, len(idx) - 1, 2)]
    tiebreak = dict(zip(classes, rng.permutation(len(classes))))
    k = batch_size // 2
    distinct = len(classes) >= k

    batches = []
    while True:
        avail = sorted((c for c in classes if pools[c]),
                       key=lambda c: (-len(pools[c]), tiebreak[c]))
        if len(avail) < 2:
            break
        if distinct:
            if len(avail) < k:
                break
            chosen = avail[:k]
        else:
            if sum(len(pools[c]) for c in avail) < k:
                break
            chosen = []
            while len(chosen) < k:
                left = {c: len(pools[c]) - chosen.count(c) for c in avail}
                for c in sorted(avail, key=lambda c: (-left[c], tiebreak[c])):
                    if left[c] > 0 and len(chosen) < k:
                        chosen.append(c)
        batches.append(np.concatenate([pools[c].pop() for c in chosen]))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


# -- history ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_total_loss: float
    mean_triplet_loss: float
    mean_ce_loss: float
    mined_positive_count: int
    mined_negative_count: int
    # timing is not part of the reproducible record
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "total", "triplet", "ce", "pos_pairs", "neg_pairs", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.mean_total_loss), repr(r.mean_triplet_loss),
                            repr(r.mean_ce_loss), r.mined_positive_count,
                            r.mined_negative_count, f"{r.wall_time:.6f}"])


# -- encoding cache ---------------------------------------------------------

class ImageCache:
    """Encoded images keyed by (content hash of the source files, width)."""

    def __init__(self):
        self._images: dict[tuple[str, int], SignalImage] = {}

    def __len__(self):
        return len(self._images)

    @staticmethod
    def file_key(entry: ManifestEntry) -> str:
        h = hashlib.sha256()
        for p in entry.paths:
            with open(p, "rb") as fh:
                h.update(fh.read())
            h.update(b"\0")
        return h.hexdigest()

    def get(self, entry: ManifestEntry, target_width: int) -> SignalImage:
        try:
            key = (self.file_key(entry), target_width)
        except FileNotFoundError:
            # let the loader raise its domain error
            return encode(load_entry(entry), target_width, source_id=entry.path)
        img = self._images.get(key)
        if img is None:
            img = encode(load_entry(entry), target_width, source_id=entry.path)
            self._images[key] = img
        return img

    def encode_all(self, entries: Iterable[ManifestEntry], target_width: int) -> np.ndarray:
        imgs = [self.get(e, target_width).pixels for e in entries]
        shapes = {im.shape for im in imgs}
        if len(shapes) > 1:
            raise ShapeMismatch(f"encoded images differ in shape: {sorted(shapes)}")
        return np.stack(imgs)


# -- training ---------------------------------------------------------------

def resolve_config(cfg: TrainConfig, aux_classes) -> TrainConfig:
    n = len(set(aux_classes))
    if cfg.num_labels is None:
        return cfg.replace(num_labels=n)
    if cfg.num_labels != n:
        raise ShapeMismatch(f"config declares {cfg.num_labels} labels, got {n} auxiliary classes")
    return cfg


def train(manifest: DatasetManifest, aux_classes, cfg: TrainConfig,
          cache: Optional[ImageCache] = None):
    """Train on the auxiliary classes of ``manifest``; returns ``(params, history)``."""
    classes = natural_sorted(set(aux_classes))
    entries = manifest.by_label(classes)
    for c in classes:
        count = sum(e.label == c for e in entries)
        if count < 2:
            raise InsufficientClassSamples(c, count)
    cfg = resolve_config(cfg, classes)
    cache = cache if cache is not None else ImageCache()
    images = cache.encode_all(entries, cfg.target_width)
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[e.label] for e in entries], dtype=np.int64)

    params = init_params(cfg.seed, cfg.num_labels)
    state = init_opt_state(params, cfg.rmsprop_rho, cfg.rmsprop_eps)
    history = RunHistory(metadata={
        "lr": cfg.lr,
        "published_lr": PUBLISHED_LR,
        "config_digest": cfg.digest(),
        "config": cfg.to_dict(),
        "classes": classes,
        "n_samples": len(entries),
    })
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        batches = make_batches(y, cfg.batch_size, cfg.seed, epoch)
        if not batches:
            raise DatasetTooSmall(
                f"{len(entries)} samples cannot fill one batch of {cfg.batch_size}")
        totals, trips, ces = [], [], []
        n_pos = n_neg = 0
        for b in batches:
            r = compute_loss(params, images[b], y[b], cfg)
            params, state = rmsprop_step(params, r.grads, state, cfg.lr)
            totals.append(r.total)
            trips.append(r.triplet)
            ces.append(r.ce)
            n_pos += len(r.pairs.positives)
            n_neg += len(r.pairs.negatives)
        rec = EpochRecord(epoch, float(np.mean(totals)), float(np.mean(trips)),
                          float(np.mean(ces)), n_pos, n_neg, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d loss %.4f (triplet %.4f, ce %.4f) pairs +%d/-%d",
                 epoch, rec.mean_total_loss, rec.mean_triplet_loss, rec.mean_ce_loss,
                 n_pos, n_neg)
    return params, history


# -- tensor container -------------------------------------------------------

def save_tensor_container(path, tensors: dict, header_extra: dict) -> None:
    """Magic, u64 little-endian header length, JSON header, raw f32 data."""
    specs, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        specs.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f32",
                      "byte_offset": offset, "byte_len": len(data)})
        blobs.append(data)
        offset += len(data)
    header = dict(header_extra, format_version=FORMAT_VERSION, tensors=specs)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_tensor_container(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not a tensor container (bad magic)")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise ShapeManifestMismatch(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ShapeManifestMismatch(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionUnsupported(f"{path}: format version {header.get('format_version')!r}")
    data = raw[pos + hlen:]
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        start, length = spec["byte_offset"], spec["byte_len"]
        if spec.get("dtype") != "f32" or length != n_bytes or start + length > len(data):
            raise ShapeManifestMismatch(f"{path}: tensor {spec['name']} does not match its declaration")
        tensors[spec["name"]] = np.frombuffer(data, dtype="<f4", count=n_bytes // 4,
                                              offset=start).reshape(shape).copy()
    return header, tensors


def save_checkpoint(p: dict, cfg: TrainConfig, path, classes=None) -> None:
    extra = {"config": cfg.to_dict()}
    if classes is not None:
        extra["classes"] = list(classes)
    save_tensor_container(path, p, extra)


def load_checkpoint(path, expected_num_labels: Optional[int] = None, with_classes: bool = False):
    """Return ``(params, cfg)`` (plus class names when ``with_classes``).

    Tensors come back as float64 holding exactly the stored 32-bit values.
    """
    header, tensors = load_tensor_container(path)
    if "config" not in header:
        raise ShapeManifestMismatch(f"{path}: header has no config")
    cfg = TrainConfig.from_dict(header["config"])
    expected = param_shapes(cfg.num_labels)
    got = {k: v.shape for k, v in tensors.items()}
    if got != expected:
        raise ShapeManifestMismatch(f"{path}: tensors do not match the declared model shapes")
    if expected_num_labels is not None and expected_num_labels != cfg.num_labels:
        raise ShapeManifestMismatch(
            f"{path}: checkpoint has {cfg.num_labels} labels, {expected_num_labels} expected")
    params = {k: tensors[k].astype(np.float64) for k in expected}
    if with_classes:
        return params, cfg, header.get("classes")
    return params, cfg
