"""Loading raw signal files and dataset manifests, time subsampling and
row-wise fusion of modalities.

Signal files are CSV with one time sample per line and one signal per
column; in memory a :class:`SignalMatrix` holds signals along rows.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ColumnMismatch,
    DuplicatePath,
    EmptyFile,
    InvalidSignalMatrix,
    MalformedRecord,
    MissingFile,
    NameCollision,
    NonNumericCell,
    RaggedRows,
    TargetTooLarge,
    ZeroTarget,
)

MANIFEST_KEYS = ("path", "label", "subject", "modality")
# Separator that lets a manifest entry name several files to be fused.
FUSE_SEPARATOR = "|"


@dataclass(frozen=True)
class SignalMatrix:
    """N x M matrix of N scalar signals sampled at M time steps."""

    values: np.ndarray
    signal_names: tuple[str, ...]
    modality: str = "unknown"
    sample_rate: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise InvalidSignalMatrix(f"expected a non-empty 2-d matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidSignalMatrix("signal values must be finite")
        names = tuple(str(n) for n in self.signal_names)
        if len(names) != values.shape[0]:
            raise InvalidSignalMatrix(
                f"{len(names)} signal names for {values.shape[0]} signal rows")
        if len(set(names)) != len(names):
            raise InvalidSignalMatrix("signal names must be unique")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "signal_names", names)

    @property
    def n_signals(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    subject: str
    modality: str

    @property
    def paths(self) -> list[str]:
        """Individual files of this entry (more than one for fused samples)."""
        return self.path.split(FUSE_SEPARATOR)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[str]:
        return sorted({e.label for e in self.entries})

    def by_label(self, labels: Iterable[str]) -> list[ManifestEntry]:
        wanted = set(labels)
        return [e for e in self.entries if e.label in wanted]


def load_signal_csv(path, modality: str = "unknown", sample_rate: float = 0.0) -> SignalMatrix:
    """Read a CSV signal file (time along rows) into a SignalMatrix."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path}: no header row") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise InvalidSignalMatrix(f"{path}: duplicate column names in header")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RaggedRows(
                    f"{path}: line {lineno} has {len(row)} columns, header has {len(header)}")
            parsed = []
            for col, cell in enumerate(row, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise NonNumericCell(path, lineno, col, cell) from None
            rows.append(parsed)
    if not rows:
        raise EmptyFile(f"{path}: header only, no data rows")
    values = np.asarray(rows, dtype=np.float64).T
    return SignalMatrix(values, tuple(header), modality, sample_rate)


def save_signal_csv(s: SignalMatrix, path) -> None:
    """Write ``s`` in the layout read by :func:`load_signal_csv` (lossless)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(s.signal_names)
        for column in s.values.T:
            writer.writerow(repr(float(v)) for v in column)


def load_manifest(path) -> DatasetManifest:
    """Parse a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    base = path.parent
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise MalformedRecord(lineno, "record is not a JSON object")
            missing = [k for k in MANIFEST_KEYS if k not in record]
            if missing:
                raise MalformedRecord(lineno, f"missing field(s) {', '.join(missing)}")
            extra = sorted(set(record) - set(MANIFEST_KEYS))
            if extra:
                raise MalformedRecord(lineno, f"unexpected field(s) {', '.join(extra)}")
            if not all(isinstance(record[k], str) for k in MANIFEST_KEYS):
                raise MalformedRecord(lineno, "all fields must be strings")
            resolved = FUSE_SEPARATOR.join(
                str(p if os.path.isabs(p) else base / p)
                for p in record["path"].split(FUSE_SEPARATOR))
            if resolved in seen:
                raise DuplicatePath(f"duplicate path {record['path']!r} on line {lineno}")
            seen.add(resolved)
            entries.append(ManifestEntry(resolved, record["label"], record["subject"],
                                         record["modality"]))
    return DatasetManifest(tuple(entries))


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({k: getattr(e, k) for k in MANIFEST_KEYS}) + "\n")


def subsample_indices(n_cols: int, target_cols: int) -> np.ndarray:
    if target_cols < 1:
        raise ZeroTarget(f"target_cols must be positive, got {target_cols}")
    if target_cols > n_cols:
        raise TargetTooLarge(f"cannot subsample {n_cols} columns to {target_cols}")
    if target_cols == 1:
        return np.zeros(1, dtype=np.int64)
    # round half away from zero; np.round would round half to even
    return np.array([math.floor(j * (n_cols - 1) / (target_cols - 1) + 0.5)
                     for j in range(target_cols)], dtype=np.int64)


def subsample_time(s: SignalMatrix, target_cols: int) -> SignalMatrix:
    """Keep ``target_cols`` columns on a uniform index grid (no interpolation)."""
    idx = subsample_indices(s.n_samples, target_cols)
    rate = s.sample_rate * target_cols / s.n_samples if s.sample_rate else 0.0
    return SignalMatrix(s.values[:, idx], s.signal_names, s.modality, rate)


def fuse_rows(a: SignalMatrix, b: SignalMatrix) -> SignalMatrix:
    """Stack ``a`` on top of ``b``. Column counts must already agree."""
    if a.n_samples != b.n_samples:
        raise ColumnMismatch(
            f"cannot fuse {a.n_samples}-column and {b.n_samples}-column matrices; "
            "subsample the longer one first")
    names = [_prefixed(a.modality, n) for n in a.signal_names]
    names += [_prefixed(b.modality, n) for n in b.signal_names]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise NameCollision(f"signal names collide after prefixing: {dupes}")
    values = np.vstack([a.values, b.values])
    return SignalMatrix(values, tuple(names), "fused", 0.0)


def _prefixed(modality: str, name: str) -> str:
    # already-fused names carry their own prefixes
    if modality == "fused":
        return name
    return f"{modality}:{name}"


def fuse_all(parts: Sequence[SignalMatrix]) -> SignalMatrix:
    """Subsample every part to the shortest length, then fuse in order."""
    if len(parts) == 1:
        return parts[0]
    width = min(p.n_samples for p in parts)
    out = subsample_time(parts[0], width)
    for p in parts[1:]:
        out = fuse_rows(out, subsample_time(p, width))
    return out


def load_entry(entry: ManifestEntry) -> SignalMatrix:
    """Load the signal(s) behind a manifest entry, fusing multi-file entries."""
    parts = entry.paths
    if len(parts) == 1:
        return load_signal_csv(parts[0], modality=entry.modality)
    mods = entry.modality.split(FUSE_SEPARATOR)
    if len(mods) != len(parts):
        mods = [f"m{i}" for i in range(len(parts))]
    return fuse_all([load_signal_csv(p, modality=m) for p, m in zip(parts, mods)])
