"""One-shot evaluation by nearest-neighbour search against one reference
embedding per unseen class."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._util import natural_key, natural_sorted
from .config import TrainConfig
from .errors import (
    AmbiguousReference,
    DegenerateData,
    EmptyBank,
    InvalidProtocol,
    KeepOutOfRange,
    NoQueries,
    ReferenceNotFound,
)
from .micronet import embed
from .signal_io import DatasetManifest, ManifestEntry
from .trainer import ImageCache

NTU_EVAL_IDS = tuple(1 + 6 * k for k in range(20))
NTU_PREFIX_LOW = "S001C003P008R001"
NTU_PREFIX_HIGH = "S018C003P008R001"


@dataclass(frozen=True)
class SplitProtocol:
    """Auxiliary/evaluation class split plus one reference rule per eval class.

    ``references`` maps class id to ``{"prefix": ...}`` (file name prefix) or
    ``{"path": ...}``.
    """

    aux_classes: tuple
    eval_classes: tuple
    references: dict = field(default_factory=dict)

    def __post_init__(self):
        aux = tuple(natural_sorted(set(self.aux_classes)))
        ev = tuple(natural_sorted(set(self.eval_classes)))
        overlap = set(aux) & set(ev)
        if overlap:
            raise InvalidProtocol(f"classes in both splits: {natural_sorted(overlap)}")
        missing = [c for c in ev if c not in self.references]
        if missing:
            raise InvalidProtocol(f"no reference rule for eval classes {missing}")
        for c, rule in self.references.items():
            if not isinstance(rule, dict) or len(rule) != 1 or not ({"prefix", "path"} & set(rule)):
                raise InvalidProtocol(f"class {c!r}: reference rule must be {{prefix}} or {{path}}")
        object.__setattr__(self, "aux_classes", aux)
        object.__setattr__(self, "eval_classes", ev)

    def to_dict(self) -> dict:
        return {"aux_classes": list(self.aux_classes), "eval_classes": list(self.eval_classes),
                "references": {c: dict(self.references[c]) for c in self.eval_classes}}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def resolve_references(self, manifest: DatasetManifest) -> dict[str, ManifestEntry]:
        out = {}
        for c in self.eval_classes:
            rule = self.references[c]
            candidates = [e for e in manifest if e.label == c]
            if "prefix" in rule:
                hits = [e for e in candidates
                        if os.path.basename(e.paths[0]).startswith(rule["prefix"])]
            else:
                hits = [e for e in candidates if _same_path(e.path, rule["path"])]
            if not hits:
                raise ReferenceNotFound(c)
            if len(hits) > 1:
                raise AmbiguousReference(c, len(hits))
            out[c] = hits[0]
        return out


def _same_path(entry_path: str, wanted: str) -> bool:
    a = os.path.normpath(entry_path)
    b = os.path.normpath(wanted)
    if a == b:
        return True
    # relative rules match on trailing path components
    return not os.path.isabs(b) and a.endswith(os.sep + b)


def load_protocol(path) -> SplitProtocol:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        return SplitProtocol(tuple(data["aux_classes"]), tuple(data["eval_classes"]),
                             dict(data["references"]))
    except KeyError as exc:
        raise InvalidProtocol(f"{path}: missing key {exc}") from None


def ntu_oneshot_split() -> SplitProtocol:
    """The NTU RGB+D 120 one-shot protocol: 20 unseen actions, 100 auxiliary."""
    eval_ids = [f"A{i}" for i in NTU_EVAL_IDS]
    aux_ids = [f"A{i}" for i in range(1, 121) if i not in NTU_EVAL_IDS]
    refs = {f"A{i}": {"prefix": NTU_PREFIX_LOW if i < 60 else NTU_PREFIX_HIGH}
            for i in NTU_EVAL_IDS}
    return SplitProtocol(tuple(aux_ids), tuple(eval_ids), refs)


def reduced_aux_split(base: SplitProtocol, keep: int, seed: int = 0) -> SplitProtocol:
    aux = list(base.aux_classes)
    if not 1 <= keep <= len(aux):
        raise KeepOutOfRange(f"keep must lie in [1, {len(aux)}], got {keep}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(aux), size=keep, replace=False)
    return SplitProtocol(tuple(aux[i] for i in sorted(chosen)), base.eval_classes,
                         dict(base.references))


# -- bank and classification -------------------------------------------------

@dataclass(frozen=True)
class BankEntry:
    label: str
    vector: np.ndarray
    path: str = ""


@dataclass(frozen=True)
class EmbeddingBank:
    entries: tuple

    def __post_init__(self):
        ordered = tuple(sorted(self.entries, key=lambda e: natural_key(e.label)))
        labels = [e.label for e in ordered]
        if len(set(labels)) != len(labels):
            raise ValueError("an embedding bank holds exactly one entry per class")
        object.__setattr__(self, "entries", ordered)

    @classmethod
    def from_vectors(cls, vectors: dict, paths: Optional[dict] = None) -> "EmbeddingBank":
        paths = paths or {}
        return cls(tuple(BankEntry(c, np.asarray(v, dtype=np.float64), paths.get(c, ""))
                         for c, v in vectors.items()))

    @property
    def labels(self) -> list:
        return [e.label for e in self.entries]

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([e.vector for e in self.entries])


def build_reference_bank(p: dict, manifest: DatasetManifest, protocol: SplitProtocol,
                         cfg: TrainConfig, cache: Optional[ImageCache] = None) -> EmbeddingBank:
    refs = protocol.resolve_references(manifest)
    cache = cache if cache is not None else ImageCache()
    classes = list(protocol.eval_classes)
    vecs = embed(p, cache.encode_all([refs[c] for c in classes], cfg.target_width))
    return EmbeddingBank(tuple(BankEntry(c, v, refs[c].path) for c, v in zip(classes, vecs)))


def classify(bank: EmbeddingBank, query) -> tuple:
    """Nearest reference by Euclidean distance; ties go to the lowest class id."""
    if not bank.entries:
        raise EmptyBank("cannot classify against an empty bank")
    q = np.asarray(query, dtype=np.float64)
    diff = bank.matrix - q
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    best = int(np.argmin(d))  # first minimum == lowest class id
    return bank.entries[best].label, float(d[best])


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict
    confusion: np.ndarray
    classes: list
    macro_accuracy: float
    predictions: list = field(default_factory=list)  # (path, true, predicted, distance)
    query_vectors: Optional[np.ndarray] = None

    def to_dict(self, config_digest: str = "") -> dict:
        return {"accuracy": self.accuracy,
                "macro_accuracy": self.macro_accuracy,
                "per_class": self.per_class,
                "classes": list(self.classes),
                "confusion": self.confusion.tolist(),
                "config_digest": config_digest}


def evaluate_embeddings(bank: EmbeddingBank, queries, labels, paths=None) -> EvalReport:
    """Score query vectors against a bank; the core of :func:`evaluate`."""
    classes = bank.labels
    index = {c: i for i, c in enumerate(classes)}
    paths = paths if paths is not None else [""] * len(labels)
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    preds = []
    for vec, true, path in zip(queries, labels, paths):
        pred, dist = classify(bank, vec)
        confusion[index[true], index[pred]] += 1
        preds.append((path, true, pred, dist))
    counts = confusion.sum(axis=1)
    for c, n in zip(classes, counts):
        if n == 0:
            raise NoQueries(c)
    per_class = {c: float(confusion[i, i] / counts[i]) for i, c in enumerate(classes)}
    accuracy = float(np.trace(confusion) / counts.sum())
    macro = float(np.mean(list(per_class.values())))
    return EvalReport(accuracy, per_class, confusion, classes, macro, preds)


def query_entries(manifest: DatasetManifest, protocol: SplitProtocol) -> list[ManifestEntry]:
    refs = {e.path for e in protocol.resolve_references(manifest).values()}
    return [e for e in manifest.by_label(protocol.eval_classes) if e.path not in refs]


def evaluate(p: dict, manifest: DatasetManifest, protocol: SplitProtocol, cfg: TrainConfig,
             cache: Optional[ImageCache] = None) -> EvalReport:
    cache = cache if cache is not None else ImageCache()
    bank = build_reference_bank(p, manifest, protocol, cfg, cache)
    queries = query_entries(manifest, protocol)
    for c in protocol.eval_classes:
        if not any(e.label == c for e in queries):
            raise NoQueries(c)
    vecs = embed(p, cache.encode_all(queries, cfg.target_width))
    report = evaluate_embeddings(bank, vecs, [e.label for e in queries],
                                 [e.path for e in queries])
    report.query_vectors = vecs
    return report


def export_embeddings(p: dict, manifest: DatasetManifest, protocol: SplitProtocol,
                      cfg: TrainConfig, path, cache: Optional[ImageCache] = None) -> EvalReport:
    """Write one TSV row per query: path, label, predicted, distance, embedding."""
    report = evaluate(p, manifest, protocol, cfg, cache)
    write_embedding_tsv(path, report.predictions, report.query_vectors)
    return report


def write_embedding_tsv(path, predictions, vectors) -> None:
    dim = np.shape(vectors)[1] if len(predictions) else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["path", "label", "predicted", "distance"] + [f"e{i}" for i in range(dim)])
        for (src, true, pred, dist), vec in zip(predictions, vectors):
            w.writerow([src, true, pred, repr(float(dist))] + [repr(float(v)) for v in vec])


def read_embedding_tsv(path):
    """Inverse of :func:`write_embedding_tsv`: ``(rows, vectors)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh, delimiter="\t")
        next(r)
        rows, vecs = [], []
        for line in r:
            rows.append((line[0], line[1], line[2], float(line[3])))
            vecs.append([float(v) for v in line[4:]])
    return rows, np.asarray(vecs)


# -- projection ---------------------------------------------------------------

def pca_project(vectors, dims: int = 2, seed: int = 0, tol: float = 1e-9,
                max_iter: int = 1000) -> np.ndarray:
    """Project centred vectors on their leading principal directions.

    Directions come from power iteration on the covariance with deflation
    after each component. Returns an (n, dims) array.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two vectors")
    x = x - x.mean(axis=0)
    if not np.any(x):
        raise DegenerateData("all vectors are identical")
    cov = x.T @ x / x.shape[0]
    floor = 1e-14 * np.trace(cov)
    rng = np.random.default_rng(seed)
    basis = []
    for _ in range(dims):
        v = rng.standard_normal(cov.shape[0])
        for b in basis:
            v -= (v @ b) * b
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm <= floor:
                # no variance left; any orthogonal direction projects to ~0
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        for b in basis:
            v -= (v @ b) * b
        v /= np.linalg.norm(v)
        basis.append(v)
        cov = cov - (v @ cov @ v) * np.outer(v, v)
    return x @ np.stack(basis, axis=1)
