"""Synthetic multichannel sinusoid actions for end-to-end checks.

Each class fixes a frequency and phase per signal; samples of a class share
that pattern and differ by additive Gaussian noise.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .oneshot import SplitProtocol
from .signal_io import ManifestEntry, SignalMatrix, save_signal_csv, write_manifest

AXES = ("x", "y", "z")


def class_patterns(n_classes: int, n_signals: int, seed: int):
    rng = np.random.default_rng(seed)
    freqs = rng.uniform(0.5, 4.0, size=(n_classes, n_signals))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_classes, n_signals))
    return freqs, phases


def synthetic_sample(freq, phase, length: int, noise: float, rng) -> np.ndarray:
    t = np.arange(length) / length
    clean = np.sin(2 * np.pi * freq[:, None] * t[None, :] + phase[:, None])
    return clean + rng.normal(0.0, noise, size=clean.shape)


def make_synthetic_dataset(root, n_classes: int = 10, per_class: int = 40, n_groups: int = 3,
                           length: int = 64, noise: float = 0.05, seed: int = 0):
    """Write CSV signals and a manifest under ``root``.

    Returns ``(manifest_path, class_ids)``; class ids are ``C1..Cn`` and
    files are named ``C<k>_S<nnn>.csv`` so ``S000`` is the first sample.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n_signals = 3 * n_groups
    names = tuple(f"g{g}_{a}" for g in range(n_groups) for a in AXES)
    freqs, phases = class_patterns(n_classes, n_signals, seed)
    rng = np.random.default_rng([seed, 1])
    entries = []
    classes = [f"C{k + 1}" for k in range(n_classes)]
    for k, label in enumerate(classes):
        for i in range(per_class):
            values = synthetic_sample(freqs[k], phases[k], length, noise, rng)
            fname = f"{label}_S{i:03d}.csv"
            save_signal_csv(SignalMatrix(values, names, "synthetic"), root / fname)
            entries.append(ManifestEntry(fname, label, f"S{i:03d}", "synthetic"))
    manifest_path = root / "manifest.jsonl"
    write_manifest(entries, manifest_path)
    return manifest_path, classes


def synthetic_protocol(classes, n_eval: int) -> SplitProtocol:
    """The last ``n_eval`` classes are unseen; sample 000 is each reference."""
    aux, ev = classes[:-n_eval], classes[-n_eval:]
    return SplitProtocol(tuple(aux), tuple(ev), {c: {"prefix": f"{c}_S000"} for c in ev})
