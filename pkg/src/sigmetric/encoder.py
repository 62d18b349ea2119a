"""Compact signal image encoding.

Signals are grouped in file order into consecutive triples; each triple
becomes one image row whose red/green/blue channels hold the first, second
and third signal of the group. Time is resampled to a fixed width and the
whole tensor is min-max normalized with a single global range so relative
magnitudes between signals survive.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMatrix, NonFiniteInput
from .signal_io import SignalMatrix

CHANNELS = 3


@dataclass(frozen=True)
class SignalImage:
    """H x W x 3 float image with values in [0, 1]."""

    pixels: np.ndarray
    source_id: str = ""

    @property
    def shape(self):
        return self.pixels.shape


def resize_time(row, target_width: int) -> np.ndarray:
    """Linearly interpolate ``row`` onto ``target_width`` evenly spaced points.

    Output sample ``j`` sits at continuous input position
    ``j * (M - 1) / (target_width - 1)``; both endpoints are copied exactly.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size < 1:
        raise ValueError("row must be a non-empty vector")
    if target_width < 2:
        raise ValueError(f"target_width must be >= 2, got {target_width}")
    m = row.size
    if m == 1:
        return np.full(target_width, row[0])
    if m == target_width:
        return row.copy()
    pos = np.arange(target_width) * (m - 1) / (target_width - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), m - 2)
    frac = pos - lo
    out = row[lo] * (1.0 - frac) + row[lo + 1] * frac
    out[0] = row[0]
    out[-1] = row[-1]
    return out


def normalize_global(t) -> np.ndarray:
    """Min-max scale ``t`` with one range for the whole tensor.

    A constant tensor maps to zeros, the same value used for padding.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise NonFiniteInput("tensor contains NaN or infinite values")
    lo, hi = t.min(), t.max()
    if hi == lo:
        return np.zeros_like(t)
    out = (t - lo) / (hi - lo)
    # guard the last ulp so the documented [0, 1] range holds exactly
    return np.clip(out, 0.0, 1.0)


def group_rows(values: np.ndarray) -> np.ndarray:
    """Reshape N x M signals into ceil(N/3) x M x 3, zero padding the tail group."""
    n, m = values.shape
    h = -(-n // CHANNELS)
    padded = np.zeros((h * CHANNELS, m), dtype=np.float64)
    padded[:n] = values
    return padded.reshape(h, CHANNELS, m).transpose(0, 2, 1)


def encode(s: SignalMatrix, target_width: int, source_id: str = "") -> SignalImage:
    values = np.asarray(s.values, dtype=np.float64)
    if values.size == 0:
        raise EmptyMatrix("cannot encode an empty signal matrix")
    if target_width < 2:
        raise ValueError(f"target_width must be >= 2, got {target_width}")
    grouped = group_rows(values)
    h = grouped.shape[0]
    resized = np.empty((h, target_width, CHANNELS))
    for r in range(h):
        for c in range(CHANNELS):
            resized[r, :, c] = resize_time(grouped[r, :, c], target_width)
    return SignalImage(normalize_global(resized), source_id)


def export_png(img: SignalImage, path) -> None:
    """Write an 8-bit RGB preview; the float pixels remain the training input."""
    from PIL import Image

    px = np.asarray(img.pixels, dtype=np.float64)
    if px.ndim != 3 or px.shape[2] != CHANNELS:
        raise ValueError(f"expected an H x W x 3 image, got {px.shape}")
    # round half up, so 0.5 -> 128
    data = np.floor(np.clip(px, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")
