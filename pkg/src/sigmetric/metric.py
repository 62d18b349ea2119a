"""Distances, multi-similarity pair mining and the two training losses.

All distances are plain (non-squared) Euclidean distances. Loss functions
come in two flavours: a scalar version, and a ``*_and_grad`` version that
also returns the derivative with respect to its first argument so the
network backward pass can start from it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidLabel

MINER_MODES = ("standard", "literal-eq3")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    delta: float = 0.1
    epsilon_mine: float = 0.05

    def __post_init__(self):
        for name in ("alpha", "beta", "delta", "epsilon_mine"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class MinedPairs:
    """Anchor-positive and anchor-negative index pairs, sorted ascending."""

    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    def triplets(self) -> np.ndarray:
        """Per-anchor cross product of mined positives and negatives, shape (T, 3)."""
        pos_by_anchor: dict[int, list[int]] = {}
        for a, p in self.positives:
            pos_by_anchor.setdefault(a, []).append(p)
        neg_by_anchor: dict[int, list[int]] = {}
        for a, n in self.negatives:
            neg_by_anchor.setdefault(a, []).append(n)
        rows = [(a, p, n)
                for a in sorted(pos_by_anchor)
                for p in pos_by_anchor[a]
                for n in neg_by_anchor.get(a, ())]
        if not rows:
            return np.zeros((0, 3), dtype=np.int64)
        return np.asarray(rows, dtype=np.int64)


def pairwise_distances(embeddings) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    diff = e[:, None, :] - e[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return d


def mine_multi_similarity(embeddings, labels, epsilon_mine: float = 0.05,
                          mode: str = "standard") -> MinedPairs:
    """Select hard pairs per anchor.

    A positive (i, j) is kept when it is farther than the anchor's nearest
    negative minus ``epsilon_mine``. A negative (i, j) is kept when it is
    closer than the anchor's farthest positive plus ``epsilon_mine``.

    ``mode="literal-eq3"`` instead compares negatives against the farthest
    *negative*, which keeps every negative pair.
    """
    if mode not in MINER_MODES:
        raise ValueError(f"unknown miner mode {mode!r}; expected one of {MINER_MODES}")
    labels = np.asarray(labels)
    d = pairwise_distances(embeddings)
    b = d.shape[0]
    if labels.shape != (b,):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {b} embeddings")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(b, dtype=bool)
    neg_mask = ~same

    nearest_neg = np.where(neg_mask, d, np.inf).min(axis=1)
    keep_pos = pos_mask & (d > (nearest_neg - epsilon_mine)[:, None])

    if mode == "standard":
        reference = np.where(pos_mask, d, -np.inf).max(axis=1)
    else:
        reference = np.where(neg_mask, d, -np.inf).max(axis=1)
    keep_neg = neg_mask & (d < (reference + epsilon_mine)[:, None])

    # np.argwhere walks row-major, so pairs come out in ascending order
    positives = [(int(i), int(j)) for i, j in np.argwhere(keep_pos)]
    negatives = [(int(i), int(j)) for i, j in np.argwhere(keep_neg)]
    return MinedPairs(positives, negatives)


def triplet_margin_loss(embeddings, pairs: MinedPairs, delta: float = 0.1) -> float:
    return triplet_margin_loss_and_grad(embeddings, pairs, delta)[0]


def triplet_margin_loss_and_grad(embeddings, pairs: MinedPairs, delta: float = 0.1):
    """Mean hinge ``max(d(a,p) - d(a,n) + delta, 0)`` over all triplets.

    Returns ``(loss, d_loss/d_embeddings)``. With no triplets the loss and
    gradient are both zero. The hinge kink and coincident points get a zero
    subgradient.
    """
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 1:
        e = e[:, None]
    grad = np.zeros_like(e)
    trip = pairs.triplets()
    if len(trip) == 0:
        return 0.0, grad
    a, p, n = trip[:, 0], trip[:, 1], trip[:, 2]
    diff_ap = e[a] - e[p]
    diff_an = e[a] - e[n]
    d_ap = np.sqrt(np.einsum("ij,ij->i", diff_ap, diff_ap))
    d_an = np.sqrt(np.einsum("ij,ij->i", diff_an, diff_an))
    margins = d_ap - d_an + delta
    active = margins > 0
    t = len(trip)
    loss = float(np.where(active, margins, 0.0).sum() / t)

    u_ap = _unit(diff_ap, d_ap) * (active / t)[:, None]
    u_an = _unit(diff_an, d_an) * (active / t)[:, None]
    np.add.at(grad, a, u_ap - u_an)
    np.add.at(grad, p, -u_ap)
    np.add.at(grad, n, u_an)
    return loss, grad


def _unit(diff, norm):
    safe = np.where(norm > 0, norm, 1.0)
    return np.where((norm > 0)[:, None], diff / safe[:, None], 0.0)


def cross_entropy_loss(logits, labels) -> float:
    return cross_entropy_loss_and_grad(logits, labels)[0]


def cross_entropy_loss_and_grad(logits, labels):
    """Mean negative log-softmax of the true class, and its logit gradient."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"logits {z.shape} and labels {labels.shape} disagree")
    b, c = z.shape
    if not np.issubdtype(labels.dtype, np.integer) or np.any(labels < 0) or np.any(labels >= c):
        raise InvalidLabel(f"labels must be integers in [0, {c}), got {labels.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_prob = shifted[np.arange(b), labels] - log_norm
    loss = float(-log_prob.mean())
    probs = np.exp(shifted - log_norm[:, None])
    probs[np.arange(b), labels] -= 1.0
    return loss, probs / b


def total_loss(lt: float, lc: float, w: LossWeights) -> float:
    return w.alpha * lt + w.beta * lc
