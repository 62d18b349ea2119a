"""Run configuration shared by the trainer, evaluation and the CLI."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .metric import MINER_MODES, LossWeights

EMBEDDING_DIM = 128
# Value used with a pretrained backbone; too small to train the micro net from scratch.
PUBLISHED_LR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    target_width: int = 64
    embedding_dim: int = EMBEDDING_DIM
    num_labels: Optional[int] = None
    miner_mode: str = "standard"
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ValueError(f"lr must be finite and > 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.target_width < 2:
            raise ValueError(f"target_width must be >= 2, got {self.target_width}")
        if self.embedding_dim != EMBEDDING_DIM:
            raise ValueError(f"embedding_dim is fixed at {EMBEDDING_DIM}")
        if self.num_labels is not None and self.num_labels < 2:
            raise ValueError(f"num_labels must be >= 2, got {self.num_labels}")
        if self.miner_mode not in MINER_MODES:
            raise ValueError(f"miner_mode must be one of {MINER_MODES}, got {self.miner_mode!r}")
        if not 0 <= self.rmsprop_rho < 1 or self.rmsprop_eps <= 0:
            raise ValueError("rmsprop_rho must lie in [0, 1) and rmsprop_eps be > 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        data = dict(data)
        if "weights" in data and isinstance(data["weights"], dict):
            data["weights"] = LossWeights(**data["weights"])
        return cls(**data)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
