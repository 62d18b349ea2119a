"""One-shot action recognition from raw sensor signals.

Signals are encoded as compact 3-channel images, a small residual network
learns a 128-d metric embedding with a mined triplet loss plus a classifier
loss, and unseen actions are recognised by nearest-neighbour search against
a single reference sample per class.
"""
from .config import TrainConfig
from .encoder import SignalImage, encode, export_png, normalize_global, resize_time
from .metric import (
    LossWeights,
    MinedPairs,
    cross_entropy_loss,
    mine_multi_similarity,
    pairwise_distances,
    total_loss,
    triplet_margin_loss,
)
from .micronet import forward, grad_check, init_params, loss_and_grads, rmsprop_step
from .oneshot import (
    EmbeddingBank,
    SplitProtocol,
    build_reference_bank,
    classify,
    evaluate,
    export_embeddings,
    ntu_oneshot_split,
    pca_project,
    reduced_aux_split,
)
from .signal_io import (
    DatasetManifest,
    SignalMatrix,
    fuse_rows,
    load_manifest,
    load_signal_csv,
    subsample_time,
)
from .trainer import load_checkpoint, make_batches, save_checkpoint, train

__version__ = "0.1.0"
