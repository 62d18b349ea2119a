"""A small residual CNN with an embedding head and a classifier head.

Layout::

    stem conv 3->16 (3x3) -> ReLU
    block1: [conv 16->32 s2 -> ReLU -> conv 32->32] + proj 1x1 s2 -> ReLU
    block2: [conv 32->64 s2 -> ReLU -> conv 64->64] + proj 1x1 s2 -> ReLU
    global average pool -> linear 64->128 -> ReLU          (shared feature)
    embedding: linear 128->128 -> ReLU -> linear 128->128
    classifier: linear 128->num_labels

Everything runs in float64 with hand-written backward passes. Parameters
are a plain ``dict`` of name -> ndarray; conv weights are (out, in, kh, kw),
linear weights are (in, out).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import EMBEDDING_DIM, TrainConfig
from .errors import ImageTooSmall, InvalidLabel, NonFiniteGradient, ShapeMismatch
from .metric import (
    MinedPairs,
    cross_entropy_loss_and_grad,
    mine_multi_similarity,
    total_loss,
    triplet_margin_loss_and_grad,
)

STEM = 16
WIDTH1 = 32
WIDTH2 = 64
FEATURE = 128

# conv name -> (stride, padding)
_CONVS = {
    "stem": (1, 1),
    "block1.conv1": (2, 1),
    "block1.conv2": (1, 1),
    "block1.proj": (2, 0),
    "block2.conv1": (2, 1),
    "block2.conv2": (1, 1),
    "block2.proj": (2, 0),
}


def param_shapes(num_labels: int) -> dict[str, tuple[int, ...]]:
    """Declared tensor shapes, in canonical order."""
    shapes = {}

    def conv(name, cin, cout, k):
        shapes[f"{name}.w"] = (cout, cin, k, k)
        shapes[f"{name}.b"] = (cout,)

    def linear(name, nin, nout):
        shapes[f"{name}.w"] = (nin, nout)
        shapes[f"{name}.b"] = (nout,)

    conv("stem", 3, STEM, 3)
    conv("block1.conv1", STEM, WIDTH1, 3)
    conv("block1.conv2", WIDTH1, WIDTH1, 3)
    conv("block1.proj", STEM, WIDTH1, 1)
    conv("block2.conv1", WIDTH1, WIDTH2, 3)
    conv("block2.conv2", WIDTH2, WIDTH2, 3)
    conv("block2.proj", WIDTH1, WIDTH2, 1)
    linear("feature", WIDTH2, FEATURE)
    linear("embed.fc1", FEATURE, EMBEDDING_DIM)
    linear("embed.fc2", EMBEDDING_DIM, EMBEDDING_DIM)
    linear("classifier", FEATURE, num_labels)
    return shapes


def num_labels_of(p: dict) -> int:
    return p["classifier.w"].shape[1]


def init_params(seed: int, num_labels: int) -> dict[str, np.ndarray]:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    if num_labels < 2:
        raise ValueError(f"num_labels must be >= 2, got {num_labels}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(num_labels).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def check_params(p: dict, num_labels: Optional[int] = None) -> None:
    if num_labels is None:
        if "classifier.w" not in p:
            raise ShapeMismatch("parameters lack classifier.w")
        num_labels = num_labels_of(p)
    expected = param_shapes(num_labels)
    if set(p) != set(expected):
        raise ShapeMismatch(f"parameter names differ: {sorted(set(p) ^ set(expected))}")
    for name, shape in expected.items():
        if p[name].shape != shape:
            raise ShapeMismatch(f"{name}: expected shape {shape}, got {p[name].shape}")


# -- layers -----------------------------------------------------------------

def conv_forward(x, w, b, stride, pad):
    """im2col convolution. x: (B, C, H, W), w: (F, C, k, k)."""
    f, c, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    bsz, _, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * oh * ow, c * k * k)
    out = cols @ w.reshape(f, -1).T + b
    out = out.reshape(bsz, oh, ow, f).transpose(0, 3, 1, 2)
    return out, (x.shape, cols, w, stride, pad, oh, ow)


def conv_backward(dout, cache):
    x_shape, cols, w, stride, pad, oh, ow = cache
    f, c, k, _ = w.shape
    bsz, _, h, wd = x_shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(f, -1)).reshape(bsz, oh, ow, c, k, k)
    dxp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return dx, dw, db


def _relu(x):
    return np.maximum(x, 0.0)


@dataclass
class ForwardCache:
    steps: dict = field(default_factory=dict)


def _conv(p, name, x, cache):
    stride, pad = _CONVS[name]
    out, cache.steps[name] = conv_forward(x, p[f"{name}.w"], p[f"{name}.b"], stride, pad)
    return out


def _block(p, name, x, cache):
    h1 = _conv(p, f"{name}.conv1", x, cache)
    a1 = _relu(h1)
    h2 = _conv(p, f"{name}.conv2", a1, cache)
    sc = _conv(p, f"{name}.proj", x, cache)
    pre = h2 + sc
    cache.steps[f"{name}.relu1"] = h1
    cache.steps[f"{name}.out"] = pre
    return _relu(pre)


def _block_backward(p, name, dout, cache, grads):
    dpre = dout * (cache.steps[f"{name}.out"] > 0)
    da1, grads[f"{name}.conv2.w"], grads[f"{name}.conv2.b"] = \
        conv_backward(dpre, cache.steps[f"{name}.conv2"])
    dh1 = da1 * (cache.steps[f"{name}.relu1"] > 0)
    dx_main, grads[f"{name}.conv1.w"], grads[f"{name}.conv1.b"] = \
        conv_backward(dh1, cache.steps[f"{name}.conv1"])
    dx_sc, grads[f"{name}.proj.w"], grads[f"{name}.proj.b"] = \
        conv_backward(dpre, cache.steps[f"{name}.proj"])
    return dx_main + dx_sc


def images_to_array(images) -> np.ndarray:
    """Stack images (SignalImage objects or H x W x 3 arrays) into (B, H, W, 3)."""
    if isinstance(images, np.ndarray):
        arr = np.asarray(images, dtype=np.float64)
    else:
        arr = np.stack([np.asarray(getattr(im, "pixels", im), dtype=np.float64)
                        for im in images])
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ShapeMismatch(f"expected a batch of H x W x 3 images, got {arr.shape}")
    if arr.shape[0] < 1:
        raise ShapeMismatch("empty batch")
    if arr.shape[1] < 1 or arr.shape[2] < 2:
        raise ImageTooSmall(f"images must be at least 1 x 2, got {arr.shape[1]} x {arr.shape[2]}")
    return arr


def forward(p: dict, images, train_mode: bool = False, return_cache: bool = False):
    """Return ``(embeddings (B, 128), logits (B, num_labels))``.

    ``train_mode`` is accepted for interface symmetry; the net has no
    dropout or normalization layers so it changes nothing.
    """
    check_params(p)
    x = images_to_array(images).transpose(0, 3, 1, 2)
    cache = ForwardCache()
    s = _conv(p, "stem", x, cache)
    cache.steps["stem.relu"] = s
    a = _relu(s)
    a = _block(p, "block1", a, cache)
    a = _block(p, "block2", a, cache)
    cache.steps["pool.shape"] = a.shape
    pooled = a.mean(axis=(2, 3))
    feat_pre = pooled @ p["feature.w"] + p["feature.b"]
    feat = _relu(feat_pre)
    e_pre = feat @ p["embed.fc1.w"] + p["embed.fc1.b"]
    e_hidden = _relu(e_pre)
    emb = e_hidden @ p["embed.fc2.w"] + p["embed.fc2.b"]
    logits = feat @ p["classifier.w"] + p["classifier.b"]
    cache.steps.update(pooled=pooled, feat_pre=feat_pre, feat=feat,
                       e_pre=e_pre, e_hidden=e_hidden)
    if return_cache:
        return emb, logits, cache
    return emb, logits


def backward(p: dict, cache: ForwardCache, d_emb, d_logits) -> dict[str, np.ndarray]:
    """Reverse-mode pass from embedding and logit gradients to all parameters."""
    st = cache.steps
    g = {}
    g["embed.fc2.w"] = st["e_hidden"].T @ d_emb
    g["embed.fc2.b"] = d_emb.sum(axis=0)
    d_hidden = (d_emb @ p["embed.fc2.w"].T) * (st["e_pre"] > 0)
    g["embed.fc1.w"] = st["feat"].T @ d_hidden
    g["embed.fc1.b"] = d_hidden.sum(axis=0)
    g["classifier.w"] = st["feat"].T @ d_logits
    g["classifier.b"] = d_logits.sum(axis=0)
    d_feat = d_hidden @ p["embed.fc1.w"].T + d_logits @ p["classifier.w"].T
    d_feat_pre = d_feat * (st["feat_pre"] > 0)
    g["feature.w"] = st["pooled"].T @ d_feat_pre
    g["feature.b"] = d_feat_pre.sum(axis=0)
    d_pooled = d_feat_pre @ p["feature.w"].T
    bsz, ch, h, w = st["pool.shape"]
    da = np.broadcast_to((d_pooled / (h * w))[:, :, None, None], (bsz, ch, h, w))
    da = _block_backward(p, "block2", da, cache, g)
    da = _block_backward(p, "block1", da, cache, g)
    ds = da * (st["stem.relu"] > 0)
    _, g["stem.w"], g["stem.b"] = conv_backward(ds, st["stem"])
    return {name: g[name] for name in p}


def embed(p: dict, images, batch_size: int = 64) -> np.ndarray:
    """Embeddings only, evaluated in chunks."""
    arr = images_to_array(images)
    out = [forward(p, arr[i:i + batch_size])[0] for i in range(0, len(arr), batch_size)]
    return np.concatenate(out, axis=0)


# -- loss -------------------------------------------------------------------

@dataclass
class LossReport:
    total: float
    triplet: float
    ce: float
    pairs: MinedPairs
    grads: Optional[dict] = None


def compute_loss(p: dict, images, labels, cfg: TrainConfig,
                 pairs: Optional[MinedPairs] = None, need_grads: bool = True) -> LossReport:
    """Weighted triplet + cross-entropy loss with optional gradients.

    Pairs are mined from the current embeddings unless given; mining is a
    selection step and is not differentiated through.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) < 2:
        raise ShapeMismatch("loss needs a batch of at least 2 labelled images")
    c = num_labels_of(p)
    if (not np.issubdtype(labels.dtype, np.integer)) or labels.min() < 0 or labels.max() >= c:
        raise InvalidLabel(f"labels must be integers in [0, {c})")
    emb, logits, cache = forward(p, images, train_mode=True, return_cache=True)
    if emb.shape[0] != len(labels):
        raise ShapeMismatch(f"{emb.shape[0]} images but {len(labels)} labels")
    w = cfg.weights
    if pairs is None:
        pairs = mine_multi_similarity(emb, labels, w.epsilon_mine, cfg.miner_mode)
    lt, d_emb = triplet_margin_loss_and_grad(emb, pairs, w.delta)
    lc, d_logits = cross_entropy_loss_and_grad(logits, labels)
    report = LossReport(total_loss(lt, lc, w), lt, lc, pairs)
    if need_grads:
        report.grads = backward(p, cache, w.alpha * d_emb, w.beta * d_logits)
    return report


def loss_and_grads(p: dict, images, labels, cfg: TrainConfig,
                   pairs: Optional[MinedPairs] = None):
    r = compute_loss(p, images, labels, cfg, pairs=pairs)
    return r.total, r.grads


def gate_signature(p: dict, images, labels, cfg: TrainConfig, pairs: MinedPairs) -> bytes:
    """Packed on/off state of every ReLU and triplet hinge for this batch.

    Two parameter vectors with equal signatures lie in the same smooth piece
    of the loss.
    """
    emb, _, cache = forward(p, images, return_cache=True)
    st = cache.steps
    gates = [st[k] > 0 for k in ("stem.relu", "block1.relu1", "block1.out",
                                 "block2.relu1", "block2.out", "feat_pre", "e_pre")]
    trip = pairs.triplets()
    if len(trip):
        a, pos, neg = trip.T
        margin = (np.linalg.norm(emb[a] - emb[pos], axis=1)
                  - np.linalg.norm(emb[a] - emb[neg], axis=1) + cfg.weights.delta)
        gates.append(margin > 0)
    return np.packbits(np.concatenate([g.ravel() for g in gates])).tobytes()


@dataclass
class GradCheckResult:
    max_relative_error: float
    checked: int
    redrawn: int


def grad_check(p: dict, images, labels, cfg: TrainConfig, n_samples: int, h: float,
               seed: int = 0, objective: Optional[Callable[[dict], tuple]] = None,
               kinks: str = "redraw", details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    Coordinates are drawn uniformly (seeded) and the error per coordinate is
    ``|analytic - numeric| / max(|numeric|, 1e-8)``.

    ``objective`` maps params to ``(loss, grads)``; by default it is the
    network loss with mined pairs frozen at ``p`` so a perturbation cannot
    flip the pair selection. For the network objective, a coordinate whose
    probes ``p +/- h`` straddle a ReLU or hinge kink gives a meaningless
    difference quotient; with ``kinks="redraw"`` such coordinates are
    replaced by fresh draws, with ``kinks="keep"`` they are scored anyway.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not h > 0:
        raise ValueError(f"step h must be > 0, got {h}")
    if kinks not in ("redraw", "keep"):
        raise ValueError(f"kinks must be 'redraw' or 'keep', got {kinks!r}")
    p = {k: np.array(v, dtype=np.float64) for k, v in p.items()}
    signature = None
    if objective is None:
        pairs = compute_loss(p, images, labels, cfg, need_grads=False).pairs

        def objective(q):
            return loss_and_grads(q, images, labels, cfg, pairs=pairs)

        if kinks == "redraw":
            def signature(q):
                return gate_signature(q, images, labels, cfg, pairs)

    _, grads = objective(p)
    names = list(p)
    sizes = np.array([p[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    order = rng.permutation(total) if total >= n_samples else rng.integers(total, size=n_samples)

    worst, checked, redrawn = 0.0, 0, 0
    for fid in order:
        if checked == n_samples:
            break
        t = int(np.searchsorted(offsets, fid, side="right") - 1)
        name, idx = names[t], int(fid - offsets[t])
        view = p[name].reshape(-1)
        orig = view[idx]
        view[idx] = orig + h
        f_plus = objective(p)[0]
        sig_plus = signature(p) if signature else None
        view[idx] = orig - h
        f_minus = objective(p)[0]
        sig_minus = signature(p) if signature else None
        view[idx] = orig
        if sig_plus != sig_minus:
            redrawn += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = grads[name].reshape(-1)[idx]
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))
        checked += 1
    result = GradCheckResult(worst, checked, redrawn)
    return result if details else result.max_relative_error


# -- optimizer --------------------------------------------------------------

@dataclass
class OptState:
    v: dict
    rho: float = 0.9
    eps: float = 1e-8
    step: int = 0


def init_opt_state(p: dict, rho: float = 0.9, eps: float = 1e-8) -> OptState:
    return OptState({k: np.zeros_like(v, dtype=np.float64) for k, v in p.items()}, rho, eps, 0)


def rmsprop_step(p: dict, grads: dict, state: OptState, lr: float):
    """One RMSProp update; returns new ``(params, state)`` and leaves inputs untouched.

    v <- rho * v + (1 - rho) * g^2
    theta <- theta - lr * g / (sqrt(v) + eps)
    """
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if set(grads) != set(p) or set(state.v) != set(p):
        raise ShapeMismatch("params, grads and optimizer state name different tensors")
    new_p, new_v = {}, {}
    for name, theta in p.items():
        g = grads[name]
        if g.shape != theta.shape or state.v[name].shape != theta.shape:
            raise ShapeMismatch(f"{name}: shapes {theta.shape}, {g.shape}, {state.v[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
        v = state.rho * state.v[name] + (1.0 - state.rho) * g * g
        new_v[name] = v
        new_p[name] = theta - lr * g / (np.sqrt(v) + state.eps)
    return new_p, OptState(new_v, state.rho, state.eps, state.step + 1)
