"""Supervised training of the toy tracker on synthetic template/search pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import diffnum as dn
from ..diffnum import Tape, Tensor
from . import boxes as bx
from .boxes import AnchorSet
from .model import SEARCH_CONTEXT, TrackerModel
from .tracking import extract_template, crop_region
from .model import SEARCH_SIZE

logger = logging.getLogger(__name__)

POS_IOU = 0.6
NEG_IOU = 0.3


@dataclass
class TrainConfig:
    epochs: int = 60
    samples_per_epoch: int = 256
    batch_size: int = 16
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_at: tuple = (0.7, 0.9)  # fractions of the epoch count; lr x0.1 at each
    max_frame_gap: int = 8
    center_jitter: float = 0.3  # fraction of the target's long side
    scale_jitter: float = 0.15  # log-scale half-range of the crop size
    reg_weight: float = 1.0
    grad_clip: float = 10.0
    window_weight: float = 0.1
    size_rate: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    skipped: int = 0


def anchor_targets(gt_crop_box, anchors: AnchorSet):
    """Labels (1 pos, 0 neg, -1 ignore) and regression targets for one search crop."""
    flat = anchors.flat()
    overlap = bx.iou(flat, np.asarray(gt_crop_box)[None, :])
    labels = np.full(flat.shape[0], -1.0)
    labels[overlap < NEG_IOU] = 0.0
    labels[overlap > POS_IOU] = 1.0
    targets = bx.encode(np.broadcast_to(gt_crop_box, flat.shape), flat)
    g = anchors.grid
    return (labels.reshape(anchors.count, g, g),
            targets.T.reshape(4, anchors.count, g, g))


def sample_pair(video, rng: np.random.Generator, cfg: TrainConfig, anchors: AnchorSet):
    """One (template, search, labels, reg targets) training example, or None if no positives."""
    T = len(video.frames)
    t0 = int(rng.integers(T))
    lo, hi = max(0, t0 - cfg.max_frame_gap), min(T - 1, t0 + cfg.max_frame_gap)
    t1 = int(rng.integers(lo, hi + 1))
    z, _ = extract_template(video.frames[t0], video.gt_boxes[t0])
    cx, cy, w, h = video.gt_boxes[t1]
    m = max(w, h)
    shift = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2) * m
    side = SEARCH_CONTEXT * m * np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter))
    x, tf = crop_region(video.frames[t1], (cx + shift[0], cy + shift[1]), side, SEARCH_SIZE)
    labels, targets = anchor_targets(tf.to_crop(video.gt_boxes[t1]), anchors)
    if not np.any(labels == 1):
        return None
    return z, x, labels, targets


def batch_loss(model: TrackerModel, weights: dict, z, x, labels, targets, reg_weight: float):
    zf = model.encode(Tensor(z), weights)
    xf = model.encode(Tensor(x), weights)
    logits, offsets = model.predict(zf, xf, weights)
    logp = dn.log_softmax(logits, axis=-4)  # [B, 2, A, G, G]
    pos = (labels == 1).astype(np.float64)
    neg = (labels == 0).astype(np.float64)
    B = len(labels)
    # per-sample balance: half the weight on positives, half on negatives
    wpos = pos / np.maximum(pos.sum(axis=(1, 2, 3), keepdims=True), 1) * (0.5 / B)
    wneg = neg / np.maximum(neg.sum(axis=(1, 2, 3), keepdims=True), 1) * (0.5 / B)
    lp_fg = dn.take(logp, (slice(None), 1))
    lp_bg = dn.take(logp, (slice(None), 0))
    cls_loss = dn.scale(dn.add(dn.sum_all(dn.mul(lp_fg, Tensor(wpos))), dn.sum_all(dn.mul(lp_bg, Tensor(wneg)))), -1.0)
    diff = dn.sub(offsets, Tensor(targets))
    wreg = np.broadcast_to(pos[:, None], targets.shape) / np.maximum(pos.sum(), 1) / 4.0
    reg_loss = dn.sum_all(dn.mul(dn.smooth_l1(diff, beta=1.0 / 9.0), Tensor(wreg)))
    return dn.add(cls_loss, dn.scale(reg_loss, reg_weight))


def train_toy_tracker(videos, epochs: Optional[int] = None, seed: Optional[int] = None,
                      config: Optional[TrainConfig] = None, widths=(16, 32, 32),
                      history: Optional[TrainHistory] = None) -> TrackerModel:
    """Train a fresh tracker on ``videos``; the result depends only on the inputs and seed."""
    cfg = config or TrainConfig()
    if epochs is not None:
        cfg.epochs = epochs
    if seed is not None:
        cfg.seed = seed
    videos = list(getattr(videos, "videos", videos))
    if not videos:
        raise ValueError("cannot train on an empty corpus")
    history = history if history is not None else TrainHistory()
    model = TrackerModel.init(seed=cfg.seed, widths=widths, window_weight=cfg.window_weight,
                             size_rate=cfg.size_rate)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    lr = cfg.lr
    steps = max(1, cfg.samples_per_epoch // cfg.batch_size)
    decay = {int(f * cfg.epochs) for f in cfg.lr_decay_at}
    for epoch in range(cfg.epochs):
        if epoch in decay:
            lr *= 0.1
        losses = []
        for _ in range(steps):
            batch = []
            while len(batch) < cfg.batch_size:
                item = sample_pair(videos[int(rng.integers(len(videos)))], rng, cfg, model.anchors)
                if item is None:
                    history.skipped += 1
                    continue
                batch.append(item)
            z, x, labels, targets = (np.stack(col) for col in zip(*batch))
            weights = model.tensors(requires_grad=True)
            with Tape() as tape:
                loss = batch_loss(model, weights, z, x, labels, targets, cfg.reg_weight)
            tape.backward(loss)
            losses.append(loss.item())
            grads = {k: t.grad + cfg.weight_decay * t.data for k, t in weights.items()}
            gnorm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            clip = min(1.0, cfg.grad_clip / (gnorm + 1e-12))
            for k in model.params:
                velocity[k] = cfg.momentum * velocity[k] + clip * grads[k]
                model.params[k] = model.params[k] - lr * velocity[k]
        history.epoch_loss.append(float(np.mean(losses)))
        logger.info("epoch %d loss %.4f", epoch, history.epoch_loss[-1])
    return model
