"""Cropping, box selection and the per-video tracking loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import diffnum as dn
from ..diffnum import Tensor
from . import boxes as bx
from .model import (
    SEARCH_CONTEXT,
    SEARCH_SIZE,
    TEMPLATE_CONTEXT,
    TEMPLATE_SIZE,
    ClassificationOutput,
    RegressionOutput,
    TrackerModel,
)

OTB = "otb"
VOT = "vot"
POLICIES = (OTB, VOT)
VOT_SKIP_FRAMES = 5

# per-frame status codes in a TrackResult
INIT, TRACKED, FAILURE, SKIPPED = "init", "tracked", "failure", "skipped"


@dataclass(frozen=True)
class CropTransform:
    """Maps crop pixel coordinates back to the frame: ``frame = crop / scale + origin``."""

    x0: float
    y0: float
    scale: float

    def to_frame(self, box) -> np.ndarray:
        cx, cy, w, h = box
        return np.array([cx / self.scale + self.x0, cy / self.scale + self.y0, w / self.scale, h / self.scale])

    def to_crop(self, box) -> np.ndarray:
        b = np.asarray(box, dtype=np.float64)
        return np.stack(
            [(b[..., 0] - self.x0) * self.scale, (b[..., 1] - self.y0) * self.scale,
             b[..., 2] * self.scale, b[..., 3] * self.scale],
            axis=-1,
        )


def crop_region(frame: np.ndarray, center, side: float, out_size: int):
    """Bilinear square crop of ``side`` frame pixels; out-of-frame pixels take the channel mean.

    Returns a float64 array [3, out_size, out_size] and the :class:`CropTransform`.
    """
    if side <= 0:
        raise ValueError(f"degenerate crop side {side}")
    H, W, _ = frame.shape
    cx, cy = center
    x0, y0 = cx - side / 2, cy - side / 2
    scale = out_size / side
    # sample positions in pixel-index space (pixel k covers [k, k+1))
    p = (np.arange(out_size) + 0.5) / scale - 0.5
    xs, ys = p + x0, p + y0
    img = frame.astype(np.float64)
    mean = img.reshape(-1, 3).mean(axis=0)

    def axis_weights(coords):
        i0 = np.floor(coords).astype(int)
        f = coords - i0
        return i0, i0 + 1, 1.0 - f, f

    xi0, xi1, wx0, wx1 = axis_weights(xs)
    yi0, yi1, wy0, wy1 = axis_weights(ys)
    out = np.zeros((out_size, out_size, 3))
    for yi, wy in ((yi0, wy0), (yi1, wy1)):
        yin = (yi >= 0) & (yi < H)
        yc = np.clip(yi, 0, H - 1)
        for xi, wx in ((xi0, wx0), (xi1, wx1)):
            xin = (xi >= 0) & (xi < W)
            xc = np.clip(xi, 0, W - 1)
            vals = img[yc[:, None], xc[None, :]]
            inside = (yin[:, None] & xin[None, :])[:, :, None]
            vals = np.where(inside, vals, mean[None, None, :])
            out += (wy[:, None] * wx[None, :])[:, :, None] * vals
    return out.transpose(2, 0, 1).copy(), CropTransform(x0, y0, scale)


def extract_search_region(frame: np.ndarray, box, out_size: int = SEARCH_SIZE):
    cx, cy, w, h = box
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {tuple(box)}")
    return crop_region(frame, (cx, cy), SEARCH_CONTEXT * max(w, h), out_size)


def extract_template(frame: np.ndarray, box, out_size: int = TEMPLATE_SIZE):
    cx, cy, w, h = box
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box {tuple(box)}")
    return crop_region(frame, (cx, cy), TEMPLATE_CONTEXT * max(w, h), out_size)


def template_embed(template_image, model: TrackerModel) -> Tensor:
    """Encoder output for a [3,32,32] template crop."""
    return model.encode(dn.as_tensor(template_image))


def apply_perturbation(search: np.ndarray, delta: Optional[np.ndarray]) -> np.ndarray:
    if delta is None:
        return search
    return np.clip(search + delta, 0.0, 255.0)


def hanning_window(grid: int) -> np.ndarray:
    h = np.hanning(grid)
    return np.outer(h, h)


def select_box(cls: ClassificationOutput, reg: RegressionOutput, model: TrackerModel,
               transform: CropTransform, frame_shape, window_weight: Optional[float] = None):
    """Blend scores with a Hanning window, decode the best candidate, map to the frame.

    Returns ``(box, j)`` where ``j`` is the flat candidate index.
    """
    ww = model.window_weight if window_weight is None else window_weight
    anchors = model.anchors
    scores = cls.scores.data.reshape(anchors.count, anchors.grid, anchors.grid)
    win = hanning_window(anchors.grid)[None, :, :]
    blended = (1.0 - ww) * scores + ww * win
    j = int(np.argmax(blended.reshape(-1)))
    offsets = reg.offsets.data.reshape(4, -1)[:, j]
    crop_box = bx.decode(offsets, anchors.flat()[j])
    H, W = frame_shape[:2]
    return bx.clamp_box(transform.to_frame(crop_box), W, H), j


@dataclass
class TrackResult:
    video_id: int
    policy: str
    boxes: np.ndarray  # [T, 4]; NaN rows on skipped frames
    gt_boxes: np.ndarray
    ious: np.ndarray  # [T]
    status: list = field(default_factory=list)

    @property
    def failures(self) -> int:
        return sum(1 for s in self.status if s == FAILURE)

    @property
    def init_frames(self) -> list:
        return [t for t, s in enumerate(self.status) if s == INIT]

    @property
    def evaluated(self) -> np.ndarray:
        """Mask of frames carrying a tracker prediction."""
        return np.array([s in (TRACKED, FAILURE) for s in self.status])


class SiameseTracker:
    """Stateful wrapper: ``init`` on a ground-truth box, then ``update`` per frame."""

    def __init__(self, model: TrackerModel, delta: Optional[np.ndarray] = None):
        self.model = model
        self.delta = delta
        self.weights = model.tensors()
        self.box = None
        self.template_feat = None
        self.frames_since_init = 0

    def init(self, frame: np.ndarray, box) -> None:
        z, _ = extract_template(frame, box)
        self.template_feat = self.model.encode(Tensor(z), self.weights)
        self.box = np.asarray(box, dtype=np.float64)
        self.frames_since_init = 0

    def update(self, frame: np.ndarray) -> np.ndarray:
        x, transform = extract_search_region(frame, self.box)
        x = apply_perturbation(x, self.delta)
        feat = self.model.encode(Tensor(x), self.weights)
        cls, reg = self.model.forward(self.template_feat, feat, self.weights)
        box, _ = select_box(cls, reg, self.model, transform, frame.shape)
        # damped size update: the new size moves only part way toward the prediction
        rate = self.model.size_rate
        box[2:] = (1.0 - rate) * self.box[2:] + rate * box[2:]
        self.box = bx.clamp_box(box, frame.shape[1], frame.shape[0])
        self.frames_since_init += 1
        return self.box


def track_sequence(model: TrackerModel, video, perturbation=None, policy: str = OTB) -> TrackResult:
    """Run the tracker over ``video``; ``perturbation`` is a [3,64,64] array or object with ``.values``."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    T = len(video.frames)
    if T == 0:
        raise ValueError(f"video {video.id} is empty")
    if T < 2:
        raise ValueError(f"video {video.id} needs at least 2 frames")
    delta = getattr(perturbation, "values", perturbation)
    tracker = SiameseTracker(model, None if delta is None else np.asarray(delta, dtype=np.float64))
    boxes = np.full((T, 4), np.nan)
    ious = np.zeros(T)
    status = []
    resume_at = 0
    t = 0
    while t < T:
        frame, gt = video.frames[t], video.gt_boxes[t]
        if t == resume_at:
            tracker.init(frame, gt)
            boxes[t] = gt
            ious[t] = 1.0
            status.append(INIT)
            t += 1
            continue
        pred = tracker.update(frame)
        boxes[t] = pred
        ious[t] = float(bx.iou(pred, gt))
        if policy == VOT and ious[t] <= 0.0:
            status.append(FAILURE)
            skipped = min(VOT_SKIP_FRAMES, T - t - 1)
            status.extend([SKIPPED] * skipped)
            t += 1 + skipped
            resume_at = t
            continue
        status.append(TRACKED)
        t += 1
    return TrackResult(video_id=video.id, policy=policy, boxes=boxes, gt_boxes=np.asarray(video.gt_boxes),
                       ious=ious, status=status)
