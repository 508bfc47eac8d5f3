"""Box geometry in center form ``(cx, cy, w, h)`` and anchor parameterization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_CLAMP = 4.0


def to_corners(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    return np.stack(
        [b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
         b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2],
        axis=-1,
    )


def iou(a, b) -> np.ndarray:
    """Intersection over union; broadcasts over leading dimensions."""
    ca, cb = to_corners(a), to_corners(b)
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    area_a = np.asarray(a)[..., 2] * np.asarray(a)[..., 3]
    area_b = np.asarray(b)[..., 2] * np.asarray(b)[..., 3]
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode(box, anchor) -> np.ndarray:
    """Offsets ``(dx, dy, dw, dh)`` that turn ``anchor`` into ``box``."""
    box = np.asarray(box, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    return np.stack(
        [
            (box[..., 0] - anchor[..., 0]) / anchor[..., 2],
            (box[..., 1] - anchor[..., 1]) / anchor[..., 3],
            np.log(box[..., 2] / anchor[..., 2]),
            np.log(box[..., 3] / anchor[..., 3]),
        ],
        axis=-1,
    )


def decode(offsets, anchor) -> np.ndarray:
    d = np.asarray(offsets, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    dw = np.clip(d[..., 2], -LOG_CLAMP, LOG_CLAMP)
    dh = np.clip(d[..., 3], -LOG_CLAMP, LOG_CLAMP)
    return np.stack(
        [
            anchor[..., 0] + d[..., 0] * anchor[..., 2],
            anchor[..., 1] + d[..., 1] * anchor[..., 3],
            anchor[..., 2] * np.exp(dw),
            anchor[..., 3] * np.exp(dh),
        ],
        axis=-1,
    )


def clamp_box(box, width: float, height: float, min_size: float = 4.0) -> np.ndarray:
    """Shrink and shift ``box`` so it lies inside a ``width`` x ``height`` frame."""
    cx, cy, w, h = (float(v) for v in box)
    w = min(max(w, min_size), width)
    h = min(max(h, min_size), height)
    cx = min(max(cx, w / 2), width - w / 2)
    cy = min(max(cy, h / 2), height - h / 2)
    return np.array([cx, cy, w, h])


@dataclass(frozen=True)
class AnchorSet:
    """Anchor shapes replicated over a square score grid.

    Candidate ``j`` is laid out anchor-major: ``j = a * G * G + row * G + col``.
    """

    shapes: tuple = ((32.0, 32.0), (48.0, 24.0), (24.0, 48.0))
    grid: int = 17
    stride: float = 2.0
    center: float = 32.0  # search-region pixel under the middle grid cell

    @property
    def count(self) -> int:
        return len(self.shapes)

    @property
    def n(self) -> int:
        return self.count * self.grid * self.grid

    def boxes(self) -> np.ndarray:
        """[A, G, G, 4] anchors in search-region pixel coordinates."""
        offs = self.center + self.stride * (np.arange(self.grid) - (self.grid - 1) / 2)
        out = np.empty((self.count, self.grid, self.grid, 4))
        for a, (w, h) in enumerate(self.shapes):
            out[a, :, :, 0] = offs[None, :]
            out[a, :, :, 1] = offs[:, None]
            out[a, :, :, 2] = w
            out[a, :, :, 3] = h
        return out

    def flat(self) -> np.ndarray:
        return self.boxes().reshape(-1, 4)
