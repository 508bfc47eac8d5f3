"""Toy anchor-based Siamese network: shared encoder, depthwise correlation, 1x1 heads."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import diffnum as dn
from ..diffnum import Tensor
from .boxes import AnchorSet

SEARCH_SIZE = 64
TEMPLATE_SIZE = 32
SEARCH_CONTEXT = 2.0
TEMPLATE_CONTEXT = 1.5
PIXEL_MEAN = 127.5
PIXEL_SCALE = 1.0 / 64.0

# (name, stride) for the three encoder layers; 3x3 kernels, no padding
ENCODER_LAYERS = (("conv1", 1), ("conv2", 2), ("conv3", 1))
WEIGHTS_MAGIC = b"EUSM"
WEIGHTS_VERSION = 1


class WeightsError(ValueError):
    pass


@dataclass
class ClassificationOutput:
    """Foreground probability per candidate, shaped [A, G, G] (flatten for N)."""

    scores: Tensor

    def flat(self) -> np.ndarray:
        return self.scores.data.reshape(-1)


@dataclass
class RegressionOutput:
    """Offsets shaped [4, A, G, G]: rows are dx, dy (location) and dw, dh (shape)."""

    offsets: Tensor

    @property
    def loc(self) -> Tensor:
        return dn.take(self.offsets, slice(0, 2))

    @property
    def shape(self) -> Tensor:
        return dn.take(self.offsets, slice(2, 4))


@dataclass
class TrackerModel:
    params: dict
    anchors: AnchorSet = field(default_factory=AnchorSet)
    window_weight: float = 0.1
    size_rate: float = 0.1  # fraction of each predicted size change applied per frame

    def __post_init__(self):
        a = self.anchors.count
        if self.params["cls_w"].shape[0] != 2 * a:
            raise WeightsError(f"cls head has {self.params['cls_w'].shape[0]} channels, expected {2 * a}")
        if self.params["reg_w"].shape[0] != 4 * a:
            raise WeightsError(f"reg head has {self.params['reg_w'].shape[0]} channels, expected {4 * a}")
        if not 0.0 <= self.window_weight <= 1.0:
            raise WeightsError(f"window_weight {self.window_weight} outside [0, 1]")
        if not 0.0 <= self.size_rate <= 1.0:
            raise WeightsError(f"size_rate {self.size_rate} outside [0, 1]")

    @classmethod
    def init(cls, seed: int = 0, widths=(16, 32, 32), anchors: Optional[AnchorSet] = None,
             window_weight: float = 0.1, size_rate: float = 0.1) -> "TrackerModel":
        """He-initialised weights; ``widths`` are the encoder output channels."""
        anchors = anchors or AnchorSet()
        rng = np.random.default_rng(seed)
        params = {}
        c_in = 3
        for (name, _), c_out in zip(ENCODER_LAYERS, widths):
            fan_in = c_in * 9
            params[f"{name}_w"] = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))
            params[f"{name}_b"] = np.zeros(c_out)
            c_in = c_out
        a = anchors.count
        params["cls_w"] = rng.normal(scale=np.sqrt(1.0 / c_in), size=(2 * a, c_in, 1, 1))
        params["cls_b"] = np.zeros(2 * a)
        params["reg_w"] = rng.normal(scale=0.1 * np.sqrt(1.0 / c_in), size=(4 * a, c_in, 1, 1))
        params["reg_b"] = np.zeros(4 * a)
        return cls(params=params, anchors=anchors, window_weight=window_weight, size_rate=size_rate)

    @property
    def channels(self) -> int:
        return self.params["conv3_w"].shape[0]

    def tensors(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    # ---------------------------------------------------------------- forward

    def encode(self, image: Tensor, weights: Optional[dict] = None) -> Tensor:
        """Encoder F on raw [0,255] pixels, [3,H,W] or [B,3,H,W]."""
        w = weights or self.tensors()
        h = dn.scale(dn.shift(image, -PIXEL_MEAN), PIXEL_SCALE)
        for k, (name, stride) in enumerate(ENCODER_LAYERS):
            h = dn.conv2d(h, w[f"{name}_w"], stride=stride, bias=w[f"{name}_b"])
            if k < len(ENCODER_LAYERS) - 1:
                h = dn.relu(h)
        return h

    def predict(self, template_feat: Tensor, search_feat: Tensor, weights: Optional[dict] = None):
        """Classification and regression over all candidates."""
        if template_feat.shape[-3] != search_feat.shape[-3]:
            raise dn.ShapeError(
                "predict", "C", f"template {template_feat.shape[-3]} vs search {search_feat.shape[-3]}"
            )
        w = weights or self.tensors()
        t_area = template_feat.shape[-1] * template_feat.shape[-2]
        corr = dn.scale(dn.xcorr_depthwise(search_feat, template_feat), 1.0 / t_area)
        a = self.anchors.count
        logits = dn.conv2d(corr, w["cls_w"], bias=w["cls_b"])
        offsets = dn.conv2d(corr, w["reg_w"], bias=w["reg_b"])
        lead = logits.shape[:-3]
        g = logits.shape[-2:]
        logits = dn.reshape(logits, lead + (2, a) + g)
        offsets = dn.reshape(offsets, lead + (4, a) + g)
        return logits, offsets

    def classify(self, logits: Tensor) -> ClassificationOutput:
        probs = dn.softmax(logits, axis=-4)
        return ClassificationOutput(dn.take(probs, (Ellipsis, 1, slice(None), slice(None), slice(None))))

    def forward(self, template_feat: Tensor, search_feat: Tensor, weights: Optional[dict] = None):
        logits, offsets = self.predict(template_feat, search_feat, weights)
        return self.classify(logits), RegressionOutput(offsets)

    # ---------------------------------------------------------------- persistence

    def save(self, path) -> bytes:
        layers = dict(self.params)
        layers["meta.window_weight"] = np.array([self.window_weight])
        layers["meta.size_rate"] = np.array([self.size_rate])
        layers["meta.anchor_shapes"] = np.array(self.anchors.shapes, dtype=np.float64)
        layers["meta.anchor_grid"] = np.array(
            [self.anchors.grid, self.anchors.stride, self.anchors.center], dtype=np.float64
        )
        payload = encode_weights(layers)
        Path(path).write_bytes(payload)
        return payload

    @classmethod
    def load(cls, path) -> "TrackerModel":
        layers = decode_weights(Path(path).read_bytes())
        try:
            ww = float(layers.pop("meta.window_weight")[0])
            rate = float(layers.pop("meta.size_rate", np.array([1.0]))[0])
            shapes = tuple(tuple(float(x) for x in row) for row in layers.pop("meta.anchor_shapes"))
            grid, stride, center = layers.pop("meta.anchor_grid")
        except KeyError as exc:
            raise WeightsError(f"weights file lacks {exc}") from None
        anchors = AnchorSet(shapes=shapes, grid=int(grid), stride=float(stride), center=float(center))
        return cls(params=layers, anchors=anchors, window_weight=ww, size_rate=rate)


def encode_weights(layers: dict) -> bytes:
    """``EUSM`` | version u8 | count u32 | per layer: name, rank, dims, float64 LE values."""
    out = [WEIGHTS_MAGIC, struct.pack("<BI", WEIGHTS_VERSION, len(layers))]
    for name in sorted(layers):
        arr = np.ascontiguousarray(layers[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_weights(buf: bytes) -> dict:
    if buf[:4] != WEIGHTS_MAGIC:
        raise WeightsError("bad magic, not an EUSM weights file")
    try:
        version, count = struct.unpack_from("<BI", buf, 4)
        if version != WEIGHTS_VERSION:
            raise WeightsError(f"unsupported weights version {version}")
        pos = 9
        layers = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(buf):
                raise WeightsError(f"layer {name!r} truncated")
            layers[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise WeightsError(f"truncated weights file: {exc}") from None
    if pos != len(buf):
        raise WeightsError(f"{len(buf) - pos} trailing bytes in weights file")
    return layers
