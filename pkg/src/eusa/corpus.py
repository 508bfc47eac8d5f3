"""Synthetic moving-object videos and their on-disk format.

Layout written by :func:`save_corpus`::

    <dir>/manifest.json
    <dir>/video_<id>/frame_<n>.ppm     binary P6, 8-bit RGB
    <dir>/video_<id>/gt.json           [[cx, cy, w, h], ...]
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

SHAPES = ("rectangle", "ellipse", "triangle")
MANIFEST_VERSION = 1


class CorpusError(ValueError):
    """Malformed or inconsistent corpus data; ``path`` names the culprit file."""

    def __init__(self, message: str, path: Optional[Path] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path is not None else message)


@dataclass
class CorpusConfig:
    n_videos: int = 20
    frames_per_video: int = 40
    frame_size: int = 128
    shapes: tuple = SHAPES
    object_size: tuple = (18.0, 30.0)  # longer side, pixels
    aspect_range: tuple = (0.7, 1.4)  # w / h
    texture_noise: float = 10.0
    min_contrast: float = 90.0  # object vs. background base colour distance, RGB units
    velocity_range: tuple = (0.5, 2.5)  # pixels per frame
    jitter: float = 0.3
    direction_change_prob: float = 0.05
    scale_drift: float = 0.006  # max relative size change per frame
    split_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_videos < 2:
            raise CorpusError(f"n_videos must be >= 2, got {self.n_videos}")
        if self.frames_per_video < 2:
            raise CorpusError(f"frames_per_video must be >= 2, got {self.frames_per_video}")
        n_train = self.n_train
        if n_train < 1 or n_train >= self.n_videos:
            raise CorpusError(f"split_fraction {self.split_fraction} leaves an empty half")
        if self.object_size[1] * max(1.0, self.aspect_range[1]) >= self.frame_size:
            raise CorpusError(
                f"object of size {self.object_size[1]} does not fit a {self.frame_size}px frame"
            )
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise CorpusError(f"unknown object family {sorted(unknown)}")
        lo, hi = self.velocity_range
        if lo < 0 or hi < lo:
            raise CorpusError(f"bad velocity_range {self.velocity_range}")
        if not 0.0 <= self.min_contrast <= 200.0:
            raise CorpusError(f"min_contrast {self.min_contrast} outside [0, 200]")

    @property
    def n_train(self) -> int:
        return int(round(self.n_videos * self.split_fraction))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise CorpusError(f"unknown corpus config keys {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class VideoSequence:
    id: int
    frames: np.ndarray  # [T, H, W, 3] uint8
    gt_boxes: np.ndarray  # [T, 4] float64 (cx, cy, w, h)
    split: str = "train"

    def __post_init__(self):
        if len(self.frames) != len(self.gt_boxes):
            raise CorpusError(
                f"video {self.id}: {len(self.frames)} frames but {len(self.gt_boxes)} boxes"
            )

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class VideoCorpus:
    videos: list
    config: CorpusConfig = field(default_factory=CorpusConfig)

    @property
    def train(self) -> list:
        return [v for v in self.videos if v.split == "train"]

    @property
    def holdout(self) -> list:
        return [v for v in self.videos if v.split == "holdout"]

    def subset(self, split: str) -> list:
        if split == "all":
            return list(self.videos)
        if split not in ("train", "holdout"):
            raise CorpusError(f"unknown split {split!r}")
        return self.train if split == "train" else self.holdout

    def __len__(self) -> int:
        return len(self.videos)


# ------------------------------------------------------------------ generation


def _smooth_noise(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    n = gaussian_filter(rng.normal(size=shape), sigma=(sigma, sigma, 0), mode="wrap")
    return n / (n.std() + 1e-12)


def _object_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if kind == "ellipse":
        inside &= u * u + v * v <= 1
    elif kind == "triangle":
        inside &= np.abs(u) <= (v + 1) / 2
    return inside


def _render_frame(background, obj_color, tex, kind, box, rng, noise, ss=3):
    size = background.shape[0]
    cx, cy, w, h = box
    # supersampled coverage of the object, anchored to its own coordinates
    offs = (np.arange(ss) + 0.5) / ss
    px = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    u = (px[None, :] - cx) / (w / 2)
    v = (px[:, None] - cy) / (h / 2)
    inside = _object_mask(kind, u, v)
    cover = inside.reshape(size, ss, size, ss).mean(axis=(1, 3))
    uc = (np.arange(size) + 0.5 - cx) / (w / 2)
    vc = (np.arange(size) + 0.5 - cy) / (h / 2)
    pattern = np.zeros((size, size))
    for fu, fv, ph, amp in tex:
        pattern += amp * np.sin(fu * uc[None, :] + fv * vc[:, None] + ph)
    obj = obj_color[None, None, :] + pattern[:, :, None]
    img = background * (1 - cover[:, :, None]) + obj * cover[:, :, None]
    img = img + rng.normal(scale=noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_video(config: CorpusConfig, index: int) -> VideoSequence:
    """One video, fully determined by ``(config.seed, index)``."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, index]))
    size = config.frame_size
    T = config.frames_per_video

    base = rng.uniform(40, 215, size=3)
    background = base[None, None, :] + 35.0 * _smooth_noise(rng, (size, size, 3), sigma=4.0)
    for _ in range(100):
        obj_color = rng.uniform(20, 235, size=3)
        if np.linalg.norm(obj_color - base) > config.min_contrast:
            break
    tex = [
        (rng.uniform(-6, 6), rng.uniform(-6, 6), rng.uniform(0, 2 * np.pi), rng.uniform(5, 15))
        for _ in range(3)
    ]
    kind = config.shapes[int(rng.integers(len(config.shapes)))]

    long_side = rng.uniform(*config.object_size)
    aspect = math.exp(rng.uniform(math.log(config.aspect_range[0]), math.log(config.aspect_range[1])))
    w, h = (long_side, long_side / aspect) if aspect >= 1 else (long_side * aspect, long_side)
    if max(w, h) >= size:
        raise CorpusError(f"object {w:.1f}x{h:.1f} larger than frame {size}")
    drift = rng.uniform(-config.scale_drift, config.scale_drift)
    speed = rng.uniform(*config.velocity_range)
    theta = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([math.cos(theta), math.sin(theta)])
    pos = np.array([rng.uniform(w / 2 + 1, size - w / 2 - 1), rng.uniform(h / 2 + 1, size - h / 2 - 1)])

    frames = np.empty((T, size, size, 3), dtype=np.uint8)
    boxes = np.empty((T, 4))
    lo_size, hi_size = 0.6 * config.object_size[0], min(1.4 * config.object_size[1], size / 2)
    for t in range(T):
        box = (pos[0], pos[1], w, h)
        boxes[t] = box
        frames[t] = _render_frame(background, obj_color, tex, kind, box, rng, config.texture_noise)

        if rng.random() < config.direction_change_prob:
            theta = rng.uniform(0, 2 * np.pi)
            vel = speed * np.array([math.cos(theta), math.sin(theta)])
        if max(w, h) * (1 + drift) > hi_size or min(w, h) * (1 + drift) < lo_size:
            drift = -drift
        w, h = w * (1 + drift), h * (1 + drift)
        step = vel + rng.normal(scale=config.jitter, size=2) if config.jitter > 0 else vel.copy()
        pos = pos + step
        for ax, half in ((0, w / 2), (1, h / 2)):
            if pos[ax] - half < 0:
                pos[ax] = 2 * half - pos[ax]
                vel[ax] = abs(vel[ax])
            elif pos[ax] + half > size:
                pos[ax] = 2 * (size - half) - pos[ax]
                vel[ax] = -abs(vel[ax])
            pos[ax] = min(max(pos[ax], half), size - half)
    return VideoSequence(id=index, frames=frames, gt_boxes=boxes)


def generate_corpus(config: Optional[CorpusConfig] = None) -> VideoCorpus:
    config = config or CorpusConfig()
    config.validate()
    videos = [generate_video(config, i) for i in range(config.n_videos)]
    order = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5B1])).permutation(config.n_videos)
    train_ids = set(order[: config.n_train].tolist())
    for v in videos:
        v.split = "train" if v.id in train_ids else "holdout"
    return VideoCorpus(videos=videos, config=config)


# ------------------------------------------------------------------ persistence


def write_ppm(path: Path, img: np.ndarray) -> bytes:
    h, w, _ = img.shape
    payload = f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()
    Path(path).write_bytes(payload)
    return payload


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CorpusError("missing frame file", path) from None
    m = _PPM_HEADER.match(raw)
    if m is None:
        raise CorpusError("not a binary P6 image", path)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise CorpusError(f"unsupported maxval {maxval}", path)
    # exactly one whitespace byte separates maxval from the raster
    body = raw[m.end():]
    if len(body) != w * h * 3:
        raise CorpusError(f"truncated frame: {len(body)} of {w * h * 3} bytes", path)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_corpus(corpus: VideoCorpus, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in corpus.videos:
        vdir = root / f"video_{v.id:03d}"
        vdir.mkdir(exist_ok=True)
        frame_hashes = []
        for n, frame in enumerate(v.frames):
            payload = write_ppm(vdir / f"frame_{n:04d}.ppm", frame)
            frame_hashes.append(_sha256(payload))
        gt_text = json.dumps([[float(x) for x in b] for b in v.gt_boxes]) + "\n"
        (vdir / "gt.json").write_text(gt_text)
        entries.append(
            {
                "id": v.id,
                "split": v.split,
                "n_frames": len(v),
                "frame_sha256": frame_hashes,
                "gt_sha256": _sha256(gt_text.encode()),
            }
        )
    manifest = {
        "format": "eusa-corpus",
        "version": MANIFEST_VERSION,
        "config": corpus.config.to_dict(),
        "videos": entries,
    }
    (root / "manifest.json").write_text(_dumps(manifest))
    return root


def load_corpus(directory) -> VideoCorpus:
    root = Path(directory)
    mpath = root / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise CorpusError("missing manifest", mpath) from None
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed manifest: {exc}", mpath) from None
    if not isinstance(manifest, dict) or manifest.get("format") != "eusa-corpus":
        raise CorpusError("not an eusa corpus manifest", mpath)
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorpusError(f"unsupported manifest version {manifest.get('version')}", mpath)
    try:
        config = CorpusConfig.from_dict(manifest["config"])
        entries = manifest["videos"]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"malformed manifest: {exc}", mpath) from None
    on_disk = sorted(p.name for p in root.glob("video_*") if p.is_dir())
    listed = sorted(f"video_{e['id']:03d}" for e in entries)
    if on_disk != listed:
        raise CorpusError(f"manifest lists {len(listed)} videos, directory holds {len(on_disk)}", mpath)

    videos = []
    for e in entries:
        vdir = root / f"video_{e['id']:03d}"
        gpath = vdir / "gt.json"
        try:
            gt_text = gpath.read_text()
        except FileNotFoundError:
            raise CorpusError("missing ground-truth file", gpath) from None
        if _sha256(gt_text.encode()) != e["gt_sha256"]:
            raise CorpusError("checksum mismatch", gpath)
        boxes = np.array(json.loads(gt_text), dtype=np.float64)
        frames = []
        for n in range(e["n_frames"]):
            fpath = vdir / f"frame_{n:04d}.ppm"
            img = read_ppm(fpath)
            if _sha256(fpath.read_bytes()) != e["frame_sha256"][n]:
                raise CorpusError("checksum mismatch", fpath)
            frames.append(img)
        videos.append(VideoSequence(id=e["id"], frames=np.stack(frames), gt_boxes=boxes, split=e["split"]))
    return VideoCorpus(videos=videos, config=config)
