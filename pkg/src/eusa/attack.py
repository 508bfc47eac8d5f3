"""Universal shuffle attack: greedy-gradient sampling, k shuffled PGD candidates, max-loss pick."""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import diffnum as dn
from .diffnum import Tape, Tensor
from .losses import TripleLossConfig, triple_loss_terms
from .tracker.model import SEARCH_SIZE, TrackerModel
from .tracker.tracking import extract_search_region, extract_template

PERTURBATION_MAGIC = b"EUSP"
PERTURBATION_VERSION = 1
PERTURBATION_SHAPE = (3, SEARCH_SIZE, SEARCH_SIZE)
STRATEGIES = ("greedy", "random")


class PerturbationError(ValueError):
    pass


@dataclass
class AttackConfig:
    epsilon: float = 16.0
    step: float = 0.9
    k: int = 50
    rate: float = 0.1
    epochs_per_candidate: int = 1
    strategy: str = "greedy"
    seed: int = 0
    workers: int = 1
    loss: TripleLossConfig = field(default_factory=TripleLossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = TripleLossConfig(**self.loss)
        if not 0 < self.step <= self.epsilon:
            raise ValueError(f"need 0 < step <= epsilon, got step={self.step}, epsilon={self.epsilon}")
        if not 0 < self.rate <= 1:
            raise ValueError(f"sampling rate must lie in (0, 1], got {self.rate}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.epochs_per_candidate < 1:
            raise ValueError("epochs_per_candidate must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        # workers is an execution detail and never changes results
        return {
            "epsilon": self.epsilon,
            "step": self.step,
            "k": self.k,
            "rate": self.rate,
            "epochs_per_candidate": self.epochs_per_candidate,
            "strategy": self.strategy,
            "seed": self.seed,
            "loss": self.loss.to_dict(),
        }


@dataclass
class Perturbation:
    values: np.ndarray
    epsilon: float = 16.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != PERTURBATION_SHAPE:
            raise PerturbationError(f"perturbation must be {PERTURBATION_SHAPE}, got {self.values.shape}")

    @classmethod
    def zeros(cls, epsilon: float = 16.0) -> "Perturbation":
        return cls(np.zeros(PERTURBATION_SHAPE), epsilon)

    @property
    def linf(self) -> float:
        return float(np.abs(self.values).max())

    def to_bytes(self) -> bytes:
        head = PERTURBATION_MAGIC + struct.pack("<Bd3I", PERTURBATION_VERSION, self.epsilon, *self.values.shape)
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Perturbation":
        if buf[:4] != PERTURBATION_MAGIC:
            raise PerturbationError("bad magic, not an EUSP perturbation file")
        head = struct.calcsize("<Bd3I")
        if len(buf) < 4 + head:
            raise PerturbationError("truncated perturbation header")
        version, eps, *dims = struct.unpack_from("<Bd3I", buf, 4)
        if version != PERTURBATION_VERSION:
            raise PerturbationError(f"unsupported perturbation version {version}")
        body = buf[4 + head:]
        if len(body) != 8 * int(np.prod(dims)):
            raise PerturbationError(f"payload holds {len(body)} bytes, dims {dims} need {8 * int(np.prod(dims))}")
        return cls(np.frombuffer(body, dtype="<f8").reshape(dims).astype(np.float64), eps)

    def save(self, path) -> bytes:
        payload = self.to_bytes()
        Path(path).write_bytes(payload)
        return payload

    @classmethod
    def load(cls, path) -> "Perturbation":
        return cls.from_bytes(Path(path).read_bytes())


# ------------------------------------------------------------------ loss + gradient


def attack_inputs(model: TrackerModel, video, frame: int, weights=None):
    """Template features from frame 0 and the clean search crop of ``frame``, centred on its ground truth."""
    weights = weights or model.tensors()
    z, _ = extract_template(video.frames[0], video.gt_boxes[0])
    z_feat = model.encode(Tensor(z), weights)
    x, _ = extract_search_region(video.frames[frame], video.gt_boxes[frame])
    return z_feat, x


def loss_and_grad(model: TrackerModel, z_feat: Tensor, x_clean: np.ndarray, delta: np.ndarray,
                  loss_cfg: TripleLossConfig, weights=None):
    """Triple loss at ``x_clean + delta`` and its gradient with respect to ``delta``."""
    weights = weights or model.tensors()
    f_clean = model.encode(Tensor(x_clean), weights)
    d = Tensor(delta, requires_grad=True)
    with Tape() as tape:
        x_adv = dn.clamp(dn.add(Tensor(x_clean), d), 0.0, 255.0)
        f_adv = model.encode(x_adv, weights)
        cls, reg = model.forward(z_feat, f_adv, weights)
        terms = triple_loss_terms(f_clean, f_adv, cls, reg, loss_cfg)
    tape.backward(terms["total"])
    grad = d.grad if d.grad is not None else np.zeros_like(delta)
    return terms["total"].item(), grad


def pgd_step(delta: np.ndarray, grad: np.ndarray, step: float, epsilon: float) -> np.ndarray:
    """One signed ascent step, clipped to the l-inf ball (``sign(0) == 0``)."""
    if delta.shape != grad.shape:
        raise ValueError(f"shape mismatch {delta.shape} vs {grad.shape}")
    return np.clip(delta + step * np.sign(grad), -epsilon, epsilon)


# ------------------------------------------------------------------ sampling


def gradient_saliency(model: TrackerModel, video, loss_cfg: Optional[TripleLossConfig] = None) -> float:
    """Mean |dL/dx1| at zero perturbation, x1 being frame 2 cropped on frame-1 ground truth."""
    if len(video.frames) < 2:
        raise ValueError(f"video {video.id} has a single frame; saliency needs two")
    loss_cfg = loss_cfg or TripleLossConfig()
    weights = model.tensors()
    z, _ = extract_template(video.frames[0], video.gt_boxes[0])
    z_feat = model.encode(Tensor(z), weights)
    x1, _ = extract_search_region(video.frames[1], video.gt_boxes[0])
    _, grad = loss_and_grad(model, z_feat, x1, np.zeros_like(x1), loss_cfg, weights)
    return float(np.mean(np.abs(grad)))


def sample_count(n: int, rate: float) -> int:
    if rate <= 0:
        raise ValueError(f"sampling rate must be positive, got {rate}")
    # tolerance guards against 0.3 * 10 == 3.0000000000000004
    return max(1, min(n, math.ceil(rate * n - 1e-9)))


def greedy_sample(model: TrackerModel, videos, rate: float, loss_cfg=None, saliencies=None):
    """Top ``ceil(rate * n)`` videos by saliency, ties broken by position in ``videos``.

    Returns ``(selected_videos, saliencies)``.
    """
    videos = list(videos)
    if not videos:
        raise ValueError("cannot sample from an empty corpus")
    count = sample_count(len(videos), rate)
    if saliencies is None:
        saliencies = [gradient_saliency(model, v, loss_cfg) for v in videos]
    order = sorted(range(len(videos)), key=lambda i: (-saliencies[i], i))
    return [videos[i] for i in order[:count]], list(saliencies)


def random_sample(videos, rate: float, seed: int):
    videos = list(videos)
    if not videos:
        raise ValueError("cannot sample from an empty corpus")
    count = sample_count(len(videos), rate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3]))
    idx = rng.choice(len(videos), size=count, replace=False)
    return [videos[i] for i in idx]


# ------------------------------------------------------------------ candidates


def candidate_rng(seed: int, tau: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tau]))


@dataclass
class CandidateResult:
    index: int
    delta: np.ndarray
    loss: float
    ordering: list  # video ids in optimisation order
    steps: list  # (video id, frame index, loss) per PGD step


def optimize_candidate(model: TrackerModel, ordering, config: AttackConfig, rng: np.random.Generator,
                       index: int = 0) -> CandidateResult:
    """PGD over one shuffled ordering: one random frame and one step per video per epoch."""
    ordering = list(ordering)
    if not ordering:
        raise ValueError("candidate ordering is empty")
    weights = model.tensors()
    templates = {}
    delta = np.zeros(PERTURBATION_SHAPE)
    total = 0.0
    steps = []
    for _ in range(config.epochs_per_candidate):
        for video in ordering:
            if video.id not in templates:
                z, _ = extract_template(video.frames[0], video.gt_boxes[0])
                templates[video.id] = model.encode(Tensor(z), weights)
            frame = int(rng.integers(1, len(video.frames)))
            x, _ = extract_search_region(video.frames[frame], video.gt_boxes[frame])
            loss, grad = loss_and_grad(model, templates[video.id], x, delta, config.loss, weights)
            delta = pgd_step(delta, grad, config.step, config.epsilon)
            total += loss
            steps.append((int(video.id), frame, loss))
    return CandidateResult(index, delta, total, [int(v.id) for v in ordering], steps)


def _shuffle(selected, tau: int, seed: int):
    rng = candidate_rng(seed, tau)
    perm = rng.permutation(len(selected))
    return [selected[i] for i in perm], rng


_worker_state: dict = {}


def _worker_init(model, selected, config):
    _worker_state["model"] = model
    _worker_state["selected"] = selected
    _worker_state["config"] = config


def _worker_run(tau: int) -> CandidateResult:
    st = _worker_state
    ordering, rng = _shuffle(st["selected"], tau, st["config"].seed)
    return optimize_candidate(st["model"], ordering, st["config"], rng, index=tau)


# ------------------------------------------------------------------ full attack


@dataclass
class AttackReport:
    candidate_losses: list
    selected_index: int
    sampled_video_ids: list
    saliencies: dict
    candidate_orderings: list
    candidate_steps: list
    config: dict
    linf: float

    def to_dict(self) -> dict:
        return {
            "candidate_losses": self.candidate_losses,
            "selected_index": self.selected_index,
            "selected_loss": self.candidate_losses[self.selected_index],
            "sampled_video_ids": self.sampled_video_ids,
            "saliencies": {str(k): v for k, v in self.saliencies.items()},
            "candidate_orderings": self.candidate_orderings,
            "candidate_steps": [[list(s) for s in steps] for steps in self.candidate_steps],
            "config": self.config,
            "linf": self.linf,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> str:
        text = self.to_json()
        Path(path).write_text(text)
        return text


def select_sample(model: TrackerModel, videos, config: AttackConfig):
    videos = list(videos)
    if config.strategy == "greedy":
        selected, sal = greedy_sample(model, videos, config.rate, config.loss)
        return selected, {int(v.id): s for v, s in zip(videos, sal)}
    return random_sample(videos, config.rate, config.seed), {}


def run_eusa(model: TrackerModel, videos, config: Optional[AttackConfig] = None):
    """Optimise ``k`` candidates on shuffled orderings and keep the one with the largest loss.

    Returns ``(Perturbation, AttackReport)``.  Output is independent of ``config.workers``.
    """
    config = config or AttackConfig()
    videos = list(getattr(videos, "videos", videos))
    selected, saliencies = select_sample(model, videos, config)
    if config.workers > 1 and config.k > 1:
        with ProcessPoolExecutor(
            max_workers=config.workers,
            initializer=_worker_init,
            initargs=(model, selected, config),
        ) as pool:
            results = list(pool.map(_worker_run, range(config.k)))
    else:
        results = []
        for tau in range(config.k):
            ordering, rng = _shuffle(selected, tau, config.seed)
            results.append(optimize_candidate(model, ordering, config, rng, index=tau))
    results.sort(key=lambda r: r.index)
    losses = [r.loss for r in results]
    best = int(np.argmax(losses))  # first maximum wins ties
    delta = results[best].delta
    report = AttackReport(
        candidate_losses=losses,
        selected_index=best,
        sampled_video_ids=[int(v.id) for v in selected],
        saliencies=saliencies,
        candidate_orderings=[r.ordering for r in results],
        candidate_steps=[r.steps for r in results],
        config=config.to_dict(),
        linf=float(np.abs(delta).max()),
    )
    return Perturbation(delta.copy(), config.epsilon), report
