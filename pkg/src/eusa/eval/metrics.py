"""OTB precision/success and VOT accuracy/robustness/expected-overlap on TrackResults."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tracker.boxes import iou
from ..tracker.tracking import FAILURE, INIT, TRACKED, VOT

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)  # pixels
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRECISION_AT = 20.0
BURN_IN = 10
ROBUSTNESS_UNIT = 25
EAO_INTERVAL = (10, 30)

__all__ = [
    "iou",
    "center_errors",
    "precision_curve",
    "precision",
    "success_curve",
    "success_auc",
    "VotMetrics",
    "vot_runs",
    "expected_overlap",
    "vot_metrics",
]


def _evaluated(result) -> np.ndarray:
    mask = np.array([s in (TRACKED, FAILURE) for s in result.status])
    if not mask.any():
        raise ValueError(f"video {result.video_id}: no evaluated frames")
    return mask


def center_errors(result) -> np.ndarray:
    mask = _evaluated(result)
    pred = np.asarray(result.boxes)[mask]
    gt = np.asarray(result.gt_boxes)[mask]
    return np.hypot(pred[:, 0] - gt[:, 0], pred[:, 1] - gt[:, 1])


def precision_curve(result, thresholds=PRECISION_THRESHOLDS) -> np.ndarray:
    """Fraction of evaluated frames whose center error is at most each threshold."""
    err = center_errors(result)
    return (err[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1)


def precision(result, threshold: float = PRECISION_AT) -> float:
    return float(precision_curve(result, [threshold])[0])


def success_curve(result, thresholds=SUCCESS_THRESHOLDS) -> np.ndarray:
    """Fraction of evaluated frames with IoU strictly above each threshold."""
    ov = np.asarray(result.ious)[_evaluated(result)]
    return (ov[None, :] > np.asarray(thresholds)[:, None]).mean(axis=1)


def success_auc(result) -> float:
    return float(success_curve(result).mean())


@dataclass
class VotMetrics:
    accuracy: float  # mean IoU in [0, 1]
    robustness: float  # failures per 25 frames
    eao: float
    failures: int
    frames: int


def vot_runs(result) -> list:
    """Split a VOT-policy result into ``(overlaps, failed)`` runs, one per initialisation.

    A run holds the IoUs of predicted frames after its init, up to and including a failure.
    """
    runs = []
    current = None
    for t, s in enumerate(result.status):
        if s == INIT:
            if current is not None:
                runs.append((current, False))
            current = []
        elif s == TRACKED and current is not None:
            current.append(float(result.ious[t]))
        elif s == FAILURE and current is not None:
            current.append(float(result.ious[t]))
            runs.append((current, True))
            current = None
    if current is not None:
        runs.append((current, False))
    return runs


def expected_overlap(runs, interval=EAO_INTERVAL) -> float:
    """Mean over lengths in ``interval`` of the average overlap of the first L frames.

    Failed runs are zero-padded to L; unfailed runs shorter than L are left out.
    Lengths with no qualifying run are skipped; with none at all the result is 0.
    """
    phis = []
    for length in range(interval[0], interval[1] + 1):
        vals = []
        for overlaps, failed in runs:
            if len(overlaps) >= length:
                vals.append(np.mean(overlaps[:length]))
            elif failed:
                vals.append(np.sum(overlaps) / length)
        if vals:
            phis.append(np.mean(vals))
    return float(np.mean(phis)) if phis else 0.0


def _accuracy_frames(result) -> list:
    reinits = [t for t, s in enumerate(result.status) if s == INIT and t > 0]
    blocked = set()
    for r in reinits:
        blocked.update(range(r + 1, r + 1 + BURN_IN))
    return [t for t, s in enumerate(result.status) if s == TRACKED and t not in blocked]


def vot_metrics(result) -> VotMetrics:
    if result.policy != VOT:
        raise ValueError(f"vot_metrics needs a VOT-policy result, got {result.policy!r}")
    frames = len(result.status)
    keep = _accuracy_frames(result)
    acc = float(np.mean(np.asarray(result.ious)[keep])) if keep else 0.0
    fails = sum(1 for s in result.status if s == FAILURE)
    return VotMetrics(
        accuracy=acc,
        robustness=fails * ROBUSTNESS_UNIT / frames,
        eao=expected_overlap(vot_runs(result)),
        failures=fails,
        frames=frames,
    )
