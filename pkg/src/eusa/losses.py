"""Feature-deflect, confidence and drift losses and their weighted sum.

All three terms are non-positive and are *maximised* by the attack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor

COMPONENTS = ("f", "c", "d")


@dataclass
class TripleLossConfig:
    lambda_conf: float = 0.9
    lambda_drift: float = 0.7
    margin: float = 0.0  # cosine floor m_f
    beta: float = 0.6  # shrink vs. offset balance in the drift term
    direction: tuple = (1.0, 1.0)  # target location offset, anchor-normalised units
    components: tuple = COMPONENTS

    def __post_init__(self):
        self.direction = tuple(float(v) for v in self.direction)
        self.components = tuple(self.components)
        if self.lambda_conf < 0 or self.lambda_drift < 0:
            raise ValueError("loss weights must be non-negative")
        if not -1.0 <= self.margin <= 1.0:
            raise ValueError(f"margin {self.margin} outside [-1, 1]")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta {self.beta} outside [0, 1]")
        if len(self.direction) != 2:
            raise ValueError("direction must have two entries")
        bad = set(self.components) - set(COMPONENTS)
        if bad or not self.components:
            raise ValueError(f"components must be a non-empty subset of f,c,d; got {self.components}")

    def weights(self) -> dict:
        return {
            "f": 1.0 if "f" in self.components else 0.0,
            "c": self.lambda_conf if "c" in self.components else 0.0,
            "d": self.lambda_drift if "d" in self.components else 0.0,
        }

    def to_dict(self) -> dict:
        return {
            "lambda_conf": self.lambda_conf,
            "lambda_drift": self.lambda_drift,
            "margin": self.margin,
            "beta": self.beta,
            "direction": list(self.direction),
            "components": list(self.components),
        }


def feature_deflect_loss(f_clean, f_adv: Tensor, margin: float = 0.0) -> Tensor:
    """``-sum_i max(margin, cos(F_i(x), F_i(x*)))`` over channels.

    ``f_clean`` is detached: no gradient ever reaches it.
    """
    clean = np.asarray(getattr(f_clean, "data", f_clean), dtype=np.float64)
    if clean.shape[0] != f_adv.shape[0]:
        raise dn.ShapeError("feature_deflect_loss", "C", f"{clean.shape[0]} vs {f_adv.shape[0]} channels")
    if clean.shape != f_adv.shape:
        raise dn.ShapeError("feature_deflect_loss", "shape", f"{clean.shape} vs {f_adv.shape}")
    C = clean.shape[0]
    cos = dn.cosine_rows(Tensor(clean.reshape(C, -1)), dn.reshape(f_adv, (C, -1)))
    return dn.scale(dn.sum_all(dn.max_with_constant(cos, margin)), -1.0)


def confidence_loss(cls_adv) -> Tensor:
    """Negated sum of every candidate's foreground probability."""
    scores = getattr(cls_adv, "scores", cls_adv)
    return dn.scale(dn.sum_all(scores), -1.0)


def drift_loss(reg_adv, beta: float = 0.6, direction=(1.0, 1.0)) -> Tensor:
    """``-beta * |R_shape| - |R_loc - d|`` with norms over all candidates stacked."""
    offsets = getattr(reg_adv, "offsets", reg_adv)
    loc = dn.take(offsets, slice(0, 2))
    shape = dn.take(offsets, slice(2, 4))
    d = np.asarray(direction, dtype=np.float64).reshape((2,) + (1,) * (offsets.data.ndim - 1))
    shrink = dn.l2_norm(shape)
    offset = dn.l2_norm(dn.sub(loc, Tensor(d)))
    return dn.scale(dn.add(dn.scale(shrink, beta), offset), -1.0)


def triple_loss_terms(f_clean, f_adv, cls_adv, reg_adv, config: TripleLossConfig) -> dict:
    """Component tensors plus their weighted total under key ``"total"``."""
    w = config.weights()
    terms = {
        "f": feature_deflect_loss(f_clean, f_adv, config.margin),
        "c": confidence_loss(cls_adv),
        "d": drift_loss(reg_adv, config.beta, config.direction),
    }
    total = dn.add(
        dn.add(dn.scale(terms["f"], w["f"]), dn.scale(terms["c"], w["c"])),
        dn.scale(terms["d"], w["d"]),
    )
    terms["total"] = total
    return terms


def triple_loss(f_clean, f_adv, cls_adv, reg_adv, config: TripleLossConfig = None) -> Tensor:
    return triple_loss_terms(f_clean, f_adv, cls_adv, reg_adv, config or TripleLossConfig())["total"]
