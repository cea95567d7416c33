"""Training objective: classification loss plus three memory regularizers.

Each ``*_loss`` takes per-video quantities for a mini-batch (a sequence of
vectors, or a 2-D array with one row per video) and returns a float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .numerics import frobenius_norm, l1_norm, l2_norm, softmax_rows

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.02
    gamma: float = 0.05

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"loss weight {name} must be finite and >= 0, got {value!r}")


@dataclass(frozen=True)
class AblationFlags:
    """Toggles for the auxiliary losses and the self-attention module."""

    sparsity: bool = True
    diversity: bool = True
    homogeneity: bool = True
    self_attention: bool = True

    @classmethod
    def cls_only(cls, self_attention: bool = False) -> "AblationFlags":
        return cls(False, False, False, self_attention)

    def label(self) -> str:
        marks = [("Ls", self.sparsity), ("Ld", self.diversity), ("Lh", self.homogeneity), ("S", self.self_attention)]
        on = [name for name, flag in marks if flag]
        return "+".join(on) if on else "cls-only"


@dataclass(frozen=True)
class LossComponents:
    cls: float
    diversity: float
    homogeneity: float
    sparsity: float

    def total(self, weights: LossWeights, flags: AblationFlags) -> float:
        return total_loss(self, weights, flags)


def _batch(rows, name: str) -> np.ndarray:
    if len(rows) == 0:
        raise ValidationError(f"{name}: empty batch")
    return np.stack([np.asarray(r, dtype=np.float64) for r in rows])


def classification_loss(y_hat_batch: Sequence[np.ndarray], y_batch: Sequence[np.ndarray]) -> float:
    """Mean cross-entropy between predictions and l1-normalized labels."""
    y_hat = _batch(y_hat_batch, "classification_loss")
    y = _batch(y_batch, "classification_loss")
    if y.shape != y_hat.shape:
        raise ValidationError(f"prediction shape {y_hat.shape} != label shape {y.shape}")
    return float(-(y * np.log(np.maximum(y_hat, LOG_CLAMP))).sum() / len(y))


def diversity_loss(M: np.ndarray) -> float:
    gram = M @ M.T
    return frobenius_norm(gram - np.eye(M.shape[0]))


def occurrence_probability(S: np.ndarray) -> np.ndarray:
    """Softmax over templates of the time-summed similarities ``(l, K) -> (K,)``."""
    return softmax_rows(S.sum(axis=-2))


def homogeneity_loss(p_batch: Sequence[np.ndarray]) -> float:
    p = _batch(p_batch, "homogeneity_loss")
    return l2_norm(p.mean(axis=0))


def sparsity_loss(a_batch: Sequence[np.ndarray]) -> float:
    """Per-video L1 norm of the foreground attention, averaged over the batch.

    Not normalized by video length.
    """
    if len(a_batch) == 0:
        raise ValidationError("sparsity_loss: empty batch")
    return sum(l1_norm(a) for a in a_batch) / len(a_batch)


def total_loss(components: LossComponents, weights: LossWeights, flags: AblationFlags) -> float:
    total = components.cls
    if flags.diversity:
        total += weights.alpha * components.diversity
    if flags.homogeneity:
        total += weights.beta * components.homogeneity
    if flags.sparsity:
        total += weights.gamma * components.sparsity
    return total
