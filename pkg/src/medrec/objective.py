"""Prediction head, multi-label and DDI losses, thresholded inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractViolation, ShapeError
from .layers import Linear

PROB_EPS = 1e-12
THRESHOLD = 0.5
DDI_MODES = ("penalty", "literal")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.05
    ddi_mode: str = "penalty"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be non-negative, got {self.alpha}")
        if self.ddi_mode not in DDI_MODES:
            raise ConfigurationError(f"ddi_mode must be one of {DDI_MODES}")


class PredictionHead(Linear):
    """Affine map from the patient representation to medication logits."""


def predict_probabilities(v_hat: Tensor, head: PredictionHead) -> Tensor:
    if v_hat.shape[-1] != head.weight.shape[0]:
        raise ShapeError(f"head expects width {head.weight.shape[0]}, got {v_hat.shape[-1]}")
    return ad.sigmoid(head(v_hat))


def bce_loss(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Binary cross entropy summed over visits (rows) and codes."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != probs.shape:
        raise ShapeError(f"targets {targets.shape} vs predictions {probs.shape}")
    if not np.isin(targets, (0.0, 1.0)).all():
        raise ContractViolation("targets must be 0 or 1")
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    pos = ad.mul(targets, ad.log(p))
    negative = ad.mul(1.0 - targets, ad.log(ad.sub(1.0, p)))
    return ad.neg(ad.sum_reduce(ad.add(pos, negative)))


def ddi_loss(probs: Tensor, ddi: np.ndarray, mode: str = "penalty") -> Tensor:
    """Co-predicted interaction mass ``sum_t sum_ij A_ij y_i y_j``.

    Both orderings of each pair count.  ``mode="literal"`` negates the sum.
    """
    n = probs.shape[-1]
    if ddi.shape != (n, n):
        raise ShapeError(f"DDI matrix {ddi.shape} vs {n} medications")
    if mode not in DDI_MODES:
        raise ConfigurationError(f"ddi mode must be one of {DDI_MODES}")
    total = ad.sum_reduce(ad.mul(probs, ad.matmul(probs, ad.Tensor(ddi))))
    return ad.neg(total) if mode == "literal" else total


def combined_loss(bce: Tensor, ddi: Tensor, alpha: float) -> Tensor:
    if alpha == 0:
        return bce
    return ad.add(bce, ad.scale(ddi, alpha))


def infer_medications(probs) -> tuple[int, ...]:
    y = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return tuple(int(i) for i in np.flatnonzero(y.reshape(-1) > THRESHOLD))
