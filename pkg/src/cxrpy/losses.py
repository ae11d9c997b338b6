"""
    cxrpy.losses
    ~~~~~~~~~~~~

    Multi-label losses on logits.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .error import ConfigError, LossInputError


@dataclass(frozen=True)
class FocalLossParams:
    """FL(p_t) = -alpha (1 - p_t)^gamma log(p_t).

    alpha weighs positives and negatives alike, so alpha=1, gamma=0 is
    plain binary cross-entropy.
    """

    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        problems = []
        if not 0.0 < self.alpha <= 1.0:
            problems.append(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            problems.append(f"gamma must be >= 0, got {self.gamma}")
        if problems:
            raise ConfigError(tuple(problems))


def _check_inputs(logits: torch.Tensor, targets: torch.Tensor) -> None:
    if logits.shape != targets.shape:
        raise LossInputError(
            f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ"
        )
    if torch.isnan(logits).any() or torch.isnan(targets).any():
        raise LossInputError("NaN in loss inputs")


def focal_bce_with_logits(
    logits: torch.Tensor,
    targets: torch.Tensor,
    params: FocalLossParams = FocalLossParams(),
) -> torch.Tensor:
    """Mean focal binary cross-entropy over all batch x class entries.

    log(p_t) comes from the stable BCE-with-logits kernel and
    1 - p_t = sigmoid(-(2t - 1) z), so the loss stays finite for very
    large |z|.
    """
    _check_inputs(logits, targets)
    targets = targets.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    one_minus_pt = torch.sigmoid(-(2.0 * targets - 1.0) * logits)
    loss = params.alpha * one_minus_pt.pow(params.gamma) * bce
    return loss.mean()


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy on logits."""
    _check_inputs(logits, targets)
    return F.binary_cross_entropy_with_logits(
        logits, targets.to(logits.dtype), reduction="mean"
    )
