"""
    cxrpy.head
    ~~~~~~~~~~

    Multi-label classification head on top of the joint-space embedding.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from .backend import EncoderBackend, image_features
from .constants import NUM_CLASSES, ScoreSource
from .error import ConfigError, ModelError
from .imaging import XrayDataset
from .metrics import ScoreMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadConfig:
    in_dim: int = 512
    hidden1: int = 512
    hidden2: int = 256
    out_dim: int = NUM_CLASSES
    dropout1: float = 0.3
    dropout2: float = 0.2

    def __post_init__(self):
        problems = [
            f"{name} must be >= 1, got {getattr(self, name)}"
            for name in ("in_dim", "hidden1", "hidden2", "out_dim")
            if getattr(self, name) < 1
        ]
        problems += [
            f"{name} must be in [0, 1), got {getattr(self, name)}"
            for name in ("dropout1", "dropout2")
            if not 0.0 <= getattr(self, name) < 1.0
        ]
        if problems:
            raise ConfigError(tuple(problems))

        if (self.dropout1, self.dropout2) != (0.3, 0.2):
            msg = f"Non-default head dropout ({self.dropout1}, {self.dropout2})"
            logger.warning(msg)
            warnings.warn(msg, stacklevel=3)
        if self.out_dim != NUM_CLASSES:
            msg = f"Head out_dim={self.out_dim} differs from the {NUM_CLASSES} labels"
            logger.warning(msg)
            warnings.warn(msg, stacklevel=3)


class ClassificationHead(nn.Sequential):
    """Linear -> LayerNorm -> GELU -> Dropout, twice, then the output layer."""

    def __init__(self, config: HeadConfig):
        super().__init__(
            nn.Linear(config.in_dim, config.hidden1),
            nn.LayerNorm(config.hidden1),
            nn.GELU(),
            nn.Dropout(config.dropout1),
            nn.Linear(config.hidden1, config.hidden2),
            nn.LayerNorm(config.hidden2),
            nn.GELU(),
            nn.Dropout(config.dropout2),
            nn.Linear(config.hidden2, config.out_dim),
        )
        self.config = config

    @property
    def output_layer(self) -> nn.Linear:
        return self[-1]


def head_parameter_count(config: HeadConfig) -> int:
    """Closed-form number of head parameters.

    >>> head_parameter_count(HeadConfig())
    399118
    """
    c = config
    return (
        (c.in_dim * c.hidden1 + c.hidden1)
        + 2 * c.hidden1
        + (c.hidden1 * c.hidden2 + c.hidden2)
        + 2 * c.hidden2
        + (c.hidden2 * c.out_dim + c.out_dim)
    )


def build_head(config: HeadConfig, init_seed: int) -> ClassificationHead:
    """Head with Kaiming-normal linear weights and zero biases.

    Initialisation draws from a private generator stream, so identical
    seeds give bit-identical weights without touching the global state.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        head = ClassificationHead(config)
        for module in head.modules():
            if isinstance(module, nn.Linear):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(module.bias)
    return head


def classify(
    backend: EncoderBackend, head: ClassificationHead, images: torch.Tensor
) -> torch.Tensor:
    """B x 14 logits; sigmoid(logits) are the per-class scores."""
    if head.config.in_dim != backend.embed_dim:
        raise ModelError(
            f"Head in_dim={head.config.in_dim} does not match "
            f"backend embed_dim={backend.embed_dim}"
        )
    return head(image_features(backend, images))


def head_score_matrix(
    backend: EncoderBackend,
    head: ClassificationHead,
    dataset: XrayDataset,
    batch_size: int = 64,
) -> ScoreMatrix:
    """Head logits of every image of dataset, in dataset order.

    Logits are kept instead of their sigmoid: AUC only needs the order,
    and float32 sigmoids saturate into ties for confident predictions.
    """
    backend.eval()
    head.eval()
    chunks: list[torch.Tensor] = []
    with torch.no_grad():
        for images, _ in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            chunks.append(classify(backend, head, images).double())
    scores = torch.cat(chunks).numpy() if chunks else np.zeros((0, NUM_CLASSES))
    return ScoreMatrix(scores, dataset.label_matrix(), ScoreSource.HEAD_LOGITS)
