"""
    cxrpy.prompts
    ~~~~~~~~~~~~~

    Prompt based zero-shot scoring.

    Each class is scored by a two-way softmax between the disease prompt
    and the shared negative prompt.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .backend import EncoderBackend, image_features
from .common import display_name
from .constants import DISEASE_NAMES, NUM_CLASSES, ScoreSource
from .error import ConfigError, ModelError
from .imaging import XrayDataset
from .metrics import ScoreMatrix

SLOT = "[disease]"


@dataclass(frozen=True)
class PromptSet:
    positive_template: str = "A chest X-ray showing [disease]"
    negative_text: str = "No finding"

    def __post_init__(self):
        problems = []
        if SLOT not in self.positive_template:
            problems.append(f"positive_template must contain the {SLOT} slot")
        if not self.negative_text.strip():
            problems.append("negative_text must not be empty")
        if problems:
            raise ConfigError(tuple(problems))

    def render(self) -> list[str]:
        """One positive prompt per disease, label order.

        >>> PromptSet().render()[9]
        'A chest X-ray showing Pleural Thickening'
        """
        return [
            self.positive_template.replace(SLOT, display_name(name))
            for name in DISEASE_NAMES
        ]


def zero_shot_logits_from_embeddings(
    image_emb: torch.Tensor,
    positive_emb: torch.Tensor,
    negative_emb: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Log-odds of the positive prompt for every (image, class) pair.

    Parameters
    ----------
    image_emb
        B x D image embeddings.
    positive_emb
        C x D disease prompt embeddings.
    negative_emb
        D (or 1 x D) negative prompt embedding.
    temperature
        Similarities are multiplied by it before the softmax.
    """
    if temperature <= 0:
        raise ModelError(f"temperature must be positive, got {temperature}")
    img = F.normalize(image_emb.double(), dim=-1)
    pos = F.normalize(positive_emb.double(), dim=-1)
    neg = F.normalize(negative_emb.double().reshape(1, -1), dim=-1)
    s_pos = img @ pos.T
    s_neg = img @ neg.T
    return temperature * (s_pos - s_neg)


def _embeddings(
    backend: EncoderBackend, images: torch.Tensor, prompts: PromptSet
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if not backend.has_text_encoder:
        raise ModelError(f"{type(backend).__name__} has no text encoder")
    with torch.no_grad():
        img = image_features(backend, images)
        pos = backend.encode_text(prompts.render())
        neg = backend.encode_text([prompts.negative_text])
    return img, pos, neg


def zero_shot_logits(
    backend: EncoderBackend,
    images: torch.Tensor,
    prompts: PromptSet = PromptSet(),
    temperature: float | None = None,
) -> torch.Tensor:
    """B x 14 margins temperature * (s_pos - s_neg); monotone in the probability."""
    img, pos, neg = _embeddings(backend, images, prompts)
    scale = backend.logit_scale if temperature is None else temperature
    return zero_shot_logits_from_embeddings(img, pos, neg, scale)


def zero_shot_scores(
    backend: EncoderBackend,
    images: torch.Tensor,
    prompts: PromptSet = PromptSet(),
    temperature: float | None = None,
) -> torch.Tensor:
    """B x 14 probabilities of each disease prompt against the negative prompt.

    The two-way softmax over (t * s_pos, t * s_neg) equals the sigmoid
    of their difference, which is what is computed.
    """
    return torch.sigmoid(zero_shot_logits(backend, images, prompts, temperature))


def zero_shot_score_matrix(
    backend: EncoderBackend,
    dataset: XrayDataset,
    prompts: PromptSet = PromptSet(),
    temperature: float | None = None,
    batch_size: int = 64,
) -> ScoreMatrix:
    """Zero-shot margins of every image of dataset, in dataset order.

    Prompt embeddings are computed once; the margins rank exactly like
    the probabilities of ``zero_shot_scores``.
    """
    if not backend.has_text_encoder:
        raise ModelError(f"{type(backend).__name__} has no text encoder")
    scale = backend.logit_scale if temperature is None else temperature
    backend.eval()
    chunks: list[torch.Tensor] = []
    with torch.no_grad():
        pos = backend.encode_text(prompts.render())
        neg = backend.encode_text([prompts.negative_text])
        for images, _ in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            img = image_features(backend, images)
            chunks.append(zero_shot_logits_from_embeddings(img, pos, neg, scale))
    scores = torch.cat(chunks).numpy() if chunks else np.zeros((0, NUM_CLASSES))
    return ScoreMatrix(scores, dataset.label_matrix(), ScoreSource.ZERO_SHOT_PROMPTS)
