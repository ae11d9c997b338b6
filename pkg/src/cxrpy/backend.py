"""
    cxrpy.backend
    ~~~~~~~~~~~~~

    Image/text encoder backends and the layer freezing policy.

    A backend exposes its visual tower as named parameter groups:
    ``visual.stem`` (patch embedding, class/positional embeddings,
    pre-norm), ``visual.blocks.<i>`` (one per residual block, bottom to
    top) and ``visual.post`` (final layer norm and joint-space
    projection). Text tower parameters are never trained.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import abc
import logging
import math
import pathlib
import re
from dataclasses import dataclass
from typing import Any, ClassVar, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import constants
from .common import make_generator
from .constants import BackendKind
from .error import ConfigError, ModelError

logger = logging.getLogger(__name__)

STEM = "visual.stem"
POST = "visual.post"
HEAD = "head"


def block_group(ndx: int) -> str:
    return f"visual.blocks.{ndx}"


class EncoderBackend(nn.Module, abc.ABC):
    """Pretrained (or stub) vision-language encoder.

    Parameters
    ----------
    embed_dim
        Size of the joint image/text embedding space.
    logit_scale
        Multiplier applied to cosine similarities in prompt scoring.
    """

    kind: ClassVar[BackendKind]

    def __init__(self, embed_dim: int, logit_scale: float):
        super().__init__()
        self.embed_dim = embed_dim
        self.logit_scale = logit_scale

    @property
    @abc.abstractmethod
    def visual_blocks(self) -> Sequence[nn.Module]:
        """Residual blocks of the visual tower, bottom to top."""

    @abc.abstractmethod
    def visual_post_params(self) -> list[nn.Parameter]:
        """Final visual layer norm and projection."""

    @abc.abstractmethod
    def visual_modules(self) -> Sequence[nn.Module | nn.Parameter]:
        """Everything that belongs to the visual tower."""

    @abc.abstractmethod
    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """Bx3x224x224 -> B x embed_dim."""

    @abc.abstractmethod
    def describe(self) -> dict[str, Any]:
        """Plain description sufficient to rebuild the backend."""

    @property
    def has_text_encoder(self) -> bool:
        return False

    def encode_text(self, texts: Sequence[str]) -> torch.Tensor:
        raise ModelError(f"{type(self).__name__} has no text encoder")

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode_image(images)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Visual parameters, grouped and ordered stem -> blocks -> post.

        The stem group collects every visual parameter that is neither in
        a block nor in the post group, so the partition is exhaustive.
        """
        blocks = [list(b.parameters()) for b in self.visual_blocks]
        post = self.visual_post_params()
        claimed = {id(p) for group in blocks for p in group} | {id(p) for p in post}

        stem: list[nn.Parameter] = []
        seen: set[int] = set()
        for item in self.visual_modules():
            params = [item] if isinstance(item, nn.Parameter) else item.parameters()
            for p in params:
                if id(p) not in claimed and id(p) not in seen:
                    stem.append(p)
                    seen.add(id(p))

        groups = {STEM: stem}
        for ndx, params in enumerate(blocks):
            groups[block_group(ndx)] = params
        groups[POST] = post
        return groups

    @property
    def param_counts(self) -> dict[str, int]:
        return {
            name: sum(p.numel() for p in params)
            for name, params in self.parameter_groups().items()
        }

    def visual_parameter_count(self) -> int:
        return sum(self.param_counts.values())

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [
            p
            for params in self.parameter_groups().values()
            for p in params
            if p.requires_grad
        ]


class StubBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc = nn.Linear(width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc(F.gelu(self.norm(x)))


class StubBackend(EncoderBackend):
    """Deterministic desk-scale encoder.

    The image embedding is a seeded random projection of the image
    average-pooled to 8x8 followed by small residual blocks; the text
    embedding sums seeded random vectors, one per lower-cased token.
    """

    kind = BackendKind.STUB

    #: Side of the pooled grid fed to the projection.
    POOL = 8

    def __init__(
        self,
        seed: int = constants.DEFAULT_SEED,
        embed_dim: int = 64,
        n_blocks: int = 6,
        with_text: bool = True,
        logit_scale: float = 100.0,
    ):
        super().__init__(embed_dim, logit_scale)
        self.seed = seed
        self.with_text = with_text

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch_embed = nn.Linear(3 * self.POOL * self.POOL, embed_dim)
            self.ln_pre = nn.LayerNorm(embed_dim)
            self.blocks = nn.ModuleList(StubBlock(embed_dim) for _ in range(n_blocks))
            for block in self.blocks:
                nn.init.normal_(block.fc.weight, std=0.02)
                nn.init.zeros_(block.fc.bias)
            self.ln_post = nn.LayerNorm(embed_dim)
            self.proj = nn.Parameter(
                torch.randn(embed_dim, embed_dim) / math.sqrt(embed_dim)
            )

    @property
    def visual_blocks(self) -> Sequence[nn.Module]:
        return list(self.blocks)

    def visual_post_params(self) -> list[nn.Parameter]:
        return [*self.ln_post.parameters(), self.proj]

    def visual_modules(self) -> Sequence[nn.Module | nn.Parameter]:
        return [self.patch_embed, self.ln_pre, self.blocks, self.ln_post, self.proj]

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        x = F.adaptive_avg_pool2d(images, self.POOL).flatten(1)
        x = self.ln_pre(self.patch_embed(x))
        for block in self.blocks:
            x = block(x)
        return self.ln_post(x) @ self.proj

    @property
    def has_text_encoder(self) -> bool:
        return self.with_text

    def encode_text(self, texts: Sequence[str]) -> torch.Tensor:
        if not self.with_text:
            return super().encode_text(texts)
        out = torch.zeros(len(texts), self.embed_dim)
        for row, text in enumerate(texts):
            tokens = re.findall(r"[a-z0-9]+", text.lower()) or [""]
            for token in tokens:
                gen = make_generator(self.seed, "token", token)
                out[row] += torch.randn(self.embed_dim, generator=gen)
        return out

    def describe(self) -> dict[str, Any]:
        return dict(
            kind=self.kind.value,
            seed=self.seed,
            embed_dim=self.embed_dim,
            n_blocks=len(self.blocks),
            with_text=self.with_text,
            logit_scale=self.logit_scale,
        )


def stub_backend(
    seed: int = constants.DEFAULT_SEED,
    embed_dim: int = 64,
    n_blocks: int = 6,
    with_text: bool = True,
    logit_scale: float = 100.0,
) -> StubBackend:
    """Build the deterministic stub backend."""
    if embed_dim < 2:
        raise ModelError(f"embed_dim must be >= 2, got {embed_dim}")
    if n_blocks < 1:
        raise ModelError(f"n_blocks must be >= 1, got {n_blocks}")
    if not logit_scale > 0:
        raise ModelError(f"logit_scale must be > 0, got {logit_scale}")
    return StubBackend(seed, embed_dim, n_blocks, with_text, logit_scale)


class OpenClipBackend(EncoderBackend):
    """Pretrained CLIP ViT-B/32 read from a local weights file.

    Weights are never downloaded: ``weights_path`` must point to an
    existing open_clip compatible checkpoint.
    """

    kind = BackendKind.REAL

    def __init__(self, weights_path: str | pathlib.Path, model_name: str = "ViT-B-32"):
        path = pathlib.Path(weights_path)
        if not path.is_file():
            raise ModelError(
                f"Pretrained weights not found at {path} (weights are never downloaded)"
            )

        import open_clip

        model, _, _ = open_clip.create_model_and_transforms(
            model_name, pretrained=str(path)
        )
        tokenizer = open_clip.get_tokenizer(model_name)

        super().__init__(
            embed_dim=int(model.visual.output_dim),
            logit_scale=float(model.logit_scale.exp().item()),
        )
        self.model = model
        self.model_name = model_name
        self.weights_path = path
        self._tokenizer = tokenizer

        visual_ids = {id(p) for p in model.visual.parameters()}
        for p in model.parameters():
            if id(p) not in visual_ids:
                p.requires_grad_(False)

    @property
    def visual_blocks(self) -> Sequence[nn.Module]:
        return list(self.model.visual.transformer.resblocks)

    def visual_post_params(self) -> list[nn.Parameter]:
        return [*self.model.visual.ln_post.parameters(), self.model.visual.proj]

    def visual_modules(self) -> Sequence[nn.Module | nn.Parameter]:
        return [self.model.visual]

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.model.encode_image(images)

    @property
    def has_text_encoder(self) -> bool:
        return True

    def encode_text(self, texts: Sequence[str]) -> torch.Tensor:
        device = next(self.model.parameters()).device
        tokens = self._tokenizer(list(texts)).to(device)
        with torch.no_grad():
            return self.model.encode_text(tokens)

    def describe(self) -> dict[str, Any]:
        return dict(
            kind=self.kind.value,
            weights_path=str(self.weights_path),
            model_name=self.model_name,
        )


def backend_from_description(description: dict[str, Any]) -> EncoderBackend:
    """Rebuild an (untrained) backend from ``EncoderBackend.describe``."""
    kind = BackendKind(description["kind"])
    if kind == BackendKind.STUB:
        return stub_backend(
            seed=int(description["seed"]),
            embed_dim=int(description["embed_dim"]),
            n_blocks=int(description["n_blocks"]),
            with_text=bool(description.get("with_text", True)),
            logit_scale=float(description.get("logit_scale", 100.0)),
        )
    return OpenClipBackend(
        description["weights_path"], description.get("model_name", "ViT-B-32")
    )


@dataclass(frozen=True)
class FreezePolicy:
    """Which part of the visual tower is trained during adaptation.

    The last ``k_top_blocks`` residual blocks are trainable, plus the
    final norm and projection when ``unfreeze_post_norm_and_projection``
    is set. When every block is unfrozen, the stem is unfrozen as well.
    """

    k_top_blocks: int = 3
    unfreeze_post_norm_and_projection: bool = True

    def __post_init__(self):
        if self.k_top_blocks < 0:
            raise ConfigError((f"k_top_blocks must be >= 0, got {self.k_top_blocks}",))


@dataclass(frozen=True)
class FreezeSummary:
    trainable_count: int
    total_count: int
    encoder_trainable_count: int
    flags: dict[str, bool]
    group_counts: dict[str, int]

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_count / self.total_count if self.total_count else 0.0

    @property
    def frozen_count(self) -> int:
        return self.total_count - self.trainable_count


def apply_freeze_policy(
    backend: EncoderBackend, policy: FreezePolicy, head: nn.Module | None = None
) -> FreezeSummary:
    """Set ``requires_grad`` on every backend parameter according to policy.

    Parameters
    ----------
    backend
        Encoder whose visual groups are flagged.
    policy
        Number of top blocks to unfreeze and whether to unfreeze the
        final norm and projection.
    head
        Optional classification head; it is always trainable and counts
        toward both the trainable and the total count.
    """
    n_blocks = len(backend.visual_blocks)
    k = policy.k_top_blocks
    if k > n_blocks:
        raise ModelError(f"k_top_blocks={k} exceeds the {n_blocks} visual blocks")

    groups = backend.parameter_groups()
    flags: dict[str, bool] = {STEM: k == n_blocks}
    for ndx in range(n_blocks):
        flags[block_group(ndx)] = ndx >= n_blocks - k
    flags[POST] = policy.unfreeze_post_norm_and_projection

    for p in backend.parameters():
        p.requires_grad_(False)
    for name, params in groups.items():
        for p in params:
            p.requires_grad_(flags[name])

    counts = {name: sum(p.numel() for p in params) for name, params in groups.items()}
    encoder_trainable = sum(counts[name] for name in groups if flags[name])
    trainable, total = encoder_trainable, sum(counts.values())

    if head is not None:
        for p in head.parameters():
            p.requires_grad_(True)
        counts[HEAD] = sum(p.numel() for p in head.parameters())
        flags[HEAD] = True
        trainable += counts[HEAD]
        total += counts[HEAD]

    summary = FreezeSummary(trainable, total, encoder_trainable, flags, counts)
    logger.info(
        "Freeze policy k=%d post=%s: %d / %d trainable (%.2f%%), %d frozen",
        k,
        policy.unfreeze_post_norm_and_projection,
        trainable,
        total,
        100 * summary.trainable_fraction,
        summary.frozen_count,
    )
    return summary


def image_features(backend: EncoderBackend, images: torch.Tensor) -> torch.Tensor:
    """Embed a batch of preprocessed images, preserving batch order."""
    expected = (3, *constants.TARGET_SIZE)
    if not isinstance(images, torch.Tensor) or images.ndim != 4:
        raise ModelError("images must be a 4-D tensor of shape Bx3x224x224")
    if tuple(images.shape[1:]) != expected:
        raise ModelError(
            f"images must have shape Bx{'x'.join(map(str, expected))}, "
            f"got {tuple(images.shape)}"
        )
    return backend.encode_image(images)
