"""
    cxrpy.checkpoint
    ~~~~~~~~~~~~~~~~

    Self describing checkpoint archive shared by adaptation and few-shot
    fine-tuning.

    The archive is a ``torch.save``d dictionary holding only tensors and
    plain Python values, so it loads with ``weights_only=True``.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import dataclasses
import logging
import pathlib
from dataclasses import dataclass, field
from typing import Any

import torch
from typing_extensions import Self

from .backend import EncoderBackend, FreezePolicy, backend_from_description
from .common import state_digest
from .error import ModelError
from .head import ClassificationHead, HeadConfig
from .prompts import PromptSet

logger = logging.getLogger(__name__)

FORMAT = "cxrpy-checkpoint/1"


def _clone_state(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}


@dataclass(frozen=True)
class Checkpoint:
    backend: dict[str, Any]
    encoder_state: dict[str, torch.Tensor]
    head_config: HeadConfig
    head_state: dict[str, torch.Tensor]
    freeze_policy: FreezePolicy
    prompts: PromptSet
    seed: int
    epoch: int
    adapted: bool
    history: list[dict[str, Any]] = field(default_factory=list)
    config_digest: str = ""

    @classmethod
    def capture(
        cls,
        backend: EncoderBackend,
        head: ClassificationHead,
        *,
        freeze_policy: FreezePolicy,
        prompts: PromptSet = PromptSet(),
        seed: int,
        epoch: int = 0,
        adapted: bool,
        history: list[dict[str, Any]] | None = None,
    ) -> Self:
        """Snapshot the current weights of backend and head."""
        return cls(
            backend=backend.describe(),
            encoder_state=_clone_state(backend),
            head_config=head.config,
            head_state=_clone_state(head),
            freeze_policy=freeze_policy,
            prompts=prompts,
            seed=seed,
            epoch=epoch,
            adapted=adapted,
            history=list(history or []),
        )

    def restore_backend(self) -> EncoderBackend:
        backend = backend_from_description(self.backend)
        backend.load_state_dict(self.encoder_state)
        backend.eval()
        return backend

    def restore_head(self) -> ClassificationHead:
        head = ClassificationHead(self.head_config)
        head.load_state_dict(self.head_state)
        head.eval()
        return head

    def with_head(
        self, head: ClassificationHead, history: list[dict[str, Any]], epoch: int
    ) -> Self:
        return dataclasses.replace(
            self, head_state=_clone_state(head), history=history, epoch=epoch
        )

    @property
    def encoder_digest(self) -> str:
        return state_digest(self.encoder_state)

    @property
    def head_digest(self) -> str:
        return state_digest(self.head_state)

    def to_dict(self) -> dict[str, Any]:
        return dict(
            format=FORMAT,
            backend=dict(self.backend),
            encoder_state=self.encoder_state,
            head_config=dataclasses.asdict(self.head_config),
            head_state=self.head_state,
            freeze_policy=dataclasses.asdict(self.freeze_policy),
            prompts=dataclasses.asdict(self.prompts),
            seed=self.seed,
            epoch=self.epoch,
            adapted=self.adapted,
            history=list(self.history),
            config_digest=self.config_digest,
        )

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> Self:
        if payload.get("format") != FORMAT:
            raise ModelError(f"Unsupported checkpoint format {payload.get('format')!r}")
        return cls(
            backend=dict(payload["backend"]),
            encoder_state=dict(payload["encoder_state"]),
            head_config=HeadConfig(**payload["head_config"]),
            head_state=dict(payload["head_state"]),
            freeze_policy=FreezePolicy(**payload["freeze_policy"]),
            prompts=PromptSet(**payload["prompts"]),
            seed=int(payload["seed"]),
            epoch=int(payload["epoch"]),
            adapted=bool(payload["adapted"]),
            history=list(payload.get("history", [])),
            config_digest=str(payload.get("config_digest", "")),
        )

    def save(self, path: str | pathlib.Path) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.to_dict(), path)
        logger.info("Checkpoint written to %s", path)
        return path

    @classmethod
    def load(cls, path: str | pathlib.Path) -> Self:
        path = pathlib.Path(path)
        if not path.is_file():
            raise ModelError(f"Checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as ex:
            raise ModelError(f"Cannot read checkpoint {path}: {ex}") from None
        return cls.from_dict(payload)
