"""
    cxrpy.train
    ~~~~~~~~~~~

    Domain adaptation of the encoder (partial fine-tuning with a focal
    loss) and head-only few-shot fine-tuning.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import pathlib
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Iterable

import pandas as pd
import torch
from torch import nn
from torch.optim.lr_scheduler import ReduceLROnPlateau
from torch.utils.data import DataLoader, TensorDataset

from . import constants
from .backend import EncoderBackend, FreezePolicy, image_features
from .checkpoint import Checkpoint
from .error import (
    ConfigError,
    EmptyDatasetError,
    ModelError,
    SamplingError,
    TrainingAborted,
)
from .head import ClassificationHead, classify, head_score_matrix
from .imaging import AugmentationSpec, ImageSource, PreprocessSpec, XrayDataset
from .losses import FocalLossParams, bce_with_logits, focal_bce_with_logits
from .manifest import DatasetManifest
from .metrics import evaluate
from .prompts import PromptSet
from .sampling import FewShotSubset

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptationConfig:
    """Hyperparameters of the partial fine-tuning stage."""

    encoder_lr: float = 1e-5
    head_lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 32
    grad_clip_max_norm: float = 1.0
    scheduler_patience: int = 2
    scheduler_factor: float = 0.5
    min_lr: float = constants.MIN_LR
    max_epochs: int = 30
    early_stop_patience: int = 5
    seed: int = constants.DEFAULT_SEED
    focal: FocalLossParams = field(default_factory=FocalLossParams)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    num_workers: int = 0

    def __post_init__(self):
        problems = []
        for name in ("encoder_lr", "head_lr", "grad_clip_max_norm", "min_lr"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if not self.encoder_lr < self.head_lr:
            problems.append(
                f"encoder_lr ({self.encoder_lr}) must be lower than head_lr ({self.head_lr})"
            )
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        for name in ("batch_size", "max_epochs", "scheduler_patience", "early_stop_patience"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.scheduler_factor < 1.0:
            problems.append("scheduler_factor must be in (0, 1)")
        if self.num_workers < 0:
            problems.append("num_workers must be >= 0")
        if problems:
            raise ConfigError(tuple(problems))


@dataclass(frozen=True)
class FewShotConfig:
    """Hyperparameters of head-only fine-tuning (plain BCE, no augmentation)."""

    head_lr: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 16
    epochs: int = 20
    seed: int = constants.DEFAULT_SEED

    def __post_init__(self):
        problems = []
        if not self.head_lr > 0:
            problems.append(f"head_lr must be positive, got {self.head_lr}")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        for name in ("batch_size", "epochs"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if problems:
            raise ConfigError(tuple(problems))


@dataclass(frozen=True)
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    val_mean_auc: float | None
    learning_rates: dict[str, float]
    wall_time: float = field(compare=False)


_RECORD_FIELDS = tuple(f.name for f in fields(EpochRecord))


@dataclass
class TrainingTrace:
    """Per-epoch history; equality ignores wall times and metadata.

    ``metadata`` (run digest, seed) is repeated on every JSON line.
    """

    records: list[EpochRecord] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict, compare=False)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("Trace epochs must be strictly increasing")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_records(self) -> list[dict[str, Any]]:
        return [asdict(r) for r in self.records]

    def as_dataframe(self) -> pd.DataFrame:
        df = pd.json_normalize(self.to_records())
        df.attrs["stages"] = sorted({r.stage for r in self.records})
        return df

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps({**self.metadata, **r}, sort_keys=True) + "\n"
            for r in self.to_records()
        )

    def save(self, path: str | pathlib.Path) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl(), encoding="utf-8")
        return path

    @classmethod
    def from_jsonl(cls, text: str) -> TrainingTrace:
        trace = cls()
        for line in filter(None, text.splitlines()):
            payload = json.loads(line)
            trace.append(
                EpochRecord(**{k: payload.pop(k) for k in _RECORD_FIELDS if k in payload})
            )
            trace.metadata.update(payload)
        return trace


def clip_gradients(
    params: Iterable[nn.Parameter] | Iterable[dict[str, Any]], max_norm: float = 1.0
) -> float:
    """Scale gradients in place so that their global L2 norm is at most max_norm.

    Accepts parameters or optimizer-style parameter groups and returns the
    scaling factor that was applied (1.0 when under the threshold).
    """
    flat: list[nn.Parameter] = []
    for item in params:
        if isinstance(item, dict):
            flat.extend(item["params"])
        else:
            flat.append(item)
    with_grad = [p for p in flat if p.grad is not None]
    if not with_grad:
        return 1.0
    total_norm = float(nn.utils.clip_grad_norm_(with_grad, max_norm))
    # same coefficient torch applies, including its 1e-6 guard
    return min(1.0, max_norm / (total_norm + 1e-6))


def build_plateau_scheduler(
    optimizer: torch.optim.Optimizer,
    patience: int = 2,
    factor: float = 0.5,
    min_lr: float = constants.MIN_LR,
) -> ReduceLROnPlateau:
    """Scale every group's LR by factor after ``patience`` epochs without a
    strictly higher validation AUC.
    """
    # torch reduces once the bad-epoch count *exceeds* its patience
    return ReduceLROnPlateau(
        optimizer,
        mode="max",
        factor=factor,
        patience=patience - 1,
        threshold=0.0,
        threshold_mode="abs",
        cooldown=0,
        min_lr=min_lr,
    )


@dataclass(frozen=True)
class AdaptationResult:
    checkpoint: Checkpoint
    trace: TrainingTrace
    best_epoch: int
    best_val_auc: float


def _lrs(optimizer: torch.optim.Optimizer) -> dict[str, float]:
    return {g["name"]: float(g["lr"]) for g in optimizer.param_groups}


def _batch_loss(
    loss_fn: Callable[..., torch.Tensor],
    logits: torch.Tensor,
    targets: torch.Tensor,
    *args: Any,
) -> torch.Tensor:
    """Loss of one batch, NaN when the logits have already diverged."""
    if not torch.isfinite(logits).all():
        return torch.tensor(math.nan)
    return loss_fn(logits, targets, *args)


def adapt(
    backend: EncoderBackend,
    head: ClassificationHead,
    train_set: XrayDataset,
    val_set: XrayDataset,
    config: AdaptationConfig = AdaptationConfig(),
    *,
    freeze_policy: FreezePolicy = FreezePolicy(),
    prompts: PromptSet = PromptSet(),
) -> AdaptationResult:
    """Partially fine-tune backend and train head on train_set.

    The freeze policy must already be applied to backend: only
    parameters with ``requires_grad`` reach the optimizer. Each epoch
    shuffles train_set, minimises the focal loss with clipped AdamW
    steps, then scores val_set; the plateau scheduler and early stopping
    monitor validation mean AUC. Backend and head are left holding the
    best-epoch weights, which is also what the returned checkpoint holds.
    """
    if len(train_set) == 0:
        raise EmptyDatasetError("training")
    if len(val_set) == 0:
        raise EmptyDatasetError("validation")
    if head.config.in_dim != backend.embed_dim:
        raise ModelError(
            f"Head in_dim={head.config.in_dim} does not match "
            f"backend embed_dim={backend.embed_dim}"
        )

    encoder_params = backend.trainable_parameters()
    head_params = list(head.parameters())
    groups: list[dict[str, Any]] = []
    if encoder_params:
        groups.append(dict(params=encoder_params, lr=config.encoder_lr, name="encoder"))
    groups.append(dict(params=head_params, lr=config.head_lr, name="head"))
    trainable = encoder_params + head_params

    logger.info(
        "Adapting: %d train / %d val images, %d trainable encoder tensors",
        len(train_set),
        len(val_set),
        len(encoder_params),
    )

    trace = TrainingTrace()
    best_auc, best_epoch, stale = -math.inf, 0, 0
    best_states: tuple[dict[str, torch.Tensor], dict[str, torch.Tensor]] | None = None

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        optimizer = torch.optim.AdamW(groups, weight_decay=config.weight_decay)
        scheduler = build_plateau_scheduler(
            optimizer, config.scheduler_patience, config.scheduler_factor, config.min_lr
        )
        shuffle_gen = torch.Generator().manual_seed(config.seed)

        for epoch in range(1, config.max_epochs + 1):
            start = time.perf_counter()
            train_set.set_epoch(epoch)
            loader = DataLoader(
                train_set,
                batch_size=config.batch_size,
                shuffle=True,
                generator=shuffle_gen,
                num_workers=config.num_workers,
            )

            backend.train()
            head.train()
            loss_sum, seen = 0.0, 0
            for step, (images, targets) in enumerate(loader):
                logits = classify(backend, head, images)
                loss = _batch_loss(focal_bce_with_logits, logits, targets, config.focal)
                if not torch.isfinite(loss):
                    raise TrainingAborted(
                        "adaptation", epoch, step, float(loss), {"lrs": _lrs(optimizer)}
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                clip_gradients(trainable, config.grad_clip_max_norm)
                optimizer.step()
                loss_sum += float(loss) * len(images)
                seen += len(images)

            val_auc = evaluate(head_score_matrix(backend, head, val_set)).mean_auc
            scheduler.step(val_auc)

            record = EpochRecord(
                stage="adaptation",
                epoch=epoch,
                train_loss=loss_sum / seen,
                val_mean_auc=val_auc,
                learning_rates=_lrs(optimizer),
                wall_time=time.perf_counter() - start,
            )
            trace.append(record)
            logger.info(
                "epoch %d: loss=%.5f val_auc=%.4f lrs=%s",
                epoch,
                record.train_loss,
                val_auc,
                record.learning_rates,
            )

            if val_auc > best_auc:
                best_auc, best_epoch, stale = val_auc, epoch, 0
                best_states = (
                    copy.deepcopy(backend.state_dict()),
                    copy.deepcopy(head.state_dict()),
                )
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    logger.info("Early stop after %d stagnant epochs", stale)
                    break

    assert best_states is not None
    backend.load_state_dict(best_states[0])
    head.load_state_dict(best_states[1])
    backend.eval()
    head.eval()

    checkpoint = Checkpoint.capture(
        backend,
        head,
        freeze_policy=freeze_policy,
        prompts=prompts,
        seed=config.seed,
        epoch=best_epoch,
        adapted=True,
        history=trace.to_records(),
    )
    logger.info("Best validation mean AUC %.4f at epoch %d", best_auc, best_epoch)
    return AdaptationResult(checkpoint, trace, best_epoch, best_auc)


@dataclass(frozen=True)
class FewShotResult:
    checkpoint: Checkpoint
    trace: TrainingTrace


def fewshot_finetune(
    checkpoint: Checkpoint,
    subset: FewShotSubset,
    manifest: DatasetManifest,
    source: ImageSource,
    config: FewShotConfig = FewShotConfig(),
    *,
    preprocess_spec: PreprocessSpec = PreprocessSpec(),
    allow_unadapted: bool = False,
) -> FewShotResult:
    """Train only the head of checkpoint on the subset images.

    The encoder is frozen and no augmentation is applied, so subset
    embeddings are computed once and the head is trained on them with
    plain BCE. The returned checkpoint shares the input encoder state.

    Parameters
    ----------
    checkpoint
        Output of ``adapt`` (or any checkpoint when allow_unadapted).
    subset
        Balanced sample from ``sample_few_shot``.
    manifest
        Any manifest containing the subset records (usually the train pool).
    source
        Where images are read from.
    config
        Optimiser settings.
    """
    if not checkpoint.adapted and not allow_unadapted:
        raise ModelError(
            "Checkpoint was not produced by adaptation; pass allow_unadapted=True"
        )
    if len(subset) == 0:
        raise SamplingError("Cannot fine-tune on an empty subset")
    missing = sorted(i for i in subset.record_ids if i not in manifest)
    if missing:
        raise SamplingError(f"Subset ids missing from the manifest: {missing[:5]}")

    backend = checkpoint.restore_backend()
    for p in backend.parameters():
        p.requires_grad_(False)
    head = checkpoint.restore_head()

    dataset = XrayDataset(manifest.select(subset.record_ids), source, preprocess_spec)
    feats, targets = [], []
    with torch.no_grad():
        for images, labels in DataLoader(dataset, batch_size=64, shuffle=False):
            feats.append(image_features(backend, images))
            targets.append(labels)
    features = TensorDataset(torch.cat(feats), torch.cat(targets))

    trace = TrainingTrace()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        optimizer = torch.optim.AdamW(
            [dict(params=list(head.parameters()), lr=config.head_lr, name="head")],
            weight_decay=config.weight_decay,
        )
        shuffle_gen = torch.Generator().manual_seed(config.seed)

        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            head.train()
            loss_sum, seen = 0.0, 0
            loader = DataLoader(
                features, batch_size=config.batch_size, shuffle=True, generator=shuffle_gen
            )
            for step, (x, y) in enumerate(loader):
                loss = _batch_loss(bce_with_logits, head(x), y)
                if not torch.isfinite(loss):
                    raise TrainingAborted("few-shot", epoch, step, float(loss))
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                loss_sum += float(loss) * len(x)
                seen += len(x)
            trace.append(
                EpochRecord(
                    stage=f"fewshot-{subset.n_shots}",
                    epoch=epoch,
                    train_loss=loss_sum / seen,
                    val_mean_auc=None,
                    learning_rates=_lrs(optimizer),
                    wall_time=time.perf_counter() - start,
                )
            )
            logger.debug("few-shot epoch %d: loss=%.5f", epoch, trace.records[-1].train_loss)

    head.eval()
    logger.info(
        "%d-shot fine-tuning on %d images: loss %.5f -> %.5f",
        subset.n_shots,
        len(subset),
        trace.records[0].train_loss,
        trace.records[-1].train_loss,
    )
    out = checkpoint.with_head(
        head, history=checkpoint.history + trace.to_records(), epoch=config.epochs
    )
    return FewShotResult(out, trace)
