"""
    cxrpy
    ~~~~~

    Label-efficient chest X-ray classification: partial adaptation of a
    vision-language encoder, prompt zero-shot scoring, few-shot heads and
    multi-label ROC-AUC evaluation.


    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

from .backend import FreezePolicy, apply_freeze_policy, stub_backend
from .checkpoint import Checkpoint
from .config import RunConfig, load_run_config
from .head import HeadConfig, build_head, classify
from .losses import FocalLossParams, bce_with_logits, focal_bce_with_logits
from .manifest import DatasetManifest, parse_manifest
from .metrics import EvalReport, ScoreMatrix, evaluate, roc_auc
from .prompts import PromptSet, zero_shot_scores
from .sampling import FewShotSubset, sample_few_shot
from .train import AdaptationConfig, FewShotConfig, adapt, fewshot_finetune

__all__ = [
    "AdaptationConfig",
    "Checkpoint",
    "DatasetManifest",
    "EvalReport",
    "FewShotConfig",
    "FewShotSubset",
    "FocalLossParams",
    "FreezePolicy",
    "HeadConfig",
    "PromptSet",
    "RunConfig",
    "ScoreMatrix",
    "adapt",
    "apply_freeze_policy",
    "bce_with_logits",
    "build_head",
    "classify",
    "evaluate",
    "fewshot_finetune",
    "focal_bce_with_logits",
    "load_run_config",
    "parse_manifest",
    "roc_auc",
    "sample_few_shot",
    "stub_backend",
]
