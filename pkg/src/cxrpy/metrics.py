"""
    cxrpy.metrics
    ~~~~~~~~~~~~~

    Exact multi-label ROC-AUC and evaluation reports.

    AUC follows the Mann-Whitney convention: the probability that a
    random positive outscores a random negative, with half credit for
    ties. It is computed from midranks, and cross-checked against the
    quadratic pairwise definition in the test suite.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import json
import logging
import math
import pathlib
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Sequence

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.stats import rankdata
from typing_extensions import Self

from .constants import DEFAULT_SEED, DISEASE_NAMES, NUM_CLASSES, ScoreSource
from .error import EvaluationError, ReportError

logger = logging.getLogger(__name__)


def _as_binary_problem(
    scores: Sequence[float] | npt.ArrayLike, labels: Sequence[int] | npt.ArrayLike
) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.bool_]]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise EvaluationError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if s.size == 0:
        raise EvaluationError("Cannot compute AUC of an empty input")
    if not np.isfinite(s).all():
        raise EvaluationError("Scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise EvaluationError("Labels must be 0 or 1")
    return s, y.astype(bool)


def roc_auc(
    scores: Sequence[float] | npt.ArrayLike, labels: Sequence[int] | npt.ArrayLike
) -> float | None:
    """ROC-AUC by rank sum, O(n log n); None when a class is degenerate.

    >>> roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    1.0
    >>> roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    0.75
    >>> roc_auc([0.3, 0.6], [1, 1]) is None
    True
    """
    s, y = _as_binary_problem(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = float(ranks[y].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_auc_pairwise(
    scores: Sequence[float] | npt.ArrayLike, labels: Sequence[int] | npt.ArrayLike
) -> float | None:
    """Brute-force O(P*N) AUC over every positive/negative pair."""
    s, y = _as_binary_problem(scores, labels)
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    wins = np.count_nonzero(pos[:, None] > neg[None, :])
    ties = np.count_nonzero(pos[:, None] == neg[None, :])
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def mean_defined(values: Sequence[float | None]) -> float:
    """Arithmetic mean of the values that are not None.

    >>> mean_defined([0.5, None, 1.0])
    0.75
    """
    defined = [v for v in values if v is not None]
    if not defined:
        raise EvaluationError("No class has a defined AUC")
    return math.fsum(defined) / len(defined)


@dataclass(frozen=True)
class ScoreMatrix:
    """n_images x 14 scores (any monotone score space) and labels."""

    scores: npt.NDArray[np.float64]
    labels: npt.NDArray[np.int64]
    source: ScoreSource

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if scores.ndim != 2 or scores.shape[1] != NUM_CLASSES:
            raise EvaluationError(f"scores must be n x {NUM_CLASSES}, got {scores.shape}")
        if scores.shape != labels.shape:
            raise EvaluationError(
                f"scores {scores.shape} and labels {labels.shape} shapes differ"
            )
        if not np.isfinite(scores).all():
            raise EvaluationError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class EvalReport:
    per_class_auc: tuple[float | None, ...]
    mean_auc: float
    n_shots: int
    seed: int
    source: ScoreSource
    timestamp: str
    config_digest: str
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_per_class(
        cls,
        per_class_auc: Sequence[float | None],
        *,
        n_shots: int = 0,
        seed: int = DEFAULT_SEED,
        source: ScoreSource = ScoreSource.HEAD_LOGITS,
        config_digest: str = "",
        metadata: dict[str, Any] | None = None,
        timestamp: str | None = None,
    ) -> Self:
        if len(per_class_auc) != NUM_CLASSES:
            raise EvaluationError(f"Expected {NUM_CLASSES} per-class values")
        if n_shots < 0:
            raise EvaluationError(f"n_shots must be >= 0, got {n_shots}")
        return cls(
            per_class_auc=tuple(per_class_auc),
            mean_auc=mean_defined(per_class_auc),
            n_shots=n_shots,
            seed=seed,
            source=source,
            timestamp=timestamp or datetime.now(tz=timezone.utc).isoformat(),
            config_digest=config_digest,
            metadata=dict(metadata or {}),
        )

    @property
    def undefined_classes(self) -> tuple[str, ...]:
        return tuple(
            name for name, v in zip(DISEASE_NAMES, self.per_class_auc) if v is None
        )

    def auc_by_class(self) -> dict[str, float | None]:
        return dict(zip(DISEASE_NAMES, self.per_class_auc))

    def as_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {"auc": [np.nan if v is None else v for v in self.per_class_auc]},
            index=pd.Index(DISEASE_NAMES, name="disease"),
        )
        df.attrs["mean_auc"] = self.mean_auc
        df.attrs["n_shots"] = self.n_shots
        df.attrs["seed"] = self.seed
        df.attrs["source"] = self.source.value
        df.attrs["timestamp"] = self.timestamp
        df.attrs["config_digest"] = self.config_digest
        for k, v in self.metadata.items():
            df.attrs[k] = v
        return df

    def to_dict(self) -> dict[str, Any]:
        return dict(
            per_class_auc=self.auc_by_class(),
            mean_auc=self.mean_auc,
            n_shots=self.n_shots,
            seed=self.seed,
            source=self.source.value,
            timestamp=self.timestamp,
            config_digest=self.config_digest,
            undefined_classes=list(self.undefined_classes),
            metadata=self.metadata,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> Self:
        per_class = payload["per_class_auc"]
        if isinstance(per_class, dict):
            missing = [n for n in DISEASE_NAMES if n not in per_class]
            if missing:
                raise EvaluationError(f"per_class_auc lacks {', '.join(missing)}")
            values = [per_class[n] for n in DISEASE_NAMES]
        else:
            values = list(per_class)
        return cls(
            per_class_auc=tuple(None if v is None else float(v) for v in values),
            mean_auc=float(payload["mean_auc"]),
            n_shots=int(payload["n_shots"]),
            seed=int(payload["seed"]),
            source=ScoreSource(payload["source"]),
            timestamp=str(payload["timestamp"]),
            config_digest=str(payload["config_digest"]),
            metadata=dict(payload.get("metadata", {})),
        )

    def save(self, path: str | pathlib.Path) -> pathlib.Path:
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | pathlib.Path) -> Self:
        path = pathlib.Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            return cls.from_dict(payload)
        except FileNotFoundError:
            raise ReportError(str(path), "file not found") from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as ex:
            raise ReportError(str(path), f"{type(ex).__name__}: {ex}") from None
        except EvaluationError as ex:
            raise ReportError(str(path), str(ex)) from None


def evaluate(
    matrix: ScoreMatrix,
    *,
    n_shots: int = 0,
    seed: int = DEFAULT_SEED,
    config_digest: str = "",
    metadata: dict[str, Any] | None = None,
    timestamp: str | None = None,
) -> EvalReport:
    """Per-class AUC of every column and their mean over defined classes."""
    per_class = [
        roc_auc(matrix.scores[:, c], matrix.labels[:, c]) for c in range(NUM_CLASSES)
    ]
    if all(v is None for v in per_class):
        raise EvaluationError("All 14 classes lack positives or negatives")

    report = EvalReport.from_per_class(
        per_class,
        n_shots=n_shots,
        seed=seed,
        source=matrix.source,
        config_digest=config_digest,
        metadata=metadata,
        timestamp=timestamp,
    )
    if report.undefined_classes:
        logger.warning(
            "AUC undefined (excluded from the mean) for: %s",
            ", ".join(report.undefined_classes),
        )
    return report
