"""
    cxrpy.error
    ~~~~~~~~~~~

    Classes and methods for exception handling.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .constants import ExitCode


class CxrError(Exception):
    """Base class of all toolkit errors."""


@dataclass(frozen=True)
class ConfigError(CxrError):
    """One or more configuration problems, reported together."""

    problems: tuple[str, ...]

    def __str__(self) -> str:
        lines = "\n".join(f"  - {p}" for p in self.problems)
        return f"Invalid configuration ({len(self.problems)} problem(s)):\n{lines}"


class DataError(CxrError):
    """Base class of errors caused by input data."""


@dataclass(frozen=True)
class ManifestError(DataError):
    message: str
    row: int | None = None
    token: str | None = None

    def __str__(self) -> str:
        where = f" (row {self.row})" if self.row is not None else ""
        what = f": {self.token!r}" if self.token is not None else ""
        return f"{self.message}{what}{where}"


@dataclass(frozen=True)
class SplitError(DataError):
    message: str
    ids: tuple[str, ...] = ()

    def __str__(self) -> str:
        if not self.ids:
            return self.message
        shown = ", ".join(self.ids[:5])
        more = f" and {len(self.ids) - 5} more" if len(self.ids) > 5 else ""
        return f"{self.message}: {shown}{more}"


@dataclass(frozen=True)
class MissingInputError(DataError):
    paths: tuple[str, ...]

    def __str__(self) -> str:
        return "Missing input file(s): " + ", ".join(self.paths)


@dataclass(frozen=True)
class ImageError(DataError):
    path: str
    reason: str

    def __str__(self) -> str:
        return f"Cannot use image {self.path}: {self.reason}"


@dataclass(frozen=True)
class SamplingError(DataError):
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class EmptyDatasetError(DataError):
    name: str

    def __str__(self) -> str:
        return f"The {self.name} set is empty"


@dataclass(frozen=True)
class ReportError(DataError):
    path: str
    reason: str

    def __str__(self) -> str:
        return f"Malformed report {self.path}: {self.reason}"


@dataclass(frozen=True)
class ModelError(CxrError):
    message: str

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class EvaluationError(CxrError):
    message: str

    def __str__(self) -> str:
        return self.message


class LossInputError(ValueError):
    """Invalid loss function inputs (shape mismatch, NaN)."""


@dataclass(frozen=True)
class TrainingAborted(CxrError):
    stage: str
    epoch: int
    step: int
    loss: float
    details: dict[str, Any] = field(default_factory=dict)

    def __str__(self) -> str:
        return (
            f"{self.stage} aborted at epoch {self.epoch}, step {self.step}: "
            f"non-finite loss {self.loss!r} {self.details or ''}".rstrip()
        )


def get_exit_code(exc: BaseException) -> ExitCode:
    """Exit code of the command line interface for a given exception."""
    if isinstance(exc, ConfigError):
        return ExitCode.CONFIG
    elif isinstance(exc, TrainingAborted):
        return ExitCode.TRAINING
    elif isinstance(exc, (DataError, ModelError, EvaluationError)):
        return ExitCode.DATA
    raise exc
