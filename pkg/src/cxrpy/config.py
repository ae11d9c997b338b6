"""
    cxrpy.config
    ~~~~~~~~~~~~

    Run configuration: one YAML file whose keys are the ``RunConfig``
    field names, overridable by the environment and command-line flags.

    Precedence, highest first: flag, ``CXRPY_DATA_ROOT`` (data_root
    only), file, default.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import dataclasses
import logging
import os
import pathlib
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from . import constants
from .backend import EncoderBackend, FreezePolicy, OpenClipBackend, stub_backend
from .common import config_digest, provenance_line, to_jsonable
from .constants import BackendKind, ScoreSource
from .error import ConfigError
from .head import HeadConfig
from .imaging import AugmentationSpec, PreprocessSpec
from .losses import FocalLossParams
from .prompts import PromptSet
from .train import AdaptationConfig, FewShotConfig

logger = logging.getLogger(__name__)

#: Fields left out of the digest so that runs from different
#: directories share it.
LOCATION_FIELDS = ("data_root", "output_dir")


@dataclass(frozen=True)
class StubOptions:
    embed_dim: int = 64
    n_blocks: int = 6
    with_text: bool = True
    logit_scale: float = 100.0

    def __post_init__(self):
        problems = []
        if self.embed_dim < 2:
            problems.append(f"stub embed_dim must be >= 2, got {self.embed_dim}")
        if self.n_blocks < 1:
            problems.append(f"stub n_blocks must be >= 1, got {self.n_blocks}")
        if not self.logit_scale > 0:
            problems.append(f"stub logit_scale must be > 0, got {self.logit_scale}")
        if problems:
            raise ConfigError(tuple(problems))


def _run_problems(values: Mapping[str, Any]) -> list[str]:
    problems = []
    if values.get("backend") is BackendKind.REAL and values.get("weights_path") is None:
        problems.append("backend=real requires weights_path")
    if not 0.0 <= values.get("val_fraction", 0.1) < 1.0:
        problems.append("val_fraction must be in [0, 1)")
    if values.get("eval_batch_size", 1) < 1:
        problems.append("eval_batch_size must be >= 1")
    shots = tuple(values.get("shots", ()))
    bad = [n for n in shots if not isinstance(n, int) or n < 1]
    if bad:
        problems.append(
            f"shots must be positive integers (0 is the automatic baseline), got {bad}"
        )
    if len(set(shots)) != len(shots):
        problems.append(f"shots must be distinct, got {list(shots)}")
    temperature = values.get("zero_shot_temperature")
    if temperature is not None and temperature <= 0:
        problems.append("zero_shot_temperature must be positive")
    return problems


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs; ``seed`` overrides the nested seeds."""

    data_root: pathlib.Path = pathlib.Path(".")
    backend: BackendKind = BackendKind.STUB
    weights_path: pathlib.Path | None = None
    model_name: str = "ViT-B-32"
    output_dir: pathlib.Path = pathlib.Path("runs")
    seed: int = constants.DEFAULT_SEED
    val_fraction: float = 0.1
    shots: tuple[int, ...] = (1, 2, 4, 8, 16)
    baseline_source: ScoreSource = ScoreSource.HEAD_LOGITS
    zero_shot_temperature: float | None = None
    eval_batch_size: int = 64
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)
    prompts: PromptSet = field(default_factory=PromptSet)
    freeze: FreezePolicy = field(default_factory=FreezePolicy)
    head: HeadConfig = field(default_factory=HeadConfig)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    stub: StubOptions = field(default_factory=StubOptions)

    def __post_init__(self):
        problems = _run_problems({f.name: getattr(self, f.name) for f in dataclasses.fields(self)})
        if problems:
            raise ConfigError(tuple(problems))
        if self.adaptation.seed != self.seed:
            object.__setattr__(
                self, "adaptation", dataclasses.replace(self.adaptation, seed=self.seed)
            )
        if self.fewshot.seed != self.seed:
            object.__setattr__(
                self, "fewshot", dataclasses.replace(self.fewshot, seed=self.seed)
            )

    @property
    def digest(self) -> str:
        payload = to_jsonable(self)
        for name in LOCATION_FIELDS:
            payload.pop(name)
        return config_digest(payload)

    @property
    def provenance(self) -> dict[str, Any]:
        return {"config_digest": self.digest, "seed": self.seed}

    def to_yaml(self) -> str:
        header = provenance_line(self.digest, self.seed)
        return header + "\n" + yaml.safe_dump(to_jsonable(self), sort_keys=False)

    def build_backend(self) -> EncoderBackend:
        if self.backend is BackendKind.REAL:
            assert self.weights_path is not None
            return OpenClipBackend(self.weights_path, self.model_name)
        return stub_backend(
            seed=self.seed,
            embed_dim=self.stub.embed_dim,
            n_blocks=self.stub.n_blocks,
            with_text=self.stub.with_text,
            logit_scale=self.stub.logit_scale,
        )

    def head_config_for(self, backend: EncoderBackend) -> HeadConfig:
        """Head config whose input width follows the backend embedding."""
        if self.head.in_dim == backend.embed_dim:
            return self.head
        return dataclasses.replace(self.head, in_dim=backend.embed_dim)


#: Nested config sections and their types, per owning class.
_NESTED: dict[type, dict[str, type]] = {
    RunConfig: {
        "adaptation": AdaptationConfig,
        "fewshot": FewShotConfig,
        "prompts": PromptSet,
        "freeze": FreezePolicy,
        "head": HeadConfig,
        "preprocess": PreprocessSpec,
        "stub": StubOptions,
    },
    AdaptationConfig: {"focal": FocalLossParams, "augmentation": AugmentationSpec},
}

_PATHS = {"data_root", "output_dir", "weights_path"}
_ENUMS: dict[str, type] = {"backend": BackendKind, "baseline_source": ScoreSource}


def _convert(name: str, value: Any) -> Any:
    if value is None:
        return None
    if name in _PATHS:
        return pathlib.Path(value)
    if name in _ENUMS:
        return _ENUMS[name](value)
    if isinstance(value, list):
        return tuple(value)
    return value


def _build(cls: type, data: Any, prefix: str, problems: list[str]) -> Any:
    """Instantiate cls from a mapping, appending problems instead of raising.

    Falls back to the defaults of cls so that sibling sections are still
    validated.
    """
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        problems.append(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
        data = {}

    known = {f.name for f in dataclasses.fields(cls)}
    nested = _NESTED.get(cls, {})
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            problems.append(f"{path}: unknown key")
            continue
        if key in nested:
            kwargs[key] = _build(nested[key], value, f"{path}.", problems)
            continue
        try:
            kwargs[key] = _convert(key, value)
        except (TypeError, ValueError) as ex:
            problems.append(f"{path}: {ex}")

    try:
        return cls(**kwargs)
    except ConfigError as ex:
        problems.extend(f"{prefix}{p}" if prefix else p for p in ex.problems)
    except TypeError as ex:
        problems.append(f"{prefix or 'config'}: {ex}")

    if cls is RunConfig:
        return None
    return cls()


def load_run_config(
    path: str | pathlib.Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """Read, merge and validate a run configuration.

    Parameters
    ----------
    path
        YAML file; when None only defaults, environment and overrides apply.
    overrides
        Top-level values given on the command line; None values are ignored.
    environ
        Environment mapping, ``os.environ`` by default.

    Every problem found (unknown keys, invalid values in any section,
    cross-field rules) is reported in a single ConfigError.
    """
    environ = os.environ if environ is None else environ
    problems: list[str] = []

    data: dict[str, Any] = {}
    if path is not None:
        path = pathlib.Path(path)
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError((f"Config file not found: {path}",)) from None
        except yaml.YAMLError as ex:
            raise ConfigError((f"Cannot parse {path}: {ex}",)) from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, Mapping):
            raise ConfigError((f"{path}: top level must be a mapping",))
        data.update(loaded)

    env_root = environ.get(constants.DATA_ROOT_ENV)
    if env_root:
        logger.info("data_root taken from %s=%s", constants.DATA_ROOT_ENV, env_root)
        data["data_root"] = env_root

    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value

    config = _build(RunConfig, data, "", problems)
    if problems:
        raise ConfigError(tuple(problems))
    assert config is not None
    return config
