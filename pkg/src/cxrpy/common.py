"""
cxrpy.common
~~~~~~~~~~~~

Common functions and classes.


:copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
:license: BSD, see LICENSE for more details.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import pathlib
from typing import Any, Generic, Iterator, Literal, Mapping, TypeAlias, TypeVar

import numpy as np
import torch

from .constants import DISEASE_NAMES

K = TypeVar("K")
V = TypeVar("V")


class TwoWayDict(Generic[K, V]):
    """Mapping that can also be looked up from value to key.

    >>> d = TwoWayDict({"a": 1, "b": 2})
    >>> d["a"], d.inv[2]
    (1, 'b')
    """

    def __init__(self, d: dict[K, V]):
        self._d = d
        self._inv = {v: k for k, v in d.items()}
        if len(self._inv) != len(self._d):
            raise ValueError("TwoWayDict values must be unique")

    def __getitem__(self, __key: K) -> V:
        return self._d[__key]

    def __contains__(self, __key: object) -> bool:
        return __key in self._d

    def __iter__(self) -> Iterator[K]:
        return iter(self._d)

    def __len__(self) -> int:
        return len(self._d)

    @property
    def inv(self) -> dict[V, K]:
        return self._inv


INTERPOLATION_VALUES: TypeAlias = Literal["bicubic", "bilinear"]

#: Finding name <-> label-vector index.
DISEASE_MAP = TwoWayDict[str, int]({name: ndx for ndx, name in enumerate(DISEASE_NAMES)})


def display_name(disease: str) -> str:
    """Human readable disease name used in prompts.

    >>> display_name("Pleural_Thickening")
    'Pleural Thickening'
    """
    return disease.replace("_", " ")


def derive_seed(seed: int, *keys: Any) -> int:
    """Derive a 63 bit seed from a base seed and any number of keys.

    The result only depends on the values, never on call order, so samples
    processed by different workers obtain the same stream.

    >>> derive_seed(7, "00000001_000.png") == derive_seed(7, "00000001_000.png")
    True
    >>> derive_seed(7, "a") == derive_seed(8, "a")
    False
    """
    text = ":".join(str(k) for k in (seed, *keys))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def make_generator(seed: int, *keys: Any) -> torch.Generator:
    """CPU torch generator seeded from ``derive_seed``."""
    return torch.Generator().manual_seed(derive_seed(seed, *keys))


def to_jsonable(obj: Any) -> Any:
    """Convert dataclasses, enums, paths and tuples into JSON friendly values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {
            f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)
        }
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, pathlib.PurePath):
        return str(obj)
    if isinstance(obj, Mapping):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, frozenset, set)):
        items = [to_jsonable(v) for v in obj]
        return sorted(items) if isinstance(obj, (set, frozenset)) else items
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def config_digest(obj: Any) -> str:
    """Short SHA-256 digest of the canonical JSON form of obj.

    >>> config_digest({"b": 1, "a": 2}) == config_digest({"a": 2, "b": 1})
    True
    >>> len(config_digest({}))
    16
    """
    payload = json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def state_digest(state: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over the raw bytes of a state dict, keyed by parameter name."""
    h = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(tensor.numpy().tobytes())
    return h.hexdigest()


def provenance_line(digest: str, seed: int) -> str:
    """Comment line heading the text artifacts of a run.

    >>> provenance_line("0123abcd", 7)
    '# config_digest=0123abcd seed=7'
    """
    return f"# config_digest={digest} seed={seed}"
