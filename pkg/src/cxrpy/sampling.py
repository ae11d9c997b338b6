"""
    cxrpy.sampling
    ~~~~~~~~~~~~~~

    Balanced N-shot subsets of a training pool.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import json
import logging
import pathlib
import warnings
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .common import provenance_line
from .constants import DISEASE_NAMES, NUM_CLASSES
from .error import SamplingError
from .manifest import DatasetManifest, read_id_list, write_id_list

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FewShotSubset:
    """Union of per-class picks.

    ``class_counts`` counts every picked image toward each class it is
    positive for, so a class may hold more than n_shots positives.
    """

    n_shots: int
    record_ids: frozenset[str]
    seed: int
    class_counts: tuple[int, ...]
    skipped_classes: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.record_ids)

    @property
    def warnings(self) -> tuple[str, ...]:
        return tuple(
            f"Class {name} has no positives in the pool; skipped"
            for name in self.skipped_classes
        )

    def sorted_ids(self) -> list[str]:
        return sorted(self.record_ids)

    def sidecar(self) -> dict[str, object]:
        return {
            "n_shots": self.n_shots,
            "seed": self.seed,
            "n_images": len(self.record_ids),
            "class_counts": dict(zip(DISEASE_NAMES, self.class_counts)),
            "skipped_classes": list(self.skipped_classes),
            "warnings": list(self.warnings),
        }


def sample_few_shot(pool: DatasetManifest, n_shots: int, seed: int) -> FewShotSubset:
    """Sample a balanced subset of a (train) pool.

    For each class independently, min(n_shots, positives) records
    positive for that class are drawn uniformly without replacement; the
    subset is the union of the per-class picks. Classes without any
    positive are skipped and listed in ``skipped_classes``.

    Parameters
    ----------
    pool
        Manifest restricted to the training split.
    n_shots
        Number of positives requested per class (>= 1).
    seed
        The draw is a pure function of (pool, n_shots, seed).
    """
    if n_shots < 1:
        raise SamplingError(f"n_shots must be >= 1, got {n_shots}")
    if len(pool) == 0:
        raise SamplingError("Cannot sample from an empty pool")

    rng = np.random.default_rng(seed)
    labels = pool.label_matrix()
    ids = pool.image_ids

    picked: set[str] = set()
    skipped: list[str] = []
    for class_index in range(NUM_CLASSES):
        positives = np.flatnonzero(labels[:, class_index])
        if positives.size == 0:
            skipped.append(DISEASE_NAMES[class_index])
            continue
        k = min(n_shots, positives.size)
        chosen = rng.choice(positives, size=k, replace=False)
        picked.update(ids[ndx] for ndx in chosen)

    mask = np.fromiter((i in picked for i in ids), dtype=bool, count=len(ids))
    counts = labels[mask].sum(axis=0)

    subset = FewShotSubset(
        n_shots=n_shots,
        record_ids=frozenset(picked),
        seed=seed,
        class_counts=tuple(int(c) for c in counts),
        skipped_classes=tuple(skipped),
    )
    for msg in subset.warnings:
        logger.warning(msg)
        warnings.warn(msg, stacklevel=2)
    logger.info("Sampled %d-shot subset of %d images", n_shots, len(subset))
    return subset


def export_subset(
    subset: FewShotSubset,
    stem: str | pathlib.Path,
    provenance: Mapping[str, Any] | None = None,
) -> tuple[pathlib.Path, pathlib.Path]:
    """Write <stem>.txt (one id per line) and <stem>.json (sidecar).

    provenance (config_digest, seed) heads the id list as a comment and
    is merged into the sidecar.
    """
    stem = pathlib.Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    ids_path = stem.with_suffix(".txt")
    meta_path = stem.with_suffix(".json")
    header = None
    if provenance:
        header = provenance_line(provenance["config_digest"], provenance["seed"])
    ids_path.write_text(write_id_list(subset.sorted_ids(), header), encoding="utf-8")
    meta = {**(provenance or {}), **subset.sidecar()}
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return ids_path, meta_path


def load_subset(stem: str | pathlib.Path) -> FewShotSubset:
    stem = pathlib.Path(stem)
    ids = read_id_list(stem.with_suffix(".txt").read_text(encoding="utf-8"))
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    return FewShotSubset(
        n_shots=int(meta["n_shots"]),
        record_ids=frozenset(ids),
        seed=int(meta["seed"]),
        class_counts=tuple(int(meta["class_counts"][n]) for n in DISEASE_NAMES),
        skipped_classes=tuple(meta.get("skipped_classes", ())),
    )
