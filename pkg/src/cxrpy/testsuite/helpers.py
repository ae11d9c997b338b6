from __future__ import annotations

import numpy as np

from cxrpy.constants import DISEASE_NAMES, NUM_CLASSES, Split
from cxrpy.imaging import ArrayImageSource
from cxrpy.manifest import DatasetManifest, StudyRecord


def record(
    image_id: str, patient: str, *findings: str, split: Split = Split.UNASSIGNED
) -> StudyRecord:
    labels = [0] * NUM_CLASSES
    for name in findings:
        labels[DISEASE_NAMES.index(name)] = 1
    return StudyRecord(image_id, patient, tuple(labels), split=split)


def csv_text(*rows: tuple[str, str, str]) -> str:
    lines = ["Image Index,Finding Labels,Follow-up #,Patient ID"]
    lines += [f"{img},{labels},0,{patient}" for img, labels, patient in rows]
    return "\n".join(lines) + "\n"


def two_class_toy(
    n: int = 24, seed: int = 0
) -> tuple[DatasetManifest, ArrayImageSource]:
    """Images whose left (first class) or right (second class) half is bright."""
    rng = np.random.default_rng(seed)
    records, images = [], {}
    for ndx in range(n):
        cls = ndx % 2
        img = np.full((64, 64), 0.2) + rng.normal(0, 0.05, (64, 64))
        if cls == 0:
            img[:, :32] += 0.6
        else:
            img[:, 32:] += 0.6
        image_id = f"toy_{ndx:03d}.png"
        images[image_id] = np.clip(img, 0, 1).astype(np.float32)
        records.append(record(image_id, str(ndx), DISEASE_NAMES[cls]))
    return DatasetManifest(tuple(records)), ArrayImageSource(images)
