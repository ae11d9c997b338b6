"""
    cxrpy.manifest
    ~~~~~~~~~~~~~~

    NIH ChestX-ray14 style manifests: parsing of the Data_Entry CSV,
    split lists and patient-grouped train/validation partitioning.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import io
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence, TextIO

import numpy as np
import numpy.typing as npt
import pandas as pd

from . import constants
from .common import DISEASE_MAP
from .constants import NO_FINDING, NUM_CLASSES, Split
from .error import ManifestError, SplitError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiseaseLabel:
    index: int
    name: str


#: The 14 finding labels, index order.
DISEASE_LABELS: tuple[DiseaseLabel, ...] = tuple(
    DiseaseLabel(DISEASE_MAP[name], name) for name in constants.DISEASE_NAMES
)


def check_label_set(label_set: Sequence[DiseaseLabel]) -> None:
    if len(label_set) != NUM_CLASSES:
        raise ManifestError(f"Expected {NUM_CLASSES} labels, got {len(label_set)}")
    if len({lbl.name for lbl in label_set}) != NUM_CLASSES:
        raise ManifestError("Label names must be unique")
    if sorted(lbl.index for lbl in label_set) != list(range(NUM_CLASSES)):
        raise ManifestError(f"Label indices must cover 0..{NUM_CLASSES - 1}")


@dataclass(frozen=True)
class StudyRecord:
    """One image of the manifest."""

    image_id: str
    patient_id: str
    labels: tuple[int, ...]
    view: str = ""
    split: Split = Split.UNASSIGNED

    def __post_init__(self):
        if len(self.labels) != NUM_CLASSES:
            raise ManifestError(
                f"Label vector of {self.image_id} has length {len(self.labels)}"
            )
        if any(v not in (0, 1) for v in self.labels):
            raise ManifestError(f"Label vector of {self.image_id} is not multi-hot")

    @property
    def findings(self) -> tuple[str, ...]:
        return tuple(
            DISEASE_MAP.inv[ndx] for ndx, value in enumerate(self.labels) if value
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered collection of studies.

    ``class_counts`` is derived from the records and therefore can never
    disagree with them.
    """

    records: tuple[StudyRecord, ...]
    class_counts: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        seen: set[str] = set()
        dups: list[str] = []
        for rec in self.records:
            if rec.image_id in seen:
                dups.append(rec.image_id)
            seen.add(rec.image_id)
        if dups:
            raise ManifestError("Duplicate image_id", token=dups[0])

        counts = self.label_matrix().sum(axis=0) if self.records else np.zeros(
            NUM_CLASSES, dtype=np.int64
        )
        object.__setattr__(self, "class_counts", tuple(int(c) for c in counts))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @cached_property
    def _by_id(self) -> dict[str, StudyRecord]:
        return {rec.image_id: rec for rec in self.records}

    def __getitem__(self, image_id: str) -> StudyRecord:
        return self._by_id[image_id]

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._by_id

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(rec.image_id for rec in self.records)

    def label_matrix(self) -> npt.NDArray[np.int64]:
        """n_records x 14 multi-hot matrix."""
        return np.asarray([rec.labels for rec in self.records], dtype=np.int64).reshape(
            -1, NUM_CLASSES
        )

    def restrict(self, split: Split) -> DatasetManifest:
        return DatasetManifest(tuple(rec for rec in self.records if rec.split == split))

    def select(self, image_ids: Iterable[str]) -> DatasetManifest:
        """Records whose id is in image_ids, in manifest order."""
        wanted = set(image_ids)
        return DatasetManifest(
            tuple(rec for rec in self.records if rec.image_id in wanted)
        )

    def split_sizes(self) -> dict[str, int]:
        counter = Counter(rec.split.value for rec in self.records)
        return {s.value: counter.get(s.value, 0) for s in Split}

    def as_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame(
            self.label_matrix(),
            columns=list(constants.DISEASE_NAMES),
            index=pd.Index(self.image_ids, name=constants.COL_IMAGE),
        )
        df.insert(0, constants.COL_PATIENT, [r.patient_id for r in self.records])
        df.insert(1, constants.COL_SPLIT, [r.split.value for r in self.records])
        df.attrs["class_counts"] = dict(zip(constants.DISEASE_NAMES, self.class_counts))
        return df


def _encode_labels(
    field_value: str, row: int, name_to_index: dict[str, int]
) -> tuple[int, ...]:
    vector = [0] * NUM_CLASSES
    value = field_value.strip()
    if value == NO_FINDING:
        return tuple(vector)
    for token in value.split("|"):
        token = token.strip()
        if token not in name_to_index:
            raise ManifestError("Unknown finding token", row=row, token=token)
        vector[name_to_index[token]] = 1
    return tuple(vector)


def parse_manifest(
    csv_text: str | TextIO,
    label_set: Sequence[DiseaseLabel] = DISEASE_LABELS,
) -> DatasetManifest:
    """Parse a Data_Entry style CSV into a manifest.

    Parameters
    ----------
    csv_text
        CSV content (or an open text stream) with a header row. Required
        columns are "Image Index", "Finding Labels" and "Patient ID";
        "View Position" and "Split" are read when present, any other
        column is ignored.
    label_set
        The 14 disease labels; finding tokens are matched by name.

    Rows are numbered from 1 (the first data row) in error messages.
    """
    check_label_set(label_set)
    name_to_index = {lbl.name: lbl.index for lbl in label_set}

    stream = io.StringIO(csv_text) if isinstance(csv_text, str) else csv_text
    try:
        df = pd.read_csv(stream, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise ManifestError("Manifest is empty; a header row is required") from None

    required = (constants.COL_IMAGE, constants.COL_LABELS, constants.COL_PATIENT)
    missing = [col for col in required if col not in df.columns]
    if missing:
        raise ManifestError("Missing required column(s)", token=", ".join(missing))

    has_view = constants.COL_VIEW in df.columns
    has_split = constants.COL_SPLIT in df.columns

    records: list[StudyRecord] = []
    seen: set[str] = set()
    for row, entry in enumerate(df.itertuples(index=False), start=1):
        values = dict(zip(df.columns, entry))
        image_id = values[constants.COL_IMAGE].strip()
        if not image_id:
            raise ManifestError("Empty image id", row=row)
        if image_id in seen:
            raise ManifestError("Duplicate image_id", row=row, token=image_id)
        seen.add(image_id)

        split = Split.UNASSIGNED
        if has_split and values[constants.COL_SPLIT].strip():
            try:
                split = Split(values[constants.COL_SPLIT].strip())
            except ValueError:
                raise ManifestError(
                    "Unknown split", row=row, token=values[constants.COL_SPLIT]
                ) from None

        records.append(
            StudyRecord(
                image_id=image_id,
                patient_id=values[constants.COL_PATIENT].strip(),
                labels=_encode_labels(values[constants.COL_LABELS], row, name_to_index),
                view=values[constants.COL_VIEW].strip() if has_view else "",
                split=split,
            )
        )

    manifest = DatasetManifest(tuple(records))
    logger.info("Parsed manifest with %d records", len(manifest))
    return manifest


def serialize_manifest(manifest: DatasetManifest) -> str:
    """Write a manifest back to CSV text that ``parse_manifest`` reads."""
    df = pd.DataFrame(
        {
            constants.COL_IMAGE: [r.image_id for r in manifest.records],
            constants.COL_LABELS: [
                "|".join(r.findings) if any(r.labels) else NO_FINDING
                for r in manifest.records
            ],
            constants.COL_PATIENT: [r.patient_id for r in manifest.records],
            constants.COL_VIEW: [r.view for r in manifest.records],
            constants.COL_SPLIT: [r.split.value for r in manifest.records],
        }
    )
    return df.to_csv(index=False, lineterminator="\n")


def read_id_list(text: str) -> tuple[str, ...]:
    """Parse a split file: one image filename per line, '#' starts a comment line.

    >>> read_id_list("# run 1\\na.png\\nb.png\\n\\n")
    ('a.png', 'b.png')
    """
    lines = (line.strip() for line in text.splitlines())
    ids = tuple(line for line in lines if line and not line.startswith("#"))
    dups = [k for k, v in Counter(ids).items() if v > 1]
    if dups:
        raise SplitError("Duplicate ids in split list", tuple(dups))
    return ids


def write_id_list(ids: Iterable[str], header: str | None = None) -> str:
    body = "".join(f"{i}\n" for i in ids)
    return f"{header}\n{body}" if header else body


def assign_splits(
    manifest: DatasetManifest,
    train_val_ids: Sequence[str],
    test_ids: Sequence[str],
    val_fraction: float = 0.1,
    seed: int = constants.DEFAULT_SEED,
) -> DatasetManifest:
    """Mark every record as train, val, test or unassigned.

    The train_val list is partitioned by patient so that no patient
    straddles train and val; val receives round(val_fraction * n_patients)
    patients (at least one when val_fraction > 0, and never all of them
    when there is more than one patient).
    """
    if not 0.0 <= val_fraction < 1.0:
        raise SplitError(f"val_fraction must be in [0, 1), got {val_fraction}")

    train_val = set(train_val_ids)
    test = set(test_ids)

    overlap = sorted(train_val & test)
    if overlap:
        raise SplitError("Ids present in both train_val and test lists", tuple(overlap))

    unknown = sorted((train_val | test) - set(manifest.image_ids))
    if unknown:
        raise SplitError("Ids not present in the manifest", tuple(unknown))

    patients = sorted({manifest[i].patient_id for i in train_val})
    n_val = int(round(val_fraction * len(patients)))
    if val_fraction > 0 and patients:
        n_val = max(n_val, 1)
    if len(patients) > 1:
        n_val = min(n_val, len(patients) - 1)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    val_patients = {patients[ndx] for ndx in order[:n_val]}

    records: list[StudyRecord] = []
    for rec in manifest.records:
        if rec.image_id in test:
            split = Split.TEST
        elif rec.image_id in train_val:
            split = Split.VAL if rec.patient_id in val_patients else Split.TRAIN
        else:
            split = Split.UNASSIGNED
        records.append(replace(rec, split=split))

    out = DatasetManifest(tuple(records))
    logger.info("Split sizes: %s (%d val patients)", out.split_sizes(), n_val)
    return out
