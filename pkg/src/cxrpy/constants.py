"""
    cxrpy.constants
    ~~~~~~~~~~~~~~~

    Enumerations and numeric constants shared across the toolkit.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import enum

#: Canonical finding names, in label-vector order.
DISEASE_NAMES: tuple[str, ...] = (
    "Atelectasis",
    "Consolidation",
    "Infiltration",
    "Pneumothorax",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Effusion",
    "Pneumonia",
    "Pleural_Thickening",
    "Cardiomegaly",
    "Nodule",
    "Mass",
    "Hernia",
)

NUM_CLASSES = len(DISEASE_NAMES)

#: Label field value of negative studies in the NIH manifest.
NO_FINDING = "No Finding"

#: Input resolution of the ViT-B/32 visual tower (height, width).
TARGET_SIZE = (224, 224)

#: Per-channel statistics of the CLIP pretraining pipeline (RGB).
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)

#: Default experiment seed.
DEFAULT_SEED = 7

#: Manifest columns that must be present.
COL_IMAGE = "Image Index"
COL_LABELS = "Finding Labels"
COL_PATIENT = "Patient ID"

#: Optional manifest columns.
COL_VIEW = "View Position"
COL_SPLIT = "Split"

#: Default file names under data_root.
MANIFEST_FILE = "Data_Entry_2017.csv"
TRAIN_VAL_FILE = "train_val_list.txt"
TEST_FILE = "test_list.txt"
IMAGES_DIR = "images"

#: Environment variable overriding RunConfig.data_root.
DATA_ROOT_ENV = "CXRPY_DATA_ROOT"

#: Smallest learning rate the plateau scheduler may reach.
MIN_LR = 1e-7


class Split(enum.Enum):
    """Dataset partition a study belongs to."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNASSIGNED = "unassigned"


class ScoreSource(enum.Enum):
    """Which inference path produced a score matrix."""

    ZERO_SHOT_PROMPTS = "zero_shot_prompts"
    HEAD_LOGITS = "head_logits"


class BackendKind(enum.Enum):
    """Encoder implementations."""

    REAL = "real"
    STUB = "stub"


class ExitCode(enum.IntEnum):
    """Process exit codes of the command line interface."""

    OK = 0
    CONFIG = 2  # configuration / validation error
    DATA = 3  # data, model or evaluation input error
    TRAINING = 4  # training aborted
