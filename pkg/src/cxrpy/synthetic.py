"""
    cxrpy.synthetic
    ~~~~~~~~~~~~~~~

    Small synthetic dataset laid out like the NIH release, used by the
    test suite and for smoke runs without the real images.

    Each 128x128 grayscale image is a 4x4 grid of cells; cell c is
    bright when finding c is present, on top of seeded noise.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import logging
import pathlib

import numpy as np
import numpy.typing as npt
import pandas as pd
from PIL import Image

from . import constants
from .constants import DISEASE_NAMES, NO_FINDING, NUM_CLASSES
from .error import ConfigError
from .manifest import DatasetManifest, parse_manifest, write_id_list

logger = logging.getLogger(__name__)

IMAGE_SIZE = 128
GRID = 4
CELL = IMAGE_SIZE // GRID

BACKGROUND = 0.2
FOREGROUND = 0.85
NOISE = 0.05
EXTRA_POSITIVE_PROB = 0.1


def render_pattern(
    labels: npt.ArrayLike, rng: np.random.Generator
) -> npt.NDArray[np.uint8]:
    """8-bit image with the cells of the positive classes lit."""
    labels = np.asarray(labels)
    pixels = np.full((IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
    for c in np.flatnonzero(labels):
        row, col = divmod(int(c), GRID)
        pixels[row * CELL : (row + 1) * CELL, col * CELL : (col + 1) * CELL] = FOREGROUND
    pixels += rng.normal(0.0, NOISE, size=pixels.shape)
    return np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)


def _labels_for(ndx: int, guaranteed: bool, rng: np.random.Generator) -> np.ndarray:
    labels = (rng.random(NUM_CLASSES) < EXTRA_POSITIVE_PROB).astype(np.int64)
    if guaranteed:
        labels[ndx % NUM_CLASSES] = 1
    return labels


def make_fixture(
    root: str | pathlib.Path, n_images: int = 64, seed: int = constants.DEFAULT_SEED
) -> DatasetManifest:
    """Write a synthetic dataset under root and return its manifest.

    The last quarter of the images forms the test list, the rest the
    train_val list. Every patient owns two consecutive images. Each class
    is positive at least once in the test list and at least three times
    in train_val (for the default size).
    """
    if n_images < 32 or n_images % 8:
        raise ConfigError(("n_images must be a multiple of 8, at least 32",))

    root = pathlib.Path(root)
    images_dir = root / constants.IMAGES_DIR
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    n_test = n_images // 4
    n_train_val = n_images - n_test
    covered = (n_train_val // NUM_CLASSES) * NUM_CLASSES

    rows = []
    for ndx in range(n_images):
        patient = ndx // 2
        image_id = f"{patient:08d}_{ndx % 2:03d}.png"
        is_test = ndx >= n_train_val
        guaranteed = (ndx - n_train_val) < NUM_CLASSES if is_test else ndx < covered
        labels = _labels_for(ndx - n_train_val if is_test else ndx, guaranteed, rng)

        Image.fromarray(render_pattern(labels, rng)).save(images_dir / image_id)
        findings = [DISEASE_NAMES[c] for c in np.flatnonzero(labels)]
        rows.append(
            {
                constants.COL_IMAGE: image_id,
                constants.COL_LABELS: "|".join(findings) if findings else NO_FINDING,
                "Follow-up #": ndx % 2,
                constants.COL_PATIENT: str(patient + 1),
                constants.COL_VIEW: "PA" if ndx % 3 else "AP",
            }
        )

    df = pd.DataFrame(rows)
    df.to_csv(root / constants.MANIFEST_FILE, index=False, lineterminator="\n")
    ids = df[constants.COL_IMAGE].tolist()
    (root / constants.TRAIN_VAL_FILE).write_text(
        write_id_list(ids[:n_train_val]), encoding="utf-8"
    )
    (root / constants.TEST_FILE).write_text(write_id_list(ids[n_train_val:]), encoding="utf-8")

    logger.info("Synthetic fixture of %d images written to %s", n_images, root)
    return parse_manifest((root / constants.MANIFEST_FILE).read_text(encoding="utf-8"))
