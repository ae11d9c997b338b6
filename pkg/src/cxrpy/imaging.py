"""
    cxrpy.imaging
    ~~~~~~~~~~~~~

    Image loading, preprocessing to the encoder input format and
    training-time augmentation.

    The pixel pipeline is: load -> pixel tensor in [0, 1] -> resize to
    224x224 -> (augment) -> per-channel normalisation.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import logging
import pathlib
from dataclasses import dataclass
from typing import Callable, Mapping, TypeAlias

import numpy as np
import numpy.typing as npt
import torch
import torchvision.transforms.functional as TF
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode

from . import constants
from .common import INTERPOLATION_VALUES, make_generator
from .error import ConfigError, ImageError
from .manifest import DatasetManifest, StudyRecord

logger = logging.getLogger(__name__)

ImageSource: TypeAlias = Callable[[str], npt.NDArray[np.generic]]

INTERPOLATIONS: dict[INTERPOLATION_VALUES, InterpolationMode] = {
    "bicubic": InterpolationMode.BICUBIC,
    "bilinear": InterpolationMode.BILINEAR,
}


@dataclass(frozen=True)
class PreprocessSpec:
    target_size: tuple[int, int] = constants.TARGET_SIZE
    mean: tuple[float, float, float] = constants.CLIP_MEAN
    std: tuple[float, float, float] = constants.CLIP_STD
    interpolation: INTERPOLATION_VALUES = "bicubic"

    def __post_init__(self):
        problems = []
        if tuple(self.target_size) != constants.TARGET_SIZE:
            problems.append(f"target_size must be {constants.TARGET_SIZE}")
        if len(self.mean) != 3 or len(self.std) != 3:
            problems.append("mean and std need one value per RGB channel")
        if any(s <= 0 for s in self.std):
            problems.append("std values must be positive")
        if self.interpolation not in INTERPOLATIONS:
            problems.append(f"interpolation must be one of {sorted(INTERPOLATIONS)}")
        if problems:
            raise ConfigError(tuple(problems))


@dataclass(frozen=True)
class AugmentationSpec:
    """Training-time augmentation distributions.

    Rotation, translation and colour factors are drawn uniformly from
    the symmetric ranges ±rotation_deg, ±translate_frac (of the image
    size) and 1 ± brightness/contrast/saturation.
    """

    hflip_prob: float = 0.5
    rotation_deg: float = 10.0
    translate_frac: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        problems = []
        if not 0.0 <= self.hflip_prob <= 1.0:
            problems.append("hflip_prob must be in [0, 1]")
        if not 0.0 <= self.rotation_deg <= 180.0:
            problems.append("rotation_deg must be in [0, 180]")
        if not 0.0 <= self.translate_frac <= 1.0:
            problems.append("translate_frac must be in [0, 1]")
        low, high = self.scale_range
        if not 0.0 < low <= high:
            problems.append("scale_range must satisfy 0 < low <= high")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must be in [0, 1)")
        if problems:
            raise ConfigError(tuple(problems))

    @classmethod
    def identity(cls) -> AugmentationSpec:
        """Enabled spec whose every draw is the identity transform."""
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), 0.0, 0.0, 0.0, True)


def load_image(path: str | pathlib.Path) -> npt.NDArray[np.generic]:
    """Read a PNG (or any PIL readable file) as HxW or HxWx3 array."""
    try:
        with Image.open(path) as im:
            if im.mode == "RGB":
                return np.array(im, dtype=np.uint8)
            elif im.mode.startswith("I;16"):
                return np.array(im).astype(np.uint16)
            return np.array(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise ImageError(str(path), "file not found") from None
    except (UnidentifiedImageError, OSError) as ex:
        raise ImageError(str(path), str(ex)) from None


def to_pixel_tensor(image: npt.NDArray[np.generic] | torch.Tensor) -> torch.Tensor:
    """Convert a grayscale or RGB(A) array into a 3xHxW float tensor in [0, 1].

    Integer arrays are scaled by their dtype range, floating arrays are
    taken to be in [0, 1] already. Grayscale is replicated to 3 channels.
    """
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else image
    arr = np.asarray(arr)
    if arr.size == 0:
        raise ImageError("<array>", f"zero-sized image of shape {arr.shape}")

    if arr.dtype == np.uint8:
        data = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        data = arr.astype(np.float32) / 65535.0
    elif arr.dtype == np.bool_:
        data = arr.astype(np.float32)
    else:
        data = arr.astype(np.float32)

    if data.ndim == 2:
        data = np.repeat(data[None, :, :], 3, axis=0)
    elif data.ndim == 3 and data.shape[-1] in (3, 4):
        data = np.moveaxis(data[..., :3], -1, 0)
    elif data.ndim == 3 and data.shape[0] == 3:
        pass
    else:
        raise ImageError("<array>", f"unsupported image shape {arr.shape}")

    return torch.from_numpy(np.ascontiguousarray(data))


def resize_pixels(pixels: torch.Tensor, spec: PreprocessSpec) -> torch.Tensor:
    if tuple(pixels.shape[-2:]) == tuple(spec.target_size):
        return pixels
    out = TF.resize(
        pixels,
        list(spec.target_size),
        interpolation=INTERPOLATIONS[spec.interpolation],
        antialias=True,
    )
    return out.clamp_(0.0, 1.0)


def normalize(pixels: torch.Tensor, spec: PreprocessSpec) -> torch.Tensor:
    return TF.normalize(pixels, list(spec.mean), list(spec.std))


def preprocess(
    image: npt.NDArray[np.generic] | torch.Tensor, spec: PreprocessSpec = PreprocessSpec()
) -> torch.Tensor:
    """Normalised 3x224x224 encoder input from a grayscale or RGB image."""
    return normalize(resize_pixels(to_pixel_tensor(image), spec), spec)


def augment(
    image: torch.Tensor,
    spec: AugmentationSpec,
    rng_state: torch.Generator | int,
) -> torch.Tensor:
    """Random flip, affine and colour jitter of a 3xHxW pixel tensor in [0, 1].

    All random numbers are drawn from rng_state, so the output is fully
    determined by it. Operations whose drawn parameter is the identity
    are skipped, which makes identity specs bit-exact.
    """
    if not spec.enabled:
        return image

    rng = make_generator(rng_state) if isinstance(rng_state, int) else rng_state
    u = torch.rand(8, generator=rng, dtype=torch.float64).tolist()

    def symmetric(value: float, width: float) -> float:
        return (2.0 * value - 1.0) * width

    flip = u[0] < spec.hflip_prob
    angle = symmetric(u[1], spec.rotation_deg)
    height, width = image.shape[-2:]
    tx = round(symmetric(u[2], spec.translate_frac) * width)
    ty = round(symmetric(u[3], spec.translate_frac) * height)
    low, high = spec.scale_range
    scale = low + u[4] * (high - low)
    brightness = 1.0 + symmetric(u[5], spec.brightness)
    contrast = 1.0 + symmetric(u[6], spec.contrast)
    saturation = 1.0 + symmetric(u[7], spec.saturation)

    out = image
    if flip:
        out = TF.hflip(out)
    if angle != 0.0 or tx != 0 or ty != 0 or scale != 1.0:
        out = TF.affine(
            out,
            angle=angle,
            translate=[tx, ty],
            scale=scale,
            shear=[0.0, 0.0],
            interpolation=InterpolationMode.BILINEAR,
            fill=[0.0],
        )
    if brightness != 1.0:
        out = TF.adjust_brightness(out, brightness)
    if contrast != 1.0:
        out = TF.adjust_contrast(out, contrast)
    if saturation != 1.0:
        out = TF.adjust_saturation(out, saturation)
    return out


class FolderImageSource:
    """Images stored as data_root/images/<image_id>."""

    def __init__(self, data_root: str | pathlib.Path):
        self.images_dir = pathlib.Path(data_root) / constants.IMAGES_DIR

    def path(self, image_id: str) -> pathlib.Path:
        return self.images_dir / image_id

    def __call__(self, image_id: str) -> npt.NDArray[np.generic]:
        return load_image(self.path(image_id))


class ArrayImageSource:
    """In-memory images keyed by image_id."""

    def __init__(self, images: Mapping[str, npt.NDArray[np.generic]]):
        self.images = dict(images)

    def __call__(self, image_id: str) -> npt.NDArray[np.generic]:
        try:
            return self.images[image_id]
        except KeyError:
            raise ImageError(image_id, "not in the in-memory source") from None


class XrayDataset(Dataset[tuple[torch.Tensor, torch.Tensor]]):
    """Torch dataset over manifest records.

    Each sample's augmentation generator is derived from
    (seed, epoch, image_id); call ``set_epoch`` before every epoch so
    that draws change across epochs but never depend on worker count or
    iteration order.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        source: ImageSource,
        preprocess_spec: PreprocessSpec = PreprocessSpec(),
        augmentation: AugmentationSpec | None = None,
        seed: int = constants.DEFAULT_SEED,
    ):
        self.records: tuple[StudyRecord, ...] = manifest.records
        self.source = source
        self.preprocess_spec = preprocess_spec
        self.augmentation = augmentation
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, ndx: int) -> tuple[torch.Tensor, torch.Tensor]:
        rec = self.records[ndx]
        pixels = resize_pixels(
            to_pixel_tensor(self.source(rec.image_id)), self.preprocess_spec
        )
        if self.augmentation is not None and self.augmentation.enabled:
            rng = make_generator(self.seed, self.epoch, rec.image_id)
            pixels = augment(pixels, self.augmentation, rng)
        target = torch.tensor(rec.labels, dtype=torch.float32)
        return normalize(pixels, self.preprocess_spec), target

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(rec.image_id for rec in self.records)

    def label_matrix(self) -> npt.NDArray[np.int64]:
        return np.asarray([rec.labels for rec in self.records], dtype=np.int64).reshape(
            -1, constants.NUM_CLASSES
        )
