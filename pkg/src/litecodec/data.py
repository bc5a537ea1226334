"""Image ingestion, crops and procedurally generated desk-scale datasets.

Images are ``(H, W, 3)`` float32 arrays in [-1, 1]; datasets stack them into
``(N, H, W, 3)``.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

from .codec import pixels_from_uint8

log = logging.getLogger(__name__)

SYNTHETIC_KINDS = ("gaussian_blobs", "stripes", "checker_textures")
IMAGE_SUFFIXES = (".png", ".ppm")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray = None
    names: list = None

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self):
        return 0 if self.labels is None else int(self.labels.max()) + 1


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"          # "synthetic" or "folder"
    kind: str = "gaussian_blobs"       # synthetic kind, or "mixed"
    count: int = 64
    size: int = 32
    seed: int = 0
    path: str = None
    crop: str = "center"               # "center" or "random"


def read_image(path):
    """Load a PNG/PPM file as a [-1, 1] float image."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return pixels_from_uint8(arr).astype(np.float32)


def write_image(path, image):
    arr = np.clip(np.round((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def center_crop(image, size):
    h, w = image.shape[:2]
    if h < size or w < size:
        raise DataError(f"cannot crop {h}x{w} to {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[top:top + size, left:left + size]


def random_crop(image, size, rng):
    h, w = image.shape[:2]
    if h < size or w < size:
        raise DataError(f"cannot crop {h}x{w} to {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size]


def crop_stream(seed):
    # separate child stream so crops never share draws with parameter init
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])


def epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(dataset, batch_size, seed=0):
    """Endless ``(images, labels)`` batches, reshuffled every epoch."""
    n = len(dataset)
    if n == 0:
        raise DataError("empty dataset")
    epoch = 0
    while True:
        order = epoch_order(n, seed, epoch)
        size = min(batch_size, n)
        for start in range(0, n - size + 1, size):
            idx = order[start:start + size]
            labels = None if dataset.labels is None else dataset.labels[idx]
            yield dataset.images[idx], labels
        epoch += 1


def _blobs(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        sigma = rng.uniform(0.08, 0.25)
        color = rng.uniform(-1, 1, 3)
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))[..., None] * color
    return img


def _stripes(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(2, 6)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    c1, c2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    return 0.5 * (1 + wave)[..., None] * c1 + 0.5 * (1 - wave)[..., None] * c2


def _checker(rng, size):
    cells = int(rng.choice([2, 4, 8]))
    yy, xx = np.mgrid[0:size, 0:size] * cells // size
    board = ((yy + xx) % 2).astype(np.float64)
    c1, c2 = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    texture = rng.normal(0, 0.05, (size, size, 3))
    return board[..., None] * c1 + (1 - board)[..., None] * c2 + texture


_GENERATORS = {"gaussian_blobs": _blobs, "stripes": _stripes, "checker_textures": _checker}


def make_synthetic(kind, count, size, seed=0):
    """Procedural dataset; ``kind="mixed"`` cycles through all kinds with labels 0..2."""
    if size <= 0 or size % 16:
        raise DataError(f"synthetic size must be a positive multiple of 16, got {size}")
    kinds = SYNTHETIC_KINDS if kind == "mixed" else (kind,)
    if any(k not in _GENERATORS for k in kinds):
        raise DataError(f"unknown synthetic kind {kind!r}")
    rng = np.random.default_rng(seed)
    images = np.empty((count, size, size, 3), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = i % len(kinds)
        images[i] = np.clip(_GENERATORS[kinds[label]](rng, size), -1, 1)
        labels[i] = SYNTHETIC_KINDS.index(kinds[label])
    return Dataset(images, labels, [f"{SYNTHETIC_KINDS[l]}_{i:05d}" for i, l in enumerate(labels)])


def load_folder(path, size=None, crop="center", seed=0, multiple=16):
    rng = crop_stream(seed)
    images, names = [], []
    for name in sorted(os.listdir(path)):
        if not name.lower().endswith(IMAGE_SUFFIXES):
            continue
        try:
            img = read_image(os.path.join(path, name))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", name, exc)
            continue
        if size is not None:
            img = random_crop(img, size, rng) if crop == "random" else center_crop(img, size)
        else:
            h, w = img.shape[0] // multiple * multiple, img.shape[1] // multiple * multiple
            if h == 0 or w == 0:
                log.warning("skipping %s: smaller than %d pixels", name, multiple)
                continue
            img = img[:h, :w]
        images.append(img)
        names.append(name)
    if not images:
        raise DataError(f"no decodable PNG/PPM images in {path}")
    if len({im.shape for im in images}) > 1:
        raise DataError("folder images have differing sizes; pass a crop size")
    return Dataset(np.stack(images).astype(np.float32), None, names)


def load(spec: DatasetSpec):
    if spec.source == "folder":
        if not spec.path:
            raise DataError("folder source needs a path")
        return load_folder(spec.path, spec.size, spec.crop, spec.seed)
    if spec.source != "synthetic":
        raise DataError(f"unknown dataset source {spec.source!r}")
    ds = make_synthetic(spec.kind, spec.count, spec.size, spec.seed)
    if len(ds) == 0:
        raise DataError("empty dataset")
    return ds


def parse_dataset_arg(arg, size=None, seed=0):
    """``synthetic:<kind>:<count>:<size>[:<seed>]`` or a folder path."""
    if arg.startswith("synthetic:"):
        parts = arg.split(":")
        if len(parts) not in (4, 5):
            raise DataError(f"bad synthetic dataset spec {arg!r}")
        return DatasetSpec("synthetic", parts[1], int(parts[2]), int(parts[3]),
                           int(parts[4]) if len(parts) == 5 else seed)
    return DatasetSpec("folder", path=arg, size=size, seed=seed)
