"""Concept image sets, negative pools and dataset handling.

All generators are pure functions of their arguments and ``seed``; every
pixel they emit lies in [0, 1]. Images are float64 H x W x 3 arrays.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .diffmodel import ImageSample

COLOR_REFERENCES = {
    "red": (0.85, 0.10, 0.10),
    "brown": (0.55, 0.27, 0.07),
    "blue": (0.10, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "green": (0.15, 0.65, 0.15),
}

TEXTURE_KINDS = ("blotchy", "bumpy", "cracked", "fibrous", "pitted", "wrinkled")

PROVENANCES = ("synthetic_color", "synthetic_texture", "directory")

# leaf rendering palette
LEAF_GREEN = (0.20, 0.55, 0.18)
LESION_BROWN = (0.32, 0.17, 0.06)
HALO_YELLOW = (0.85, 0.80, 0.15)


class DatasetError(ValueError):
    pass


@dataclass
class ConceptSet:
    concept_name: str
    images: list
    provenance: str
    masks: Optional[list] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.concept_name:
            raise ValueError("concept_name must be non-empty")
        if not self.images:
            raise ValueError(f"concept set {self.concept_name!r} is empty")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise ValueError(f"concept set {self.concept_name!r} mixes image shapes {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class NegativePool:
    images: list
    exclusion_tags: frozenset = frozenset()

    def __post_init__(self) -> None:
        if not self.images:
            raise ValueError("negative pool is empty")
        self.exclusion_tags = frozenset(self.exclusion_tags)

    def __len__(self) -> int:
        return len(self.images)


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self) -> None:
        for name in ("train", "val", "test"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} ratio {v} not in (0, 1)")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")

    def as_tuple(self) -> tuple:
        return (self.train, self.val, self.test)


@dataclass
class ImageDataset:
    """Samples plus the class names their labels index into."""

    samples: list
    class_names: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])


def _check_count_size(count: int, size: Sequence[int]) -> tuple[int, int]:
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    h, w = (int(size[0]), int(size[1]))
    if h < 1 or w < 1:
        raise ValueError(f"image size must have positive area, got {tuple(size)}")
    return h, w


def _sample(pixels: np.ndarray, label: Optional[int] = None) -> ImageSample:
    return ImageSample(np.clip(pixels, 0.0, 1.0), label)


# --------------------------------------------------------------------------
# colors


def color_image(rng: np.random.Generator, color: str, h: int, w: int) -> np.ndarray:
    ref = np.array(COLOR_REFERENCES[color])
    base = np.clip(ref + rng.uniform(-0.1, 0.1, 3), 0.0, 1.0)
    return np.clip(base + rng.normal(0.0, 0.05, (h, w, 3)), 0.0, 1.0)


def generate_color_concept(color: str, count: int, size=(32, 32), seed: int = 0) -> ConceptSet:
    if color not in COLOR_REFERENCES:
        raise ValueError(f"unknown color {color!r}; choose from {sorted(COLOR_REFERENCES)}")
    h, w = _check_count_size(count, size)
    rng = np.random.default_rng(seed)
    images = [_sample(color_image(rng, color, h, w)) for _ in range(count)]
    return ConceptSet(color, images, "synthetic_color")


def nearest_color(rgb: Sequence[float]) -> str:
    rgb = np.asarray(rgb, dtype=float)
    return min(COLOR_REFERENCES, key=lambda c: float(np.sum((rgb - np.array(COLOR_REFERENCES[c])) ** 2)))


# --------------------------------------------------------------------------
# textures
#
# Each recipe paints onto a light-gray base and returns a single-channel
# luminance map; noise is added by the caller.


def _grid(h: int, w: int):
    return np.mgrid[0:h, 0:w].astype(float)


def _stroke(canvas: np.ndarray, p0, p1, width: float, value: float) -> None:
    """Paint a straight segment of the given width (in pixels)."""
    h, w = canvas.shape
    length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
    steps = max(2, int(length * 3))
    t = np.linspace(0.0, 1.0, steps)
    ys = p0[0] + (p1[0] - p0[0]) * t
    xs = p0[1] + (p1[1] - p0[1]) * t
    r = width / 2.0
    for y, x in zip(ys, xs):
        y0, y1 = int(math.floor(y - r + 0.5)), int(math.floor(y + r - 0.5)) + 1
        x0, x1 = int(math.floor(x - r + 0.5)), int(math.floor(x + r - 0.5)) + 1
        y1, x1 = max(y1, y0 + 1), max(x1, x0 + 1)
        if y1 <= 0 or x1 <= 0 or y0 >= h or x0 >= w:
            continue
        canvas[max(y0, 0) : min(y1, h), max(x0, 0) : min(x1, w)] = value


def _blotchy(rng, h, w):
    yy, xx = _grid(h, w)
    img = np.full((h, w), 0.78)
    for _ in range(rng.integers(5, 16)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.08, 0.25) * h, rng.uniform(0.08, 0.25) * w
        theta = rng.uniform(0, math.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * math.cos(theta) + dy * math.sin(theta)) / rx
        v = (-dx * math.sin(theta) + dy * math.cos(theta)) / ry
        d2 = u * u + v * v
        blot = np.exp(-2.0 * d2)
        img += rng.uniform(-0.45, -0.15) * blot
    return img


def _bumpy(rng, h, w):
    yy, xx = _grid(h, w)
    img = np.full((h, w), 0.7)
    spacing = rng.uniform(0.15, 0.25) * min(h, w)
    radius = spacing * rng.uniform(0.35, 0.5)
    offset = rng.uniform(0, spacing, 2)
    for cy in np.arange(offset[0] - spacing, h + spacing, spacing):
        for cx in np.arange(offset[1] - spacing, w + spacing, spacing):
            jy, jx = rng.normal(0, spacing * 0.1, 2)
            d = np.sqrt((yy - cy - jy) ** 2 + (xx - cx - jx) ** 2) / radius
            # lit from the top-left: bright cap, shaded rim
            shade = 0.25 * np.clip(1.0 - d, 0.0, 1.0) - 0.12 * np.exp(-((d - 1.0) ** 2) * 8.0)
            img += shade
    return img


def _cracked(rng, h, w):
    img = np.full((h, w), 0.8)
    scale = min(h, w)
    for _ in range(rng.integers(3, 11)):
        p = np.array([rng.uniform(0, h), rng.uniform(0, w)])
        angle = rng.uniform(0, 2 * math.pi)
        width = float(rng.integers(1, 3))
        for _ in range(rng.integers(2, 4)):
            angle += rng.normal(0, 0.6)
            step = rng.uniform(0.08, 0.16) * scale
            q = p + step * np.array([math.sin(angle), math.cos(angle)])
            _stroke(img, p, q, width, rng.uniform(0.05, 0.2))
            p = q
    return img


def _fibrous(rng, h, w):
    img = np.full((h, w), 0.75)
    base_angle = rng.uniform(0, math.pi)
    scale = min(h, w)
    n = int(rng.integers(25, 45) * (h * w) / 1024.0) + 1
    for _ in range(n):
        p = np.array([rng.uniform(0, h), rng.uniform(0, w)])
        angle = base_angle + rng.normal(0, 0.15)
        length = rng.uniform(0.1, 0.25) * scale
        q = p + length * np.array([math.sin(angle), math.cos(angle)])
        _stroke(img, p, q, 1.0, img[int(p[0]) % h, int(p[1]) % w] + rng.choice([-0.25, 0.15]))
    return img


def _pitted(rng, h, w):
    yy, xx = _grid(h, w)
    img = np.full((h, w), 0.78)
    n = rng.poisson(12.0 * h * w / 1024.0)
    for _ in range(max(n, 1)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(1.0, 2.0)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = rng.uniform(0.1, 0.3)
    return img


def _wrinkled(rng, h, w):
    yy, xx = _grid(h, w)
    img = np.full((h, w), 0.6)
    for _ in range(rng.integers(2, 4)):
        theta = rng.uniform(0, math.pi)
        freq = rng.uniform(2.0, 5.0) / min(h, w)
        phase = rng.uniform(0, 2 * math.pi)
        warp = rng.uniform(0.5, 2.0) * np.sin(yy / h * 2 * math.pi * rng.uniform(0.5, 1.5))
        u = xx * math.cos(theta) + yy * math.sin(theta) + warp
        img += 0.12 * np.sin(2 * math.pi * freq * u + phase)
    return img


_TEXTURE_RECIPES = {
    "blotchy": _blotchy,
    "bumpy": _bumpy,
    "cracked": _cracked,
    "fibrous": _fibrous,
    "pitted": _pitted,
    "wrinkled": _wrinkled,
}


def texture_image(rng: np.random.Generator, kind: str, h: int, w: int) -> np.ndarray:
    lum = _TEXTURE_RECIPES[kind](rng, h, w)
    lum = lum + rng.normal(0.0, 0.02, (h, w))
    return np.clip(np.repeat(lum[:, :, None], 3, axis=2), 0.0, 1.0)


def generate_texture_concept(kind: str, count: int, size=(32, 32), seed: int = 0) -> ConceptSet:
    if kind not in _TEXTURE_RECIPES:
        raise ValueError(f"unknown texture {kind!r}; choose from {list(TEXTURE_KINDS)}")
    h, w = _check_count_size(count, size)
    rng = np.random.default_rng(seed)
    images = [_sample(texture_image(rng, kind, h, w)) for _ in range(count)]
    return ConceptSet(kind, images, "synthetic_texture")


# --------------------------------------------------------------------------
# leaves and lesions


def leaf_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Healthy leaf stand-in: green field with a few lighter veins."""
    base = np.array(LEAF_GREEN) + rng.uniform(-0.05, 0.05, 3)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    yy, xx = _grid(h, w)
    theta = rng.uniform(0, math.pi)
    u = xx * math.cos(theta) + yy * math.sin(theta)
    veins = np.cos(2 * math.pi * u / rng.uniform(6.0, 10.0) * (32.0 / min(h, w)) + rng.uniform(0, 6.3))
    img += 0.05 * np.clip(veins, 0.0, None)[:, :, None] * np.array([0.6, 1.0, 0.4])
    img += rng.normal(0.0, 0.03, (h, w, 3))
    return np.clip(img, 0.0, 1.0)


def lesion_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """1-4 blobs grown by random walks, returned as a boolean mask."""
    mask = np.zeros((h, w), dtype=bool)
    scale = h * w / 1024.0
    for _ in range(rng.integers(1, 5)):
        y, x = rng.integers(3, max(h - 3, 4)), rng.integers(3, max(w - 3, 4))
        for _ in range(int(rng.integers(25, 60) * scale)):
            mask[y, x] = True
            dy, dx = rng.integers(-1, 2, 2)
            y = int(np.clip(y + dy, 1, h - 2))
            x = int(np.clip(x + dx, 1, w - 2))
    return ndimage.binary_closing(mask, iterations=1) | mask


def add_lesions(rng: np.random.Generator, img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Paint dark-brown lesions with 2-pixel yellow rims onto ``img``."""
    h, w, _ = img.shape
    mask = lesion_mask(rng, h, w)
    rim = ndimage.binary_dilation(mask, iterations=2) & ~mask
    out = img.copy()
    brown = np.array(LESION_BROWN) + rng.uniform(-0.04, 0.04, 3)
    out[mask] = brown + rng.normal(0.0, 0.03, (int(mask.sum()), 3))
    out[rim] = np.array(HALO_YELLOW) + rng.normal(0.0, 0.03, (int(rim.sum()), 3))
    return np.clip(out, 0.0, 1.0), mask


def disease_pattern_image(rng: np.random.Generator, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return add_lesions(rng, leaf_image(rng, h, w))


def generate_disease_pattern_concept(
    count: int, size=(32, 32), seed: int = 0, name: str = "late_blight"
) -> ConceptSet:
    """Green leaves carrying lesions; ``masks`` holds each lesion mask."""
    h, w = _check_count_size(count, size)
    rng = np.random.default_rng(seed)
    images, masks = [], []
    for _ in range(count):
        px, mask = disease_pattern_image(rng, h, w)
        images.append(_sample(px))
        masks.append(mask)
    return ConceptSet(name, images, "synthetic_texture", masks=masks)


LEAF_CLASSES = ("healthy", "late_blight")


def generate_leaf_dataset(count_per_class: int, size=(32, 32), seed: int = 0) -> ImageDataset:
    """Two-class labeled set: plain leaves (0) and leaves with lesions (1)."""
    h, w = _check_count_size(count_per_class, size)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(count_per_class):
        samples.append(_sample(leaf_image(rng, h, w), 0))
    for _ in range(count_per_class):
        px, _ = disease_pattern_image(rng, h, w)
        samples.append(_sample(px, 1))
    return ImageDataset(samples, list(LEAF_CLASSES))


def to_grayscale(img: ImageSample) -> ImageSample:
    lum = img.pixels @ np.array([0.299, 0.587, 0.114])
    return ImageSample(np.clip(np.repeat(lum[:, :, None], 3, axis=2), 0.0, 1.0), img.label)


def grayscale_leaf_pool(count: int, size=(32, 32), seed: int = 0, tags: Iterable[str] = ()) -> NegativePool:
    """Grayscale leaves, half of them diseased; carries no color concept."""
    h, w = _check_count_size(count, size)
    rng = np.random.default_rng(seed)
    images = []
    for i in range(count):
        px = disease_pattern_image(rng, h, w)[0] if i % 2 else leaf_image(rng, h, w)
        images.append(to_grayscale(_sample(px)))
    return NegativePool(images, frozenset(tags) | frozenset(COLOR_REFERENCES))


def healthy_leaf_pool(count: int, size=(32, 32), seed: int = 0, tags: Iterable[str] = ()) -> NegativePool:
    """Plain leaves; carries no texture or lesion concept."""
    h, w = _check_count_size(count, size)
    rng = np.random.default_rng(seed)
    images = [_sample(leaf_image(rng, h, w)) for _ in range(count)]
    return NegativePool(images, frozenset(tags) | frozenset(TEXTURE_KINDS) | {"late_blight"})


# --------------------------------------------------------------------------
# sampling and splitting


def sample_negative_set(pool: NegativePool, count: int, seed: int, exclude: str) -> list:
    if exclude not in pool.exclusion_tags:
        raise ValueError(f"negative pool does not guarantee absence of concept {exclude!r}")
    if not 1 <= count <= len(pool):
        raise ValueError(f"cannot draw {count} images from a pool of {len(pool)}")
    idx = np.random.default_rng(seed).permutation(len(pool))[:count]
    return [pool.images[i] for i in idx]


def allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n items; ties go to the earlier part."""
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    rest = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def split_dataset(dataset, ratios: SplitRatios = SplitRatios(), seed: int = 0):
    """Stratified (train, val, test) split; each part keeps input order."""
    samples = list(dataset)
    if len(samples) < 10:
        raise DatasetError(f"dataset of {len(samples)} samples is too small to split (need at least 10)")
    labels = [s.label for s in samples]
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    for label in sorted(set(labels), key=lambda v: (v is None, v)):
        members = [i for i, l in enumerate(labels) if l == label]
        shuffled = [members[j] for j in rng.permutation(len(members))]
        counts = allocate(len(members), ratios.as_tuple())
        start = 0
        for part, c in zip(parts, counts):
            part.extend(shuffled[start : start + c])
            start += c
    if any(not p for p in parts):
        raise DatasetError(f"split of {len(samples)} samples leaves a part empty")
    out = tuple([samples[i] for i in sorted(p)] for p in parts)
    if isinstance(dataset, ImageDataset):
        return tuple(ImageDataset(p, list(dataset.class_names)) for p in out)
    return out


# --------------------------------------------------------------------------
# directories

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


def read_image(path) -> ImageSample:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return ImageSample(arr)


def write_image(path, img: ImageSample) -> None:
    arr = np.round(img.pixels * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_image_directory(path, labeled: bool = True) -> ImageDataset:
    """Read a directory of images; labeled mode expects one subdirectory per class."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"image directory {root} does not exist")
    samples = []
    if not labeled:
        files = _image_files(root)
        if not files:
            raise DatasetError(f"no images in {root}")
        return ImageDataset([read_image(f) for f in files], [])
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DatasetError(f"no class subdirectories in {root}")
    for label, name in enumerate(classes):
        files = _image_files(root / name)
        if not files:
            raise DatasetError(f"class directory {root / name} is empty")
        for f in files:
            samples.append(ImageSample(read_image(f).pixels, label))
    shapes = {s.shape for s in samples}
    if len(shapes) > 1:
        raise DatasetError(f"images in {root} have mixed shapes {sorted(shapes)}")
    return ImageDataset(samples, classes)


def export_images(images: Sequence[ImageSample], directory) -> list[Path]:
    """Write ``NNNN.png`` files into ``directory`` (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = directory / f"{i:04d}.png"
        tmp = p.with_name(p.name + ".tmp")
        write_image(tmp, img)
        os.replace(tmp, p)
        paths.append(p)
    return paths


def export_concept_set(cs: ConceptSet, root) -> Path:
    out = Path(root) / cs.concept_name
    export_images(cs.images, out)
    return out
