"""Synthetic shapes classification set: textured 64x64 backgrounds with one drawn shape."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

import settings
from checkpoint import write_manifest
from errors import ConfigError, UsageError
from seeding import stream
from tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

FORMAT = "smooth-saliency-dataset"
MIN_CONTRAST = 96


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple
    std: tuple

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(float(v) for v in data["mean"]), tuple(float(v) for v in data["std"]))

    @classmethod
    def of(cls, raw):
        """Per-channel statistics of raw N x C x H x W images in [0, 1]."""
        mean = raw.mean(axis=(0, 2, 3), dtype=np.float64)
        std = np.maximum(raw.std(axis=(0, 2, 3), dtype=np.float64), 1e-3)
        return cls(tuple(float(v) for v in mean), tuple(float(v) for v in std))

    def normalize(self, raw):
        mean = np.asarray(self.mean)[None, :, None, None]
        std = np.asarray(self.std)[None, :, None, None]
        return ((raw - mean) / std).astype(np.float32)

    def denormalize(self, images):
        mean = np.asarray(self.mean)[..., :, None, None]
        std = np.asarray(self.std)[..., :, None, None]
        return np.clip(np.asarray(images, dtype=np.float64) * std + mean, 0.0, 1.0)


@dataclass
class DatasetHandle:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple
    stats: NormalizationStats
    metadata: dict = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.labels = np.asarray(self.labels).astype(np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def classes(self):
        return len(self.class_names)

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetHandle(self.images[indices], self.labels[indices], self.class_names, self.stats,
                             self.metadata)

    def batches(self, batch_size, order=None):
        order = np.arange(len(self)) if order is None else order
        for start in range(0, len(order), batch_size):
            index = order[start:start + batch_size]
            yield self.images[index], self.labels[index]


def _background(rng, size):
    y, x = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(40, 215, size=3)
    freq = rng.uniform(1.0, 4.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 30.0 * np.sin(2 * np.pi * (freq[0] * x + freq[1] * y) + phase)
    noise = rng.normal(0.0, 8.0, size=(size, size, 3))
    return np.clip(base[None, None, :] + wave[:, :, None] + noise, 0, 255).astype(np.uint8), base


def _shape_color(rng, background):
    color = rng.integers(0, 256, size=3)
    if np.abs(color - background).mean() < MIN_CONTRAST:
        color = np.where(background > 127, rng.integers(0, 48, size=3), rng.integers(208, 256, size=3))
    return tuple(int(c) for c in color)


def draw_shape(draw, name, cx, cy, r, fill):
    if name == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif name == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=fill)
    elif name == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=fill)
    elif name == "cross":
        arm = max(r // 3, 1)
        draw.rectangle([cx - r, cy - arm, cx + r, cy + arm], fill=fill)
        draw.rectangle([cx - arm, cy - r, cx + arm, cy + r], fill=fill)
    else:
        raise UsageError(f"unknown shape {name!r}")


def render_image(rng, name, size):
    """One RGB image as C x H x W floats in [0, 1]."""
    pixels, base = _background(rng, size)
    image = Image.fromarray(pixels)
    r = int(rng.integers(size // 8, size // 4 + 1))
    cx = int(rng.integers(r, size - r))
    cy = int(rng.integers(r, size - r))
    draw_shape(ImageDraw.Draw(image), name, cx, cy, r, _shape_color(rng, base))
    return np.asarray(image, dtype=np.float64).transpose(2, 0, 1) / 255.0


def generate_shapes(classes=len(settings.SHAPE_CLASSES), count=1000, seed=settings.DEFAULT_SEED,
                    image_size=settings.IMAGE_SIZE, stats=None):
    if not 2 <= classes <= len(settings.SHAPE_CLASSES):
        raise ConfigError(f"classes must be between 2 and {len(settings.SHAPE_CLASSES)}, got {classes}")
    if count < 1:
        raise ConfigError(f"count must be positive, got {count}")
    names = settings.SHAPE_CLASSES[:classes]
    rng = stream(seed, "data")
    labels = rng.permutation(np.arange(count) % classes)
    raw = np.stack([render_image(rng, names[label], image_size) for label in labels])
    stats = stats or NormalizationStats.of(raw)
    logger.info("rendered %d shapes images (%d classes)", count, classes)
    return DatasetHandle(stats.normalize(raw), labels, names, stats,
                         {"seed": int(seed), "count": int(count), "image_size": int(image_size)})


def save_dataset(dataset, path):
    directory = Path(path)
    save_tensor(dataset.images.astype(np.float32), directory / "images.stns")
    save_tensor(dataset.labels.astype(np.float32), directory / "labels.stns")
    write_manifest(directory / "manifest.json", {
        "format": FORMAT,
        "classes": list(dataset.class_names),
        "normalization": dataset.stats.to_dict(),
        "files": {"images": "images.stns", "labels": "labels.stns"},
        "metadata": dataset.metadata or {},
    })
    return directory


def _read_manifest(directory):
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no dataset manifest in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ConfigError(f"{manifest_path} is not a dataset manifest")
    return manifest


def load_dataset(path):
    directory = Path(path)
    manifest = _read_manifest(directory)
    images = load_tensor(directory / manifest["files"]["images"]).data
    labels = load_tensor(directory / manifest["files"]["labels"]).data
    return DatasetHandle(np.asarray(images), labels, tuple(manifest["classes"]),
                         NormalizationStats.from_dict(manifest["normalization"]), manifest.get("metadata"))


def load_stats(path):
    return NormalizationStats.from_dict(_read_manifest(Path(path))["normalization"])
