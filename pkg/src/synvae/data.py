"""Dataset plumbing: IDX file IO, grayscale PNG IO, and a synthetic
stroke-rendered digit dataset for fully offline runs.

IDX files follow the classic big-endian layout (magic 0x0803 for image
tensors, 0x0801 for label vectors); gzipped files are read transparently.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

IDX_IMAGE_MAGIC = 0x0803
IDX_LABEL_MAGIC = 0x0801


@dataclass
class ImageExample:
    """One flat grayscale image with pixels in [0, 1] and a class label."""

    pixels: np.ndarray
    label: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32).reshape(-1)
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.label < 0:
            raise ValueError("label must be a nonnegative class id")


@dataclass
class Dataset:
    images: np.ndarray  # (N, P) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, P) with one label per row")

    def __len__(self):
        return len(self.images)

    def subset(self, indices) -> "Dataset":
        return Dataset(images=self.images[indices], labels=self.labels[indices])


def _open_maybe_gzip(path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx_images(path) -> np.ndarray:
    """IDX image tensor -> (N, rows*cols) float32 scaled to [0, 1]."""
    with _open_maybe_gzip(path) as fh:
        magic, count, rows, cols = struct.unpack(">IIII", fh.read(16))
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"bad IDX image magic 0x{magic:08x} in {path}")
        raw = np.frombuffer(fh.read(count * rows * cols), dtype=np.uint8)
    if raw.size != count * rows * cols:
        raise ValueError(f"truncated IDX image file: {path}")
    return (raw.reshape(count, rows * cols).astype(np.float32)) / 255.0


def load_idx_labels(path) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        magic, count = struct.unpack(">II", fh.read(8))
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"bad IDX label magic 0x{magic:08x} in {path}")
        raw = np.frombuffer(fh.read(count), dtype=np.uint8)
    if raw.size != count:
        raise ValueError(f"truncated IDX label file: {path}")
    return raw.astype(np.int64)


def save_idx_images(images: np.ndarray, path, rows: int = 28, cols: int = 28) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, len(images), rows, cols))
        fh.write(images.tobytes())


def save_idx_labels(labels: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_dataset(images_path, labels_path) -> Dataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ValueError(
            f"image count {len(images)} != label count {len(labels)}"
        )
    return Dataset(images=images, labels=labels)


def load_png_image(path, size: int = 28) -> np.ndarray:
    """8-bit grayscale PNG -> flat [0, 1] vector; center-cropped to square
    then rescaled by bilinear resampling."""
    img = Image.open(path).convert("L")
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side)).resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32).reshape(-1) / 255.0


def save_png_image(pixels: np.ndarray, path, size: int = 28) -> None:
    arr = np.clip(np.rint(np.asarray(pixels).reshape(size, size) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def mean_image_baseline(train_images: np.ndarray, test_images: np.ndarray) -> float:
    """Mean over test images of the summed squared error against the
    training-set mean image — the no-model reconstruction baseline."""
    mean_img = train_images.mean(axis=0)
    return float(((test_images - mean_img) ** 2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Synthetic digits: polyline skeletons per digit, drawn at 4x resolution with
# jittered control points and a random affine placement, then downsampled.
# Deterministic for a fixed seed; stands in for MNIST when no IDX files are
# available.
# ---------------------------------------------------------------------------

def _ring(cx, cy, rx, ry, n=20, start=0.0, end=2 * np.pi):
    angles = np.linspace(start, end, n)
    return [(cx + rx * np.sin(a), cy - ry * np.cos(a)) for a in angles]


_DIGIT_STROKES: dict[int, list[list[tuple[float, float]]]] = {
    0: [_ring(0.5, 0.5, 0.26, 0.36)],
    1: [[(0.34, 0.3), (0.54, 0.12), (0.54, 0.88)]],
    2: [
        _ring(0.5, 0.3, 0.24, 0.18, n=12, start=-0.5 * np.pi, end=0.62 * np.pi)
        + [(0.28, 0.85), (0.76, 0.85)]
    ],
    3: [
        _ring(0.48, 0.3, 0.22, 0.17, n=12, start=-0.6 * np.pi, end=0.75 * np.pi)
        + _ring(0.47, 0.67, 0.25, 0.2, n=12, start=-0.25 * np.pi, end=0.7 * np.pi)[1:]
    ],
    4: [[(0.6, 0.12), (0.26, 0.58), (0.8, 0.58)], [(0.62, 0.34), (0.62, 0.9)]],
    5: [
        [(0.72, 0.13), (0.32, 0.13), (0.3, 0.45)]
        + _ring(0.48, 0.65, 0.25, 0.21, n=12, start=-0.35 * np.pi, end=0.75 * np.pi)[1:]
    ],
    6: [
        [(0.66, 0.12), (0.42, 0.38), (0.33, 0.62)]
        + _ring(0.5, 0.68, 0.19, 0.19, n=16, start=np.pi * 1.02, end=np.pi * 3.0)[1:]
    ],
    7: [[(0.26, 0.14), (0.76, 0.14), (0.44, 0.88)]],
    8: [_ring(0.5, 0.3, 0.18, 0.17), _ring(0.5, 0.67, 0.22, 0.2)],
    9: [
        _ring(0.5, 0.32, 0.2, 0.2),
        [(0.7, 0.36), (0.66, 0.65), (0.58, 0.88)],
    ],
}


def synthetic_digits(count: int, seed: int = 0, size: int = 28) -> Dataset:
    """Deterministic MNIST-shaped digit dataset (stroke glyphs + jitter)."""
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(10), count // 10 + 1)[:count]
    rng.shuffle(labels)
    scale = 4
    canvas = size * scale
    images = np.empty((count, size * size), dtype=np.float32)
    for i, label in enumerate(labels):
        img = Image.new("L", (canvas, canvas), 0)
        draw = ImageDraw.Draw(img)
        theta = rng.normal(0.0, 0.1)
        sx = rng.uniform(0.8, 1.05)
        sy = rng.uniform(0.8, 1.05)
        shear = rng.normal(0.0, 0.08)
        dx = rng.uniform(-0.06, 0.06)
        dy = rng.uniform(-0.06, 0.06)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        width = int(rng.uniform(6.0, 10.0))
        for stroke in _DIGIT_STROKES[int(label)]:
            pts = []
            for (x, y) in stroke:
                x = x + rng.normal(0.0, 0.015) - 0.5
                y = y + rng.normal(0.0, 0.015) - 0.5
                x, y = sx * (x + shear * y), sy * y
                x, y = cos_t * x - sin_t * y, sin_t * x + cos_t * y
                pts.append(((x + 0.5 + dx) * canvas, (y + 0.5 + dy) * canvas))
            draw.line(pts, fill=255, width=width, joint="curve")
        small = img.resize((size, size), Image.BILINEAR)
        images[i] = np.asarray(small, dtype=np.float32).reshape(-1) / 255.0
    return Dataset(images=images, labels=labels.astype(np.int64))
