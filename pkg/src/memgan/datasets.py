"""Synthetic multi-modal data and IDX (MNIST-style) file ingestion."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagicError, DimensionMismatchError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SHAPE_CLASSES = ("disk", "cross", "frame", "bar")


@dataclass
class Dataset:
    samples: np.ndarray  # (B, D)
    labels: Optional[np.ndarray] = None  # (B,)
    mode_centers: Optional[np.ndarray] = None  # (n_modes, D)
    std: Optional[float] = None
    side: Optional[int] = None  # image side length, for image data

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.samples):
            raise DimensionMismatchError(
                f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.mode_centers is not None and self.labels is not None and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= len(self.mode_centers):
                raise ValueError("label outside the range of mode centers")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def ring_centers(n_modes: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gaussian_ring(n_modes: int = 8, radius: float = 2.0, std: float = 0.05, n: int = 8000,
                  seed: int = 0) -> Dataset:
    """Isotropic Gaussians placed evenly on a circle; modes picked uniformly."""
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    if std < 0:
        raise ValueError("std must be non-negative")
    rng = np.random.default_rng(seed)
    centers = ring_centers(n_modes, radius)
    labels = rng.integers(0, n_modes, size=n)
    samples = centers[labels] + std * rng.standard_normal((n, 2))
    return Dataset(samples, labels, centers, std=std)


def _shape_mask(name: str, u: np.ndarray, v: np.ndarray, side: int) -> np.ndarray:
    # u, v: pixel-centre coordinates relative to the image centre, in pixels
    r = side / 2.0
    if name == "disk":
        return u * u + v * v <= (0.55 * r) ** 2
    if name == "cross":
        arm, half = 0.7 * r, max(0.5, 0.18 * side)
        return ((np.abs(u) <= half) & (np.abs(v) <= arm)) | ((np.abs(v) <= half) & (np.abs(u) <= arm))
    if name == "frame":
        outer, inner = 0.75 * r, 0.75 * r - max(1.0, 0.15 * side)
        inside = (np.abs(u) <= outer) & (np.abs(v) <= outer)
        hole = (np.abs(u) < inner) & (np.abs(v) < inner)
        return inside & ~hole
    if name == "bar":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= max(0.5, 0.15 * side))
    raise ValueError(f"unknown shape {name!r}")


def render_shape(name: str, side: int, shift=(0.0, 0.0), angle_deg: float = 0.0) -> np.ndarray:
    """Binary side x side image of one shape, rotated then translated."""
    c = (side - 1) / 2.0
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    x = cols - c - shift[0]
    y = rows - c - shift[1]
    theta = np.deg2rad(angle_deg)
    # inverse rotation maps pixel coordinates back into the shape frame
    u = np.cos(theta) * x + np.sin(theta) * y
    v = -np.sin(theta) * x + np.cos(theta) * y
    return _shape_mask(name, u, v, side).astype(np.float64)


def synthetic_shapes(side: int = 12, n_per_class: int = 500, seed: int = 0, max_shift: int = 2,
                     max_rotation: float = 20.0) -> Dataset:
    """Disk / cross / frame / bar images with integer jitter and small rotations.

    Offsets are uniform integers in [-max_shift, max_shift]; angles are uniform
    in [-max_rotation, max_rotation] degrees. Pixels are flattened to [0, 1].
    """
    if side < 8:
        raise ValueError("side must be >= 8")
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, name in enumerate(SHAPE_CLASSES):
        for _ in range(n_per_class):
            shift = rng.integers(-max_shift, max_shift + 1, size=2) if max_shift else (0, 0)
            angle = rng.uniform(-max_rotation, max_rotation) if max_rotation else 0.0
            images.append(render_shape(name, side, shift, angle).ravel())
            labels.append(label)
    order = rng.permutation(len(images))
    return Dataset(np.array(images)[order], np.array(labels)[order], side=side)


def _open(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, expected_magic: int):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: missing IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise TruncatedFileError(f"{path}: expected {count} bytes of data, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None) -> Dataset:
    """Read an IDX3 image file (and optionally its IDX1 labels), scaling pixels to [0, 1].

    Gzipped files are detected by their magic bytes.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    n = images.shape[0]
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != n:
            raise DimensionMismatchError(f"{n} images but {labels.shape[0]} labels")
    side = images.shape[1] if images.shape[1] == images.shape[2] else None
    return Dataset(images.reshape(n, -1).astype(np.float64) / 255.0, labels, side=side)


def write_idx(dataset: Dataset, images_path, labels_path=None, shape=None) -> None:
    """Write samples (values in [0, 1]) as IDX3 unsigned bytes, rounding to the nearest level."""
    n = len(dataset)
    if shape is None:
        side = dataset.side or int(round(np.sqrt(dataset.dim)))
        shape = (side, side)
    if shape[0] * shape[1] != dataset.dim:
        raise DimensionMismatchError(f"shape {shape} does not hold {dataset.dim} values")
    pixels = np.clip(np.rint(dataset.samples * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, *shape))
        fh.write(pixels.tobytes())
    if labels_path is not None and dataset.labels is not None:
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
            fh.write(np.asarray(dataset.labels, dtype=np.uint8).tobytes())


def export_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        cols = [f"x{i}" for i in range(dataset.dim)]
        writer.writerow(cols + (["label"] if dataset.labels is not None else []))
        for i, row in enumerate(dataset.samples):
            values = [repr(float(x)) for x in row]
            if dataset.labels is not None:
                values.append(int(dataset.labels[i]))
            writer.writerow(values)
