"""MNIST ingestion, digit splits, corruption operators, and stacking into 3-way arrays."""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import correlate

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_U8 = 0x08


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class ImageSet:
    """``images`` has shape ``(count, rows, cols)`` with values in [0, 1]."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise ValueError(f"images must be (count, rows, cols), got shape {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError("need exactly one label per image")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]


# --- IDX -------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as fh:
        return fh.read()


def parse_idx(buf: bytes) -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array of its declared dims."""
    if len(buf) < 4:
        raise IdxFormatError("truncated header", len(buf))
    zero, dtype, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or dtype != _U8 or ndim < 1:
        raise IdxFormatError(f"bad magic 0x{int.from_bytes(buf[:4], 'big'):08x}", 0)
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxFormatError("truncated dimension table", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = math.prod(dims)
    if len(buf) - head < count:
        raise IdxFormatError(f"truncated payload: expected {count} bytes, found {len(buf) - head}", len(buf))
    if len(buf) - head > count:
        raise IdxFormatError(f"dimension mismatch: {len(buf) - head - count} trailing bytes", head + count)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=head).reshape(dims)


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("only unsigned byte payloads are supported")
    path = Path(path)
    payload = struct.pack(">HBB", 0, _U8, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def load_idx(path, labels_path=None, split: str = "") -> ImageSet:
    """Image file (magic 0x803) plus an optional label file (magic 0x801); pixels scaled by 1/255."""
    raw = read_idx(path)
    if raw.ndim != 3:
        raise IdxFormatError(f"image file must declare 3 dims, found {raw.ndim}", 3)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise IdxFormatError(f"label file must declare 1 dim, found {labels.ndim}", 3)
        if len(labels) != len(raw):
            raise IdxFormatError(f"{len(labels)} labels for {len(raw)} images", 4)
    return ImageSet(raw.astype(np.float64) / 255.0, labels, split)


def load_csv(path, rows: int, cols: int, scale: float = 255.0, split: str = "") -> ImageSet:
    """One image per line, row-major pixels; values are divided by ``scale``."""
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    if arr.shape[1] != rows * cols:
        raise ValueError(f"expected {rows * cols} values per row, found {arr.shape[1]}")
    return ImageSet(arr.reshape(-1, rows, cols) / scale, None, split)


# --- splits ----------------------------------------------------------------

def filter_and_split(images: ImageSet, digit: int, n_train: int, n_valid: int, n_test: int, seed):
    """Disjoint random train/valid/test subsets of the images carrying ``digit``."""
    if images.labels is None:
        raise ValueError("labels are required to filter by digit")
    if not 0 <= digit <= 9:
        raise ValueError(f"digit must be in 0..9, got {digit}")
    if min(n_train, n_valid, n_test) < 0:
        raise ValueError("split sizes must be nonnegative")
    idx = np.flatnonzero(images.labels == digit)
    need = n_train + n_valid + n_test
    if need > len(idx):
        raise ValueError(f"digit {digit} has {len(idx)} images, {need} requested")
    pick = np.random.default_rng(seed).permutation(idx)[:need]
    bounds = np.cumsum([0, n_train, n_valid, n_test])
    out = []
    for name, lo, hi in zip(("train", "valid", "test"), bounds[:-1], bounds[1:]):
        sel = np.sort(pick[lo:hi])
        out.append(ImageSet(images.images[sel], images.labels[sel], name))
    return tuple(out)


# --- corruption ------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "noise"
    noise_sigma: float = 0.05
    blur_sigma: float = 1.0
    kernel_size: Optional[int] = None
    seed: int = 0
    clamp: bool = True

    def __post_init__(self):
        if self.kind not in ("noise", "blur"):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not (self.noise_sigma >= 0 and self.blur_sigma > 0):
            raise ValueError("noise sigma must be >= 0 and blur sigma > 0")
        if self.kernel_size is not None and (self.kernel_size < 1 or self.kernel_size % 2 == 0):
            raise ValueError("kernel size must be odd and positive")

    @property
    def size(self) -> int:
        if self.kernel_size is not None:
            return self.kernel_size
        return 2 * math.ceil(2 * self.blur_sigma) + 1


def noise_field(shape, sigma: float, seed) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, sigma, size=shape) if sigma > 0 else np.zeros(shape)


def add_noise(images: ImageSet, spec: CorruptionSpec) -> ImageSet:
    out = images.images + noise_field(images.images.shape, spec.noise_sigma, spec.seed)
    if spec.clamp:
        out = np.clip(out, 0.0, 1.0)
    return replace(images, images=out)


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError("kernel size must be odd and positive")
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def gaussian_blur(images: ImageSet, spec: CorruptionSpec) -> ImageSet:
    """Per-image filtering with replicated borders."""
    k = gaussian_kernel(spec.blur_sigma, spec.size)
    out = np.stack([correlate(img, k, mode="nearest") for img in images.images]) if len(images) else images.images
    return replace(images, images=np.clip(out, 0.0, 1.0))


def corrupt(images: ImageSet, spec: CorruptionSpec) -> ImageSet:
    return add_noise(images, spec) if spec.kind == "noise" else gaussian_blur(images, spec)


# --- synthetic data --------------------------------------------------------

def synthetic_streaks(count: int, size: int = 8, seed=0) -> ImageSet:
    """Dark ``size x size`` images with one or two bright horizontal or vertical streaks."""
    if count < 1 or size < 2:
        raise ValueError("need count >= 1 and size >= 2")
    rng = np.random.default_rng(seed)
    out = np.zeros((count, size, size))
    for img in out:
        for _ in range(rng.integers(1, 3)):
            k = rng.integers(size)
            level = 0.6 + 0.4 * rng.random()
            if rng.random() < 0.5:
                img[k, :] = np.maximum(img[k, :], level)
            else:
                img[:, k] = np.maximum(img[:, k], level)
    return ImageSet(out, None, "synthetic")


# --- stacking --------------------------------------------------------------

def stack(images: ImageSet) -> np.ndarray:
    """``(rows, cols, count)`` array whose frontal slice ``i`` is image ``i``."""
    if len(images) == 0:
        raise ValueError("cannot stack an empty set")
    return np.ascontiguousarray(np.moveaxis(images.images, 0, 2))


def unstack(t: np.ndarray, split: str = "") -> ImageSet:
    return ImageSet(np.clip(np.moveaxis(np.asarray(t), 2, 0), 0.0, 1.0), None, split)
