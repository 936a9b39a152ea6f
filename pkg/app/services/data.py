"""
data.py
Desk-scale datasets: 2-dim toy densities, AR(2) sequences and integer image patches.

Everything is regenerated bit-identically from (kind, seed). The first 10% of
records form the test split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.errors import ConfigurationError, ContractError, DataError, DataFormatError
from app.schemas.config import DatasetConfig
from app.schemas.manifests import DatasetManifest
from app.services.rng import make_rng
from app.services.tensor_io import read_tensor, write_bytes, write_tensor

logger = logging.getLogger(__name__)

TOY_KINDS = ("two_moons", "rings", "gaussian_grid")
TEST_FRACTION = 0.1
PIXEL_LEVELS = 256
MANIFEST_NAME = "dataset.json"


@dataclass(frozen=True)
class Dataset:
    kind: str
    train: np.ndarray
    test: np.ndarray
    seed: int
    integer_valued: bool = False
    levels: int = PIXEL_LEVELS
    labels: np.ndarray | None = None     # per-record component, generation order

    @property
    def record_shape(self) -> tuple[int, ...]:
        return self.train.shape[1:]

    @property
    def dims(self) -> int:
        return int(np.prod(self.record_shape))

    @property
    def size(self) -> int:
        return len(self.train) + len(self.test)


def split_records(records: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(train, test): the first 10% of records are the test set."""
    n_test = max(1, int(len(records) * TEST_FRACTION))
    return records[n_test:].copy(), records[:n_test].copy()


def _standardize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / x.std() if x.ndim == 1 else (x - x.mean(axis=0)) / x.std(axis=0)


# ── Toy densities ────────────────────────────────────────────────────────────
def gen_toy2d(kind: str, n: int, seed: int) -> Dataset:
    if kind not in TOY_KINDS:
        raise ConfigurationError(f"unknown toy density {kind!r}; expected one of {TOY_KINDS}")
    if n < 100:
        raise ContractError(f"toy datasets need n >= 100, got {n}")
    rng = make_rng(seed, "toy2d", kind)

    if kind == "two_moons":
        labels = rng.integers(0, 2, size=n)
        t = rng.uniform(0.0, np.pi, size=n)
        upper = np.stack([np.cos(t), np.sin(t)], axis=1)
        lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        x = np.where(labels[:, None] == 0, upper, lower) + rng.normal(0.0, 0.1, size=(n, 2))
    elif kind == "rings":
        labels = rng.integers(0, 2, size=n)
        angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
        radius = 1.0 + labels + rng.normal(0.0, 0.08, size=n)
        x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    else:
        labels = rng.integers(0, 9, size=n)
        centers = np.array([(i, j) for i in (-2.0, 0.0, 2.0) for j in (-2.0, 0.0, 2.0)])
        x = centers[labels] + rng.normal(0.0, 0.25, size=(n, 2))

    train, test = split_records(_standardize(x))
    logger.debug("generated %s | n=%d seed=%d", kind, n, seed)
    return Dataset(kind=kind, train=train, test=test, seed=seed, labels=labels)


# ── Sequences ────────────────────────────────────────────────────────────────
def gen_seq1d(
    n: int,
    length: int,
    seed: int,
    ar_coeffs: tuple[float, float] = (0.9, -0.2),
    burn_in: int = 64,
) -> Dataset:
    """Order-2 autoregressive Gaussian sequences, normalized to zero mean and unit variance."""
    if n < 1 or length < 1:
        raise ContractError("sequence datasets need n >= 1 and length >= 1")
    a1, a2 = ar_coeffs
    rng = make_rng(seed, "seq1d")
    noise = rng.standard_normal((n, length + burn_in))
    x = np.zeros_like(noise)
    for t in range(length + burn_in):
        x[:, t] = noise[:, t]
        if t >= 1:
            x[:, t] += a1 * x[:, t - 1]
        if t >= 2:
            x[:, t] += a2 * x[:, t - 2]
    x = x[:, burn_in:]
    x = (x - x.mean()) / x.std()
    train, test = split_records(x)
    return Dataset(kind="seq1d", train=train, test=test, seed=seed)


# ── Images ───────────────────────────────────────────────────────────────────
def _as_nchw(images: np.ndarray) -> np.ndarray:
    if images.ndim == 2:
        return images[None, None]
    if images.ndim == 3:
        return images[:, None]
    if images.ndim == 4:
        return images
    raise DataFormatError(f"image tensor must have rank 2-4, got shape {images.shape}")


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patch x patch tiles in (image, row, col) order."""
    n, c, h, w = images.shape
    rows, cols = h // patch, w // patch
    cropped = images[:, :, : rows * patch, : cols * patch]
    tiles = cropped.reshape(n, c, rows, patch, cols, patch).transpose(0, 2, 4, 1, 3, 5)
    return tiles.reshape(n * rows * cols, c, patch, patch)


def assemble_patches(patches: np.ndarray, image_shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of extract_patches for images whose sides are multiples of the patch size."""
    c, h, w = image_shape
    patch = patches.shape[-1]
    rows, cols = h // patch, w // patch
    n = len(patches) // (rows * cols)
    tiles = patches.reshape(n, rows, cols, c, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return tiles.reshape(n, c, rows * patch, cols * patch)


def load_image_patches(path: str | Path, patch: int = 8, channels: int | None = None) -> Dataset:
    images = _as_nchw(read_tensor(path))
    if channels is not None and images.shape[1] != channels:
        raise DataError(f"expected {channels} channels, file holds {images.shape[1]}")
    if (images != np.round(images)).any() or images.min() < 0 or images.max() >= PIXEL_LEVELS:
        raise DataError("image values must be integers in 0..255")
    if images.shape[2] < patch or images.shape[3] < patch:
        raise DataError(f"images of size {images.shape[2]}x{images.shape[3]} are smaller than one patch")
    patches = extract_patches(images, patch)
    train, test = split_records(patches)
    logger.info("✅ loaded %d patches of %dx%d from %s", len(patches), patch, patch, path)
    return Dataset(kind="image_patches", train=train, test=test, seed=0, integer_valued=True)


# ── Dispatch and persistence ─────────────────────────────────────────────────
def make_dataset(config: DatasetConfig) -> Dataset:
    if config.kind in TOY_KINDS:
        return gen_toy2d(config.kind, config.n, config.seed)
    if config.kind == "seq1d":
        return gen_seq1d(config.n, config.length, config.seed, config.ar_coeffs)
    if config.path is None:
        raise ConfigurationError("image_patches datasets need a source path")
    return load_image_patches(config.path, config.patch, config.channels)


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    manifest = DatasetManifest(
        kind=dataset.kind,
        seed=dataset.seed,
        integer_valued=dataset.integer_valued,
        train_size=len(dataset.train),
        test_size=len(dataset.test),
        record_shape=list(dataset.record_shape),
    )
    write_tensor(directory / manifest.train_file, dataset.train)
    write_tensor(directory / manifest.test_file, dataset.test)
    write_bytes(directory / MANIFEST_NAME, manifest.model_dump_json(indent=2).encode("utf-8"))
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    try:
        manifest = DatasetManifest.model_validate_json((directory / MANIFEST_NAME).read_bytes())
    except ValidationError as exc:
        raise DataFormatError(f"invalid dataset manifest: {exc}") from exc
    train = read_tensor(directory / manifest.train_file)
    test = read_tensor(directory / manifest.test_file)
    if len(train) != manifest.train_size or len(test) != manifest.test_size:
        raise DataFormatError("dataset split sizes disagree with the manifest")
    return Dataset(
        kind=manifest.kind,
        train=train,
        test=test,
        seed=manifest.seed,
        integer_valued=manifest.integer_valued,
    )
