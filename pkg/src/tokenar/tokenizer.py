"""Deterministic palette quantizer standing in for a VQ image tokenizer.

Images are float arrays of shape (H, W, 3) with channels in [0, 1]; token grids
are integer arrays of shape (rows, cols). Every patch of ``patch x patch`` pixels
maps to the codebook entry nearest to the patch's mean color.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetIOError, InvalidArgument

DEFAULT_K = 64
DEFAULT_PATCH = 4
DEFAULT_IMAGE_SIZE = 32


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # (K, 3) float64
    seed: int

    @property
    def K(self) -> int:
        return int(self.entries.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.entries, other.entries)

    def __hash__(self) -> int:
        return hash((self.seed, self.entries.tobytes()))


def _lattice_levels(K: int) -> int:
    levels = 2
    while levels**3 < K:
        levels += 1
    return levels


def build_codebook(seed: int = 0, K: int = DEFAULT_K) -> Codebook:
    """Build a K-color palette from the smallest RGB lattice holding K points.

    Levels are rounded to 8-bit values so palette colors survive a PPM round
    trip exactly. The seed fixes a permutation of the lattice; the first K
    points of that permutation form the codebook.
    """
    if K < 2:
        raise InvalidArgument(f"codebook needs K >= 2, got {K}")
    L = _lattice_levels(K)
    levels = np.round(255.0 * np.arange(L) / (L - 1)) / 255.0
    r, g, b = np.meshgrid(levels, levels, levels, indexing="ij")
    lattice = np.stack([r.ravel(), g.ravel(), b.ravel()], axis=1)
    order = np.random.default_rng(seed).permutation(len(lattice))
    entries = lattice[order[:K]].copy()
    entries.setflags(write=False)
    return Codebook(entries=entries, seed=seed)


def _check_image(image: np.ndarray, patch: int) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgument(f"image must have shape (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    if patch < 1 or h % patch or w % patch:
        raise InvalidArgument(f"image {h}x{w} is not divisible by patch size {patch}")


def patch_means(image: np.ndarray, patch: int = DEFAULT_PATCH) -> np.ndarray:
    """Mean color of every patch, shape (rows, cols, 3)."""
    image = np.asarray(image, dtype=np.float64)
    _check_image(image, patch)
    h, w = image.shape[:2]
    return image.reshape(h // patch, patch, w // patch, patch, 3).mean(axis=(1, 3))


def nearest_entries(colors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Index of the nearest codebook entry for each color (lowest index on ties)."""
    flat = colors.reshape(-1, 3)
    d2 = ((flat[:, None, :] - codebook.entries[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1).reshape(colors.shape[:-1])


def quantize(image: np.ndarray, codebook: Codebook, patch: int = DEFAULT_PATCH) -> np.ndarray:
    return nearest_entries(patch_means(image, patch), codebook).astype(np.int64)


def dequantize(tokens: np.ndarray, codebook: Codebook, patch: int = DEFAULT_PATCH) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise InvalidArgument(f"token grid must be 2-D, got shape {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= codebook.K):
        raise InvalidArgument(f"token ids must lie in [0, {codebook.K})")
    colors = codebook.entries[tokens]
    return np.repeat(np.repeat(colors, patch, axis=0), patch, axis=1)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an image as binary 8-bit PPM (P6)."""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(Path(path), format="PPM")


def read_ppm(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM":
                raise DatasetIOError(f"{path}: not a PPM image")
            data = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError as exc:
        raise DatasetIOError(f"{path}: file not found") from exc
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        if isinstance(exc, DatasetIOError):
            raise
        raise DatasetIOError(f"{path}: unreadable image ({exc})") from exc
    return data / 255.0
