"""Image ingestion and the synthetic piecewise-smooth image generator."""
from __future__ import annotations

import os

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_EXTENSIONS = (".png", ".pgm", ".pnm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


def read_image(path) -> np.ndarray:
    """Read an image file as grayscale float64 in ``[0, 1]``."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise ValueError(f"cannot read image file {path}: {exc}") from exc
    return arr / 255.0


def write_image(path, image) -> None:
    """Write a ``[0, 1]`` image as 8-bit grayscale (format from the extension)."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def list_images(directory) -> list:
    if not os.path.isdir(directory):
        raise ValueError(f"dataset directory {directory} does not exist")
    files = sorted(
        os.path.join(directory, f) for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTENSIONS)
    )
    if not files:
        raise ValueError(f"no images found in {directory}")
    return files


def synthetic_image(shape, rng: np.random.Generator, n_blobs: int = 4, n_edges: int = 2) -> np.ndarray:
    """Piecewise-smooth image: smooth Gaussian blobs plus straight edges."""
    h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.full(shape, rng.uniform(0.2, 0.5))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.08, 0.3)
        img += rng.uniform(-0.4, 0.4) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    for _ in range(n_edges):
        angle = rng.uniform(0, np.pi)
        offset = rng.uniform(-0.3, 0.3)
        side = (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)) > offset
        img += rng.uniform(-0.3, 0.3) * side
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.full(shape, 0.5)
    return (img - lo) / (hi - lo)


def extract_patches(images, patch_size: int, count: int, rng: np.random.Generator) -> list:
    """``count`` patches at seeded random offsets, cycling through ``images``."""
    patches = []
    for i in range(count):
        img = images[i % len(images)]
        h, w = img.shape
        if patch_size > h or patch_size > w:
            raise ValueError(f"patch size {patch_size} exceeds image shape {img.shape}")
        r = int(rng.integers(0, h - patch_size + 1))
        c = int(rng.integers(0, w - patch_size + 1))
        patches.append(img[r : r + patch_size, c : c + patch_size].copy())
    return patches


def load_dataset(source, patch_size: int, count: int, rng: np.random.Generator) -> list:
    """Grayscale patches in ``[0, 1]`` from a directory, or synthetic images.

    ``source`` is a directory path, or ``None`` / ``"synthetic"`` for the
    built-in generator (which then produces ``patch_size`` images directly).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if source is None or source == "synthetic":
        return [synthetic_image((patch_size, patch_size), rng) for _ in range(count)]
    images = [read_image(f) for f in list_images(source)]
    return extract_patches(images, patch_size, count, rng)
