"""Shared numeric helpers: seeded RNG streams, PSNR, finite differences,
power iteration and NPY persistence.

All arrays are ``float64``; nothing in the package downcasts.
"""
from __future__ import annotations

import os
from typing import Callable

import numpy as np

PSNR_CAP = 99.0
_MSE_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values or diverges."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a counter-based generator keyed by ``(seed, stream)``.

    Philox is keyed with the 128-bit value ``stream << 64 | seed`` so that
    distinct streams never overlap and results do not depend on the order
    in which streams are created.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    stream = int(stream) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=(stream << 64) | seed))


def psnr(x, reference, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP``."""
    x = np.asarray(x, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if x.shape != reference.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {reference.shape}")
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((x - reference) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse)))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value probing entry {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def spectral_norm(op, iterations: int = 100, rng: np.random.Generator | None = None) -> float:
    """Estimate the operator 2-norm by power iteration on ``A^T A``."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if rng is None:
        rng = make_rng(0)
    v = rng.standard_normal(op.in_shape)
    nv = np.linalg.norm(v)
    v /= nv
    sigma = 0.0
    for _ in range(iterations):
        w = op.adjoint(op.apply(v))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        sigma = np.sqrt(nw)
    # Rayleigh quotient on the final iterate is sharper than the last ratio
    return float(np.linalg.norm(op.apply(v)) if sigma > 0 else 0.0)


def save_npy(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.save(path, arr, allow_pickle=False)


def load_npy(path) -> np.ndarray:
    return np.load(path, allow_pickle=False).astype(np.float64)
