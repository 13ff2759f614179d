"""Dense image arithmetic, seeded noise, and quality metrics.

Images are plain ``numpy.ndarray`` values of shape ``(C, H, W)`` and dtype
float64 holding intensities normalized to [0, 1].
"""
import math

import numpy as np

from .errors import DimensionError, ParameterError

# Written into run metadata so noise draws can be reproduced elsewhere.
RNG_ALGORITHM = "numpy.Philox4x64-10/ziggurat-normal"


def as_image(a, name="image"):
    """Return ``a`` as a finite float64 array of shape (C, H, W)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"{name} must have shape (C, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite entries")
    return arr


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def inner(a, b):
    """Euclidean inner product, summed over every entry."""
    _check_same_shape(a, b)
    return float(np.vdot(np.ravel(a), np.ravel(b)))


def norm(a):
    return float(np.linalg.norm(np.ravel(a)))


def sqnorm(a):
    a = np.ravel(a)
    return float(np.dot(a, a))


def make_rng(seed):
    """Counter-based generator; identical seeds give bit-identical streams."""
    return np.random.Generator(np.random.Philox(int(seed)))


def child_seeds(seed, n):
    """Independent integer seeds for ``n`` parallel workers."""
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


def add_gaussian_noise(x, sigma, rng):
    """Return ``x + eps`` with ``eps`` i.i.d. N(0, sigma^2) per entry."""
    if sigma < 0:
        raise ParameterError(f"noise sigma must be non-negative, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def psnr(x, ref, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` when the images coincide."""
    _check_same_shape(x, ref)
    if peak <= 0:
        raise ParameterError("peak must be positive")
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
