"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .errors import DimensionError, ShapeError


def check_image(img, name="image", allow_empty=False):
    """Return ``img`` as a finite 2-D float64 array.

    Raises
    ------
    DimensionError
        If the array is not 2-D or has a zero-sized axis.
    ValueError
        If any value is NaN or infinite.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and (arr.shape[0] == 0 or arr.shape[1] == 0):
        raise DimensionError(f"{name} has a zero-sized dimension {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_kernel(ker, name="kernel"):
    """Validate a square, odd-sized blur kernel (size >= 1)."""
    arr = check_image(ker, name=name)
    if arr.shape[0] != arr.shape[1] or arr.shape[0] % 2 == 0:
        raise DimensionError(f"{name} must be square with odd size, got {arr.shape}")
    return arr


def check_kernel_size(size):
    size = int(size)
    if size < 3 or size % 2 == 0:
        raise DimensionError(f"kernel size must be odd and >= 3, got {size}")
    return size


def check_same_shape(*arrays, what="arrays"):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        raise ShapeError(f"{what} have mismatched shapes: {sorted(shapes)}")


def is_simplex(ker, tol=1e-9):
    ker = np.asarray(ker)
    return bool(np.all(ker >= 0) and abs(ker.sum() - 1.0) <= tol)


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
