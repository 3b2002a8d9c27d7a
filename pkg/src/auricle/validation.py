"""Input validation helpers shared across the pipeline."""

import numpy as np


def check_uint8_image(arr, name="image"):
    """Validate an 8-bit image array (HxW or HxWx3) and return it."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError(f"{name} must be uint8, got {arr.dtype}")
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (1, 3):
        return arr
    raise ValueError(f"{name} must be HxW or HxWx{{1,3}}, got shape {arr.shape}")


def check_rgb_image(arr, name="image"):
    """Validate a 3-channel 8-bit image and return it."""
    arr = check_uint8_image(arr, name)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must be HxWx3, got shape {arr.shape}")
    return arr


def check_mask(mask, name="mask"):
    """Validate a boolean mask array and return it."""
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise ValueError(f"{name} must be boolean, got {mask.dtype}")
    if mask.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {mask.shape}")
    return mask


def check_matrix(X, name="X", min_rows=1):
    """Validate a finite 2-D float matrix and return it as float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def to_rgb(arr):
    """Promote a 1-channel 8-bit image to 3 channels; pass 3-channel through."""
    arr = check_uint8_image(arr)
    if arr.ndim == 2:
        return np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[2] == 1:
        return np.repeat(arr, 3, axis=2)
    return arr
