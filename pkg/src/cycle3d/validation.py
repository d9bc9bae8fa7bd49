"""Input validation helpers, in the spirit of ``sklearn.utils.validation``.

Each ``check_*`` returns a normalised float64/uint8 array or raises.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, DimensionError, InvalidDepthError


def check_rgb(rgb, *, name: str = "rgb") -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] < 1 or rgb.shape[1] < 1:
        raise DimensionError(f"{name} must have shape (H, W, 3), got {rgb.shape}")
    if not np.all(np.isfinite(rgb)) or rgb.min() < 0.0 or rgb.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return rgb


def check_depth(depth, *, name: str = "depth") -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D grid, got shape {depth.shape}")
    finite = np.isfinite(depth)
    if np.any(depth[finite] <= 0):
        raise InvalidDepthError(f"{name} has non-positive finite entries")
    if not np.all(finite):
        # every invalid marker is normalised to NaN
        depth = np.where(finite, depth, np.nan)
    return depth


def check_mask(mask, *, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D grid, got shape {mask.shape}")
    if mask.dtype == bool:
        return mask.astype(np.uint8)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return mask.astype(np.uint8)


def check_same_size(*arrays) -> None:
    sizes = {a.shape[:2] for a in arrays}
    if len(sizes) != 1:
        raise DimensionError(f"spatial sizes disagree: {sorted(sizes)}")


def check_probability(p, *, name: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
    return p


def check_nchw(x, *, name: str = "tensor", channels: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"{name} must be NCHW, got shape {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise DimensionError(f"{name} must have {channels} channels, got {x.shape[1]}")
    return x
