"""Image containers shared by the rendering, training and sampling code.

Depth maps mark invalid pixels with NaN.  Masks are ``uint8`` grids where 1
means a known pixel and 0 an occluded hole.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Pose
from .validation import check_depth, check_mask, check_rgb, check_same_size


@dataclass(frozen=True, eq=False)
class RgbdFrame:
    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        rgb = check_rgb(self.rgb)
        depth = check_depth(self.depth)
        check_same_size(rgb, depth)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def valid_depth(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def __eq__(self, other):
        if not isinstance(other, RgbdFrame):
            return NotImplemented
        return np.array_equal(self.rgb, other.rgb) and np.array_equal(self.depth, other.depth, equal_nan=True)


@dataclass(frozen=True, eq=False)
class MaskedFrame:
    frame: RgbdFrame
    mask: np.ndarray

    def __post_init__(self):
        mask = check_mask(self.mask)
        check_same_size(mask, self.frame.depth)
        object.__setattr__(self, "mask", mask)

    @property
    def rgb(self) -> np.ndarray:
        return self.frame.rgb

    @property
    def depth(self) -> np.ndarray:
        return self.frame.depth

    def hole_fraction(self) -> float:
        return 1.0 - float(self.mask.mean())

    def __eq__(self, other):
        if not isinstance(other, MaskedFrame):
            return NotImplemented
        return self.frame == other.frame and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True, eq=False)
class TrainingPair:
    """Masked frame at the original viewpoint, its ground truth and a prompt token (0 = blank)."""

    cond: MaskedFrame
    target: RgbdFrame
    prompt_id: int = 0
    pose: Optional[Pose] = field(default=None, compare=False)

    def __post_init__(self):
        check_same_size(self.cond.mask, self.target.depth)
        if int(self.prompt_id) != self.prompt_id or self.prompt_id < 0:
            raise ValueError(f"prompt_id must be a non-negative integer, got {self.prompt_id}")

    def __eq__(self, other):
        if not isinstance(other, TrainingPair):
            return NotImplemented
        return self.cond == other.cond and self.target == other.target and self.prompt_id == other.prompt_id
