"""Cycle-rendering: synthesise occlusion-inpainting pairs from single RGBD frames."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError
from .frames import RgbdFrame, TrainingPair
from .geometry import Intrinsics, Pose, pose_inverse, rotation_xyz
from .warp import forward_warp

DEFAULT_MAX_ROTATION = math.radians(2.0)
DEFAULT_TRANSLATION_FRACTION = 0.05


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for item ``keys`` of a run seeded with ``seed``.

    The keys go in as a spawn key; appending them to the entropy list instead
    would make ``(s, 0)`` and ``(s,)`` the same stream.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class PoseSampleConfig:
    max_translation: float
    max_rotation: float = DEFAULT_MAX_ROTATION
    seed: int = 0

    def __post_init__(self):
        if not self.max_translation >= 0:
            raise ConfigurationError(f"max_translation must be >= 0, got {self.max_translation}")
        if not 0 <= self.max_rotation <= math.pi / 8:
            raise ConfigurationError(f"max_rotation must lie in [0, pi/8], got {self.max_rotation}")

    @classmethod
    def for_frame(cls, frame: RgbdFrame, seed: int = 0, max_rotation: float = DEFAULT_MAX_ROTATION) -> PoseSampleConfig:
        """Defaults: translation bound of 5% of the median valid depth, 2 degree rotations."""
        median = float(np.nanmedian(frame.depth))
        return cls(DEFAULT_TRANSLATION_FRACTION * median, max_rotation, seed)


def sample_pose(cfg: PoseSampleConfig, rng: Optional[np.random.Generator] = None) -> Pose:
    """Uniform per-axis translation and Euler angles (rotation ``Rz Ry Rx``).

    Draw order is translation (x, y, z) then angles (x, y, z).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    t = rng.uniform(-cfg.max_translation, cfg.max_translation, size=3)
    angles = rng.uniform(-cfg.max_rotation, cfg.max_rotation, size=3)
    if cfg.max_translation == 0:
        t = np.zeros(3)
    if cfg.max_rotation == 0:
        return Pose(np.eye(3), t)
    return Pose(rotation_xyz(*angles), t)


def cycle_render(src: RgbdFrame, t: Pose, k: Intrinsics, prompt_id: int = 0) -> TrainingPair:
    """Warp to the virtual view, keep what survived, warp back to the original view."""
    virtual = forward_warp(src, t, k)
    # forward_warp already zeroes rgb and invalidates depth outside its mask
    back = forward_warp(virtual.frame, pose_inverse(t), k)
    return TrainingPair(cond=back, target=src, prompt_id=prompt_id, pose=t)


def make_cycle_pairs(frames: Sequence[RgbdFrame], k: Intrinsics, n: int, seed: int,
                     max_translation: Optional[float] = None, max_rotation: float = DEFAULT_MAX_ROTATION,
                     prompt_ids: Optional[Sequence[int]] = None) -> list[TrainingPair]:
    """``n`` pairs cycling over ``frames``; pair ``i`` uses generator ``(seed, i)``."""
    if not frames:
        raise ValueError("need at least one frame")
    pairs = []
    for i in range(n):
        j = i % len(frames)
        frame = frames[j]
        if max_translation is None:
            cfg = PoseSampleConfig.for_frame(frame, seed, max_rotation)
        else:
            cfg = PoseSampleConfig(max_translation, max_rotation, seed)
        pose = sample_pose(cfg, derive_rng(seed, i))
        pid = 0 if prompt_ids is None else int(prompt_ids[j])
        pairs.append(cycle_render(frame, pose, k, pid))
    return pairs
