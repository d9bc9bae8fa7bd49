"""Analytic fronto-parallel plane scenes with exact novel views.

A scene is a textured background plane at ``bg_depth`` and, for ``two-plane``,
a textured square at ``fg_depth`` covering ``square`` x ``square`` source
pixels.  Textures are seeded value noise evaluated at continuous source-pixel
coordinates, so any view can be ray-cast exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigurationError
from .frames import MaskedFrame, RgbdFrame
from .geometry import Intrinsics, Pose

SCENE_KINDS = ("constant-plane", "two-plane")
# scene-class prompt tokens; 0 stays the blank prompt
SCENE_PROMPTS = {"constant-plane": 1, "two-plane": 2}

TEXTURE_CELLS = (8.0, 4.0)
TEXTURE_WEIGHTS = (1.0, 0.5)
TEXTURE_AMPLITUDE = 0.035
DOMAIN_MARGIN = 0.5


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "two-plane"
    size: int = 32
    fg_depth: float = 1.0
    bg_depth: float = 2.0
    seed: int = 0
    square: Optional[int] = None
    square_origin: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ConfigurationError(f"unknown scene kind {self.kind!r}")
        if self.size < 2:
            raise ConfigurationError("scene size must be at least 2")
        if not 0 < self.fg_depth < self.bg_depth:
            raise ConfigurationError("need 0 < fg_depth < bg_depth")
        if self.square is None:
            object.__setattr__(self, "square", max(1, self.size // 4))
        if not 0 < self.square < self.size:
            raise ConfigurationError(f"square extent must lie in (0, {self.size})")
        if self.square_origin is None:
            o = (self.size - self.square) // 2
            object.__setattr__(self, "square_origin", (o, o))
        object.__setattr__(self, "square_origin", tuple(int(v) for v in self.square_origin))

    @property
    def prompt_id(self) -> int:
        return SCENE_PROMPTS[self.kind]

    def intrinsics(self, focal: Optional[float] = None) -> Intrinsics:
        return Intrinsics.default(self.size, self.size, focal)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["square_origin"] = list(self.square_origin)
        return d


class _PlaneTexture:
    """Smoothstep-interpolated multi-octave value noise plus a base colour."""

    def __init__(self, rng: np.random.Generator, size: int, base: np.ndarray):
        self.base = base
        self.octaves = []
        for cell in TEXTURE_CELLS:
            pad = 3
            n = int(np.ceil(size / cell)) + 2 * pad + 1
            self.octaves.append((cell, pad, rng.uniform(-1.0, 1.0, size=(n, n, 3))))

    def __call__(self, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
        out = np.zeros(us.shape + (3,))
        for (cell, pad, lattice), weight in zip(self.octaves, TEXTURE_WEIGHTS):
            gx = us / cell + pad
            gy = vs / cell + pad
            n = lattice.shape[0]
            x0 = np.clip(np.floor(gx), 0, n - 2).astype(np.int64)
            y0 = np.clip(np.floor(gy), 0, n - 2).astype(np.int64)
            fx = np.clip(gx - x0, 0.0, 1.0)
            fy = np.clip(gy - y0, 0.0, 1.0)
            sx = (fx * fx * (3.0 - 2.0 * fx))[..., None]
            sy = (fy * fy * (3.0 - 2.0 * fy))[..., None]
            top = lattice[y0, x0] * (1 - sx) + lattice[y0, x0 + 1] * sx
            bot = lattice[y0 + 1, x0] * (1 - sx) + lattice[y0 + 1, x0 + 1] * sx
            out += weight * (top * (1 - sy) + bot * sy)
        return np.clip(self.base + TEXTURE_AMPLITUDE * out, 0.0, 1.0)


def _textures(spec: SceneSpec):
    rng = np.random.default_rng([spec.seed, 7919])
    bg_base = rng.uniform(0.2, 0.8, size=3)
    fg_base = rng.uniform(0.2, 0.8, size=3)
    while np.abs(fg_base - bg_base).mean() < 0.2:
        fg_base = rng.uniform(0.2, 0.8, size=3)
    return _PlaneTexture(rng, spec.size, bg_base), _PlaneTexture(rng, spec.size, fg_base)


def _ray_plane(pose: Pose, k: Intrinsics, plane_z: float):
    """Hit of every target-pixel ray with the source plane ``z_s = plane_z``.

    Returns target depth and the hit's continuous source-pixel coordinates
    (NaN where the ray misses in front of the camera).  Ordered so the
    identity pose reproduces the source pixel grid bit for bit.
    """
    v, u = np.indices((k.height, k.width), dtype=np.float64)
    a = (u - k.cx) / k.fx
    b = (v - k.cy) / k.fy
    rt = pose.rotation.T
    # ray direction (a, b, 1) and camera offset expressed in source coordinates
    dx = rt[0, 0] * a + rt[0, 1] * b + rt[0, 2]
    dy = rt[1, 0] * a + rt[1, 1] * b + rt[1, 2]
    dz = rt[2, 0] * a + rt[2, 1] * b + rt[2, 2]
    tx, ty, tz = (rt @ pose.translation)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = ((plane_z + tz) / dz) / plane_z  # target depth / plane depth
        depth = ratio * plane_z
        a_s = dx * ratio - tx / plane_z
        b_s = dy * ratio - ty / plane_z
    hit = np.isfinite(depth) & (depth > 0)
    us = np.where(hit, k.fx * a_s + k.cx, np.nan)
    vs = np.where(hit, k.fy * b_s + k.cy, np.nan)
    return np.where(hit, depth, np.nan), us, vs


def _render(spec: SceneSpec, pose: Pose, k: Intrinsics) -> MaskedFrame:
    if (k.width, k.height) != (spec.size, spec.size):
        raise ConfigurationError("intrinsics do not match the scene size")
    bg_tex, fg_tex = _textures(spec)
    lo, hi = -0.5 - DOMAIN_MARGIN, spec.size - 0.5 + DOMAIN_MARGIN

    depth, us, vs = _ray_plane(pose, k, spec.bg_depth)
    inside = (us >= lo) & (us <= hi) & (vs >= lo) & (vs <= hi)
    rgb = np.where(inside[..., None], bg_tex(np.nan_to_num(us), np.nan_to_num(vs)), 0.0)
    depth = np.where(inside, depth, np.nan)
    mask = inside.copy()

    if spec.kind == "two-plane":
        fdepth, fus, fvs = _ray_plane(pose, k, spec.fg_depth)
        x0, y0 = spec.square_origin
        on_square = ((fus >= x0 - 0.5) & (fus < x0 + spec.square - 0.5)
                     & (fvs >= y0 - 0.5) & (fvs < y0 + spec.square - 0.5))
        front = on_square & ~(depth <= fdepth)
        rgb = np.where(front[..., None], fg_tex(np.nan_to_num(fus), np.nan_to_num(fvs)), rgb)
        depth = np.where(front, fdepth, depth)
        mask |= front
    return MaskedFrame(RgbdFrame(rgb, depth), mask.astype(np.uint8))


def make_scene(spec: SceneSpec, k: Optional[Intrinsics] = None) -> RgbdFrame:
    return _render(spec, Pose.identity(), k or spec.intrinsics()).frame


def ground_truth_view(spec: SceneSpec, t: Pose, k: Optional[Intrinsics] = None) -> MaskedFrame:
    """Exact view after moving the camera by ``t``; mask marks pixels whose ray
    hits a plane within the source image's extent (plus half a pixel)."""
    return _render(spec, t, k or spec.intrinsics())


def random_scene_specs(n: int, kind: str = "two-plane", size: int = 32, seed: int = 0,
                       fg_depth: float = 1.0, bg_depth: float = 2.0) -> list:
    """``n`` specs with their own texture seeds and, for two-plane scenes, a
    square of random extent (size/8 to size/3) at a random position."""
    rng = np.random.default_rng([seed, 104729])
    specs = []
    for i in range(n):
        tex_seed = int(rng.integers(1 << 31))
        square, origin = None, None
        if kind == "two-plane":
            square = int(rng.integers(max(1, size // 8), max(2, size // 3) + 1))
            origin = tuple(int(v) for v in rng.integers(0, size - square + 1, size=2))
        specs.append(SceneSpec(kind, size, fg_depth, bg_depth, tex_seed, square, origin))
    return specs


def object_mask(frame: RgbdFrame, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Silhouette of the nearest depth layer; a random box when the depth is flat."""
    depth = frame.depth
    finite = np.isfinite(depth)
    fg = finite & (depth < np.nanmax(depth))
    if fg.any():
        return fg.astype(np.uint8)
    rng = rng or np.random.default_rng(0)
    h, w = depth.shape
    bh, bw = rng.integers(max(1, h // 4), max(2, h // 2) + 1), rng.integers(max(1, w // 4), max(2, w // 2) + 1)
    y0, x0 = rng.integers(0, h - bh + 1), rng.integers(0, w - bw + 1)
    m = np.zeros((h, w), dtype=np.uint8)
    m[y0:y0 + bh, x0:x0 + bw] = 1
    return m
