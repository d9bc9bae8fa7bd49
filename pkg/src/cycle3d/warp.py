"""Forward point splatting of RGBD frames with a deterministic z-buffer."""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionError
from .frames import MaskedFrame, RgbdFrame
from .geometry import Intrinsics, Pose
from .validation import check_mask


def _check_intrinsics(frame: RgbdFrame, k: Intrinsics) -> None:
    if frame.shape != (k.height, k.width):
        raise DimensionError(f"frame is {frame.shape[1]}x{frame.shape[0]} but intrinsics describe {k.width}x{k.height}")


def splat_targets(depth: np.ndarray, pose: Pose, k: Intrinsics):
    """Project every valid source pixel into the target view.

    Returns ``(src_index, tgt_index, tgt_depth)`` for the splats that land in
    front of the camera and inside the image, in row-major source order.
    """
    h, w = depth.shape
    v, u = np.indices((h, w), dtype=np.float64)
    src = np.flatnonzero(np.isfinite(depth))
    u, v, d = u.ravel()[src], v.ravel()[src], depth.ravel()[src]

    x = (u - k.cx) * d / k.fx
    y = (v - k.cy) * d / k.fy
    xn, yn, zn = pose.apply(x, y, d)

    front = zn > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        pu = np.floor(k.fx * xn / zn + k.cx + 0.5)
        pv = np.floor(k.fy * yn / zn + k.cy + 0.5)
    keep = front & (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
    tgt = pv[keep].astype(np.int64) * w + pu[keep].astype(np.int64)
    return src[keep], tgt, zn[keep]


def forward_warp(src: RgbdFrame, t: Pose, k: Intrinsics) -> MaskedFrame:
    """Render ``src`` into the camera reached by ``t``.

    Each valid pixel lands on its nearest target pixel (rounding half up).  The
    strictly nearest splat wins; equal depths go to the earliest source pixel in
    row-major order.  Pixels that receive nothing are holes.
    """
    _check_intrinsics(src, k)
    h, w = src.shape
    src_idx, tgt_idx, z = splat_targets(src.depth, t, k)

    # lexsort: last key is primary -> group by target, nearest first, then source order
    order = np.lexsort((src_idx, z, tgt_idx))
    tgt_sorted = tgt_idx[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = tgt_sorted[1:] != tgt_sorted[:-1]
    winners = order[first]

    rgb = np.zeros((h * w, 3))
    depth = np.full(h * w, np.nan)
    mask = np.zeros(h * w, dtype=np.uint8)
    tw = tgt_idx[winners]
    rgb[tw] = src.rgb.reshape(-1, 3)[src_idx[winners]]
    depth[tw] = z[winners]
    mask[tw] = 1
    return MaskedFrame(RgbdFrame(rgb.reshape(h, w, 3), depth.reshape(h, w)), mask.reshape(h, w))


def apply_mask(f: RgbdFrame, m) -> MaskedFrame:
    m = check_mask(m)
    if m.shape != f.shape:
        raise DimensionError(f"mask {m.shape} does not match frame {f.shape}")
    keep = m.astype(bool)
    rgb = np.where(keep[..., None], f.rgb, 0.0)
    depth = np.where(keep, f.depth, np.nan)
    return MaskedFrame(RgbdFrame(rgb, depth), m)


def fill_depth_nearest(depth: np.ndarray) -> np.ndarray:
    """Replace invalid depths with the value of the nearest valid pixel (Euclidean)."""
    from scipy.ndimage import distance_transform_edt

    invalid = ~np.isfinite(depth)
    if not invalid.any():
        return depth.copy()
    if invalid.all():
        raise ValueError("depth map has no valid pixel to fill from")
    _, (iy, ix) = distance_transform_edt(invalid, return_indices=True)
    return depth[iy, ix]
