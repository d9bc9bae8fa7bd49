import numpy as np
import pytest
from hypothesis import given, strategies as st

from cycle3d.exceptions import DimensionError
from cycle3d.frames import RgbdFrame
from cycle3d.geometry import Intrinsics, Pose, rotation_xyz
from cycle3d.warp import apply_mask, fill_depth_nearest, forward_warp, splat_targets

from oracles import brute_force_warp


def random_frame(rng, h, w, invalid=0.1):
    depth = rng.uniform(0.5, 4.0, size=(h, w))
    depth[rng.random((h, w)) < invalid] = np.nan
    return RgbdFrame(rng.random((h, w, 3)), depth)


def random_pose(rng, rot=0.05, trans=0.2):
    return Pose(rotation_xyz(*rng.uniform(-rot, rot, 3)), rng.uniform(-trans, trans, 3))


def assert_matches_oracle(frame, pose, k):
    out = forward_warp(frame, pose, k)
    rgb, depth, mask = brute_force_warp(frame.rgb, frame.depth, pose.rotation, pose.translation,
                                        k.fx, k.fy, k.cx, k.cy)
    assert np.array_equal(out.mask, mask)
    assert np.array_equal(out.rgb, rgb)
    assert np.array_equal(out.depth, depth, equal_nan=True)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 12))
def test_forward_warp_matches_brute_force(seed, h, w):
    rng = np.random.default_rng(seed)
    k = Intrinsics(float(rng.uniform(4, 20)), float(rng.uniform(4, 20)), (w - 1) / 2, (h - 1) / 2, w, h)
    assert_matches_oracle(random_frame(rng, h, w), random_pose(rng), k)


def test_forward_warp_matches_brute_force_with_quantised_depth():
    # few distinct depths force many equal-depth collisions on the tie-break rule
    rng = np.random.default_rng(3)
    for _ in range(20):
        frame = random_frame(rng, 16, 16)
        depth = np.where(np.isfinite(frame.depth), np.round(frame.depth), np.nan)
        frame = RgbdFrame(frame.rgb, depth)
        assert_matches_oracle(frame, Pose(np.eye(3), [rng.uniform(-0.3, 0.3), 0, -0.5]), Intrinsics.default(16))


def test_identity_pose_copies_frame(rng):
    f = random_frame(rng, 9, 7)
    out = forward_warp(f, Pose.identity(), Intrinsics.default(7, 9))
    valid = np.isfinite(f.depth)
    assert np.array_equal(out.mask, valid.astype(np.uint8))
    assert np.array_equal(out.rgb[valid], f.rgb[valid])
    assert np.array_equal(out.depth, f.depth, equal_nan=True)


def test_holes_are_zero_rgb_and_nan_depth(rng):
    f = random_frame(rng, 16, 16)
    out = forward_warp(f, Pose(np.eye(3), [0.3, 0, 0]), Intrinsics.default(16))
    holes = out.mask == 0
    assert holes.any()
    assert np.all(out.rgb[holes] == 0) and np.all(np.isnan(out.depth[holes]))
    assert np.all(np.isfinite(out.depth[~holes]))


def test_nearest_splat_wins_and_equal_depths_go_to_first_source():
    k = Intrinsics.default(4, 1, focal=4.0)
    rgb = np.zeros((1, 4, 3))
    rgb[0, :, 0] = [0.1, 0.2, 0.3, 0.4]
    # pixels 0 and 1 both land on pixel 1 after a shift of exactly one pixel at depth 1
    depth = np.array([[1.0, 1.0, 2.0, 2.0]])
    out = forward_warp(RgbdFrame(rgb, depth), Pose(np.eye(3), [0.25, 0, 0]), k)
    assert out.rgb[0, 1, 0] == 0.1  # lands from pixel 0 only
    depth = np.array([[2.0, 1.0, 2.0, 2.0]])
    out = forward_warp(RgbdFrame(rgb, depth), Pose(np.eye(3), [0.5, 0, 0]), k)
    # pixel 1 (depth 1) shifts by 2 to pixel 3; pixel 2 (depth 2) also shifts by 1 to pixel 3: nearest wins
    assert out.rgb[0, 3, 0] == 0.2


def test_splat_targets_drop_points_behind_camera():
    k = Intrinsics.default(3)
    depth = np.full((3, 3), 1.0)
    src, tgt, z = splat_targets(depth, Pose(np.eye(3), [0, 0, -2.0]), k)
    assert src.size == tgt.size == z.size == 0


def test_forward_warp_rejects_size_mismatch(rng):
    with pytest.raises(DimensionError):
        forward_warp(random_frame(rng, 4, 4), Pose.identity(), Intrinsics.default(5))


def test_apply_mask_zeroes_rgb_and_invalidates_depth(rng):
    f = random_frame(rng, 5, 5, invalid=0)
    m = (rng.random((5, 5)) > 0.5).astype(np.uint8)
    out = apply_mask(f, m)
    assert np.all(out.rgb[m == 0] == 0) and np.all(np.isnan(out.depth[m == 0]))
    assert np.array_equal(out.rgb[m == 1], f.rgb[m == 1])
    with pytest.raises(DimensionError):
        apply_mask(f, np.ones((4, 5)))


def test_fill_depth_nearest():
    d = np.array([[1.0, np.nan, np.nan, 4.0]])
    assert np.array_equal(fill_depth_nearest(d), [[1.0, 1.0, 4.0, 4.0]])
    full = np.ones((2, 2))
    assert np.array_equal(fill_depth_nearest(full), full)
    with pytest.raises(ValueError):
        fill_depth_nearest(np.full((2, 2), np.nan))
