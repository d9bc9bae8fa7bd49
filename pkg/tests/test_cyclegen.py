import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cycle3d.cyclegen import (DEFAULT_MAX_ROTATION, PoseSampleConfig, cycle_render, derive_rng,
                              make_cycle_pairs, sample_pose)
from cycle3d.exceptions import ConfigurationError
from cycle3d.frames import RgbdFrame
from cycle3d.geometry import Intrinsics, Pose


def constant_plane(size=16, depth=2.0, seed=0):
    rng = np.random.default_rng(seed)
    return RgbdFrame(rng.random((size, size, 3)), np.full((size, size), depth))


@given(st.integers(1, 6), st.sampled_from([-1, 1]), st.sampled_from([1.0, 2.0, 4.0]))
def test_integer_shift_cycle_is_exact(k, sign, depth):
    size = 16
    frame = constant_plane(size, depth)
    cam = Intrinsics.default(size)
    # a lateral move of tx shifts the image by -fx * tx / depth pixels
    tx = sign * k * depth / cam.fx
    pair = cycle_render(frame, Pose(np.eye(3), [tx, 0, 0]), cam)
    m = pair.cond.mask.astype(bool)
    assert np.array_equal(pair.cond.rgb[m], frame.rgb[m])
    assert np.all(pair.cond.rgb[~m] == 0)
    # holes are exactly one contiguous k-pixel strip against an image edge
    cols = np.flatnonzero(~m.all(axis=0))
    assert len(cols) == k and np.all(~m[:, cols])
    assert np.array_equal(cols, np.arange(k)) or np.array_equal(cols, np.arange(size - k, size))


def test_cycle_pair_target_is_source_and_keeps_pose():
    f = constant_plane()
    p = Pose(np.eye(3), [0.1, 0, 0])
    pair = cycle_render(f, p, Intrinsics.default(16), prompt_id=3)
    assert pair.target == f and pair.pose == p and pair.prompt_id == 3


def test_derive_rng_streams_are_distinct_and_reproducible():
    draws = {keys: derive_rng(7, *keys).random() for keys in [(), (0,), (1,), (0, 0), (0, 1)]}
    assert len(set(draws.values())) == len(draws)
    assert derive_rng(7, 0, 1).random() == draws[(0, 1)]
    assert derive_rng(8).random() != draws[()]


@given(st.floats(0, 1), st.floats(0, math.pi / 8), st.integers(0, 2**31))
def test_sample_pose_within_bounds(max_t, max_r, seed):
    p = sample_pose(PoseSampleConfig(max_t, max_r), np.random.default_rng(seed))
    assert np.all(np.abs(p.translation) <= max_t)
    # rotation angle is bounded by the per-axis bound times sqrt(3)
    angle = math.acos(min(1.0, (np.trace(p.rotation) - 1) / 2))
    assert angle <= math.sqrt(3) * max_r + 1e-9


def test_pose_config_defaults_and_validation():
    f = RgbdFrame(np.zeros((4, 4, 3)), np.array([[1.0, 2.0, 3.0, np.nan]] * 4))
    cfg = PoseSampleConfig.for_frame(f)
    assert cfg.max_translation == pytest.approx(0.05 * 2.0)
    assert cfg.max_rotation == DEFAULT_MAX_ROTATION == pytest.approx(math.radians(2))
    with pytest.raises(ConfigurationError):
        PoseSampleConfig(-1.0)
    with pytest.raises(ConfigurationError):
        PoseSampleConfig(0.1, math.pi / 4)
    assert sample_pose(PoseSampleConfig(0.0, 0.0)) == Pose.identity()


def test_make_cycle_pairs_deterministic_and_cycles_frames():
    frames = [constant_plane(seed=s) for s in range(3)]
    cam = Intrinsics.default(16)
    a = make_cycle_pairs(frames, cam, 7, seed=4, prompt_ids=[1, 2, 1])
    b = make_cycle_pairs(frames, cam, 7, seed=4, prompt_ids=[1, 2, 1])
    assert a == b
    assert [p.prompt_id for p in a] == [1, 2, 1, 1, 2, 1, 1]
    assert all(p.target == frames[i % 3] for i, p in enumerate(a))
    assert make_cycle_pairs(frames, cam, 7, seed=5) != a
    with pytest.raises(ValueError):
        make_cycle_pairs([], cam, 1, 0)
