import numpy as np
import pytest
from hypothesis import given, strategies as st

from cycle3d.exceptions import DimensionError
from cycle3d.net.gradcheck import REL_TOL, check_gradients
from cycle3d.net.layers import (conv2d_backward, conv2d_forward, downsample_bilinear, instance_norm,
                                norm_backward, norm_forward, upsample2x, upsample2x_backward)
from cycle3d.net.meb import MebParams, meb_modulate
from cycle3d.net.unet import Conditions, UNetConfig, init_params, prompt_embed, unet_forward
from cycle3d.schedule import build_linear_schedule

from oracles import correlate_same, ring_fill


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(0, 2**31))
def test_conv_matches_loop_correlation(n, c, o, k, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(n, c, 7, 6)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
    out, _ = conv2d_forward(x, w, b)
    assert np.allclose(out, correlate_same(x, w, b), rtol=0, atol=1e-12)


def test_strided_conv_subsamples_the_dense_one(rng):
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    dense, _ = conv2d_forward(x, w, b)
    strided, _ = conv2d_forward(x, w, b, stride=2)
    assert np.allclose(strided, dense[:, :, ::2, ::2], rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_is_the_adjoint(rng, stride):
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(5, 3, 3, 3)), np.zeros(5)
    y, cache = conv2d_forward(x, w, b, stride)
    g = rng.normal(size=y.shape)
    dx, dw, db = conv2d_backward(g, cache)
    # <conv(x), g> = <x, conv^T(g)> and is linear in w
    assert np.isclose(np.sum(y * g), np.sum(x * dx), rtol=1e-12)
    assert np.isclose(np.sum(y * g), np.sum(w * dw), rtol=1e-12)
    assert np.allclose(db, g.sum(axis=(0, 2, 3)))


def test_conv_shape_errors(rng):
    with pytest.raises(DimensionError):
        conv2d_forward(rng.normal(size=(1, 2, 4, 4)), np.zeros((3, 3, 3, 3)), np.zeros(3))
    with pytest.raises(DimensionError):
        conv2d_forward(rng.normal(size=(1, 3, 4, 4)), np.zeros((3, 3, 2, 2)), np.zeros(3))
    with pytest.raises(DimensionError):
        conv2d_forward(rng.normal(size=(1, 3, 5, 5)), np.zeros((3, 3, 3, 3)), np.zeros(3), stride=2)


def test_resampling_adjoint_pairs(rng):
    x = rng.normal(size=(1, 4, 4, 2))
    g = rng.normal(size=(1, 8, 8, 2))
    assert np.isclose(np.sum(upsample2x(x) * g), np.sum(x * upsample2x_backward(g)))
    assert np.allclose(downsample_bilinear(upsample2x(x), 2), x)


def test_instance_norm_statistics_and_backward(rng):
    f = rng.normal(3.0, 2.0, size=(2, 3, 6, 6))
    y = instance_norm(f)
    assert np.allclose(y.mean(axis=(2, 3)), 0, atol=1e-12)
    assert np.allclose(y.var(axis=(2, 3)), 1, atol=1e-5)
    x = rng.normal(size=(1, 5, 5, 2))
    out, cache = norm_forward(x)
    g = rng.normal(size=x.shape)
    dx = norm_backward(g, cache)
    h = 1e-6
    d = rng.normal(size=x.shape)
    numeric = (np.sum(norm_forward(x + h * d)[0] * g) - np.sum(norm_forward(x - h * d)[0] * g)) / (2 * h)
    assert np.isclose(numeric, np.sum(dx * d), rtol=1e-6)


def test_meb_initial_modulation_is_identity(rng):
    f = rng.normal(size=(2, 4, 6, 6))
    z, m = rng.normal(size=(2, 3, 6, 6)), (rng.random((2, 1, 6, 6)) > 0.5).astype(float)
    p = MebParams.init(4, 3)
    assert np.allclose(meb_modulate(f, z, m, p, skips=False), instance_norm(f), atol=1e-12)
    # with skips: inner = 2 Norm(f), outer = 2 inner, plus the block input
    assert np.allclose(meb_modulate(f, z, m, p, skips=True), f + 4 * instance_norm(f), atol=1e-12)


def test_meb_matches_formula(rng):
    c, cc = 3, 2
    f = rng.normal(size=(1, c, 5, 5))
    z, m = rng.normal(size=(1, cc, 5, 5)), (rng.random((1, 1, 5, 5)) > 0.5).astype(float)
    ws = {k: rng.normal(size=(c, cc if k.endswith("z") else 1, 3, 3)) for k in ("gz", "bz", "gm", "bm")}
    bs = {k: rng.normal(size=c) for k in ws}
    p = MebParams(ws["gz"], bs["gz"], ws["bz"], bs["bz"], ws["gm"], bs["gm"], ws["bm"], bs["bm"])
    n = instance_norm(f)
    inner = correlate_same(z, ws["gz"], bs["gz"]) * n + correlate_same(z, ws["bz"], bs["bz"])
    outer = correlate_same(m, ws["gm"], bs["gm"]) * inner + correlate_same(m, ws["bm"], bs["bm"])
    assert np.allclose(meb_modulate(f, z, m, p, skips=False), outer, atol=1e-10)
    inner_s = inner + n
    outer_s = correlate_same(m, ws["gm"], bs["gm"]) * inner_s + correlate_same(m, ws["bm"], bs["bm"]) + inner_s
    assert np.allclose(meb_modulate(f, z, m, p, skips=True), f + outer_s, atol=1e-10)
    no_mask = correlate_same(z, ws["gz"], bs["gz"]) * n + correlate_same(z, ws["bz"], bs["bz"])
    assert np.allclose(meb_modulate(f, z, m, p, skips=False, mask_modulation=False), no_mask, atol=1e-10)


def test_meb_rejects_unresized_conditions(rng):
    with pytest.raises(DimensionError):
        meb_modulate(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(1, 3, 8, 8)), np.ones((1, 1, 8, 8)),
                     MebParams.init(2, 3))


def test_blank_prompt_row_is_zero():
    table = np.arange(12.0).reshape(3, 4)
    e = prompt_embed([0, 2, 1], table)
    assert np.array_equal(e[0], np.zeros(4))
    assert np.array_equal(e[1:], table[[2, 1]])
    with pytest.raises(IndexError):
        prompt_embed([3], table)


def _problem(cfg, rng, n=2, size=8):
    z = rng.normal(size=(n, 3, size, size))
    m = (rng.random((n, 1, size, size)) > 0.3).astype(float)
    return z, Conditions(m, rng.normal(size=(n, 3, size, size)) * m, np.array([1, 2])[:n])


def test_forward_shape_dtype_and_validation(rng):
    cfg = UNetConfig(channels=(8, 16), head_steps=10)
    s = build_linear_schedule(10)
    z, cond = _problem(cfg, rng)
    for dtype in (np.float32, np.float64):
        p = init_params(cfg, 0, dtype)
        out = unet_forward(z.astype(dtype), np.array([1, 10]), cond, p, cfg, s)
        assert out.shape == z.shape and out.dtype == dtype and np.all(np.isfinite(out))
    p = init_params(cfg, 0)
    with pytest.raises(DimensionError):
        unet_forward(z[:, :, :6, :6], np.array([1, 2]), cond, p, cfg, s)
    with pytest.raises(ValueError):
        unet_forward(z, np.array([0, 1]), cond, p, cfg, s)
    with pytest.raises(IndexError):
        unet_forward(z, np.array([1, 11]), cond, p, cfg, build_linear_schedule(20))


def test_forward_is_batch_independent(rng):
    cfg = UNetConfig(channels=(8, 16), head_steps=10)
    s = build_linear_schedule(10)
    p = init_params(cfg, 3)
    z, cond = _problem(cfg, rng)
    t = np.array([3, 7])
    both = unet_forward(z, t, cond, p, cfg, s)
    one = unet_forward(z[1:], t[1:], Conditions(cond.mask[1:], cond.latent[1:], cond.prompt[1:]), p, cfg, s)
    assert np.allclose(both[1:], one, atol=1e-12)


def test_init_is_deterministic_and_blank_row_zero():
    cfg = UNetConfig()
    a, b = init_params(cfg, 5), init_params(cfg, 5)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv_in.w"], init_params(cfg, 6)["conv_in.w"])
    assert np.all(a["prompt.table"][0] == 0)


@pytest.mark.parametrize("skips", [True, False])
@pytest.mark.parametrize("drop", [False, True])
def test_gradients_match_finite_differences(skips, drop):
    cfg = UNetConfig(channels=(8, 16), meb_skips=skips)
    r = check_gradients(cfg, seed=7, n_params=60, size=8, drop_prompts=drop)
    assert r.passed, (r.max_rel_error, r.worst_param)
    assert r.max_rel_error < REL_TOL


def test_meb_outer_annihilation(rng):
    p = MebParams.init(4, 3)
    p = MebParams(p.gamma_z_w, p.gamma_z_b, p.beta_z_w, p.beta_z_b,
                  p.gamma_m_w, np.zeros(4), p.beta_m_w, np.zeros(4))
    f = rng.normal(size=(1, 4, 6, 6))
    out = meb_modulate(f, rng.normal(size=(1, 3, 6, 6)), np.ones((1, 1, 6, 6)), p, skips=False)
    assert np.all(out == 0)


@given(st.integers(0, 2**31))
def test_nearest_known_fill_picks_a_closest_known_pixel(seed):
    from cycle3d.net.unet import nearest_known_fill
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 9, size=2)
    latent = rng.normal(size=(1, h, w, 2))
    mask = (rng.random((1, h, w, 1)) < 0.4).astype(float)
    out = nearest_known_fill(latent * mask, mask)[0]
    known = np.argwhere(mask[0, ..., 0] > 0.5)
    if len(known) == 0:
        assert np.all(out == 0)
        return
    for y in range(h):
        for x in range(w):
            d2 = ((known - [y, x]) ** 2).sum(axis=1)
            candidates = known[d2 == d2.min()]
            assert any(np.array_equal(out[y, x], latent[0, cy, cx]) for cy, cx in candidates)


@given(st.integers(0, 2**31))
def test_background_fill_matches_ring_oracle(seed):
    from cycle3d.net.unet import background_fill
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 9, size=2)
    latent = rng.normal(size=(1, h, w, 1))
    mask = (rng.random((1, h, w, 1)) < 0.4).astype(float)
    depth = rng.integers(1, 4, size=(1, h, w, 1)).astype(float) * mask
    out = background_fill(latent * mask, mask, depth)[0, ..., 0]
    ref = ring_fill(latent[0, ..., 0].tolist(), mask[0, ..., 0] > 0.5, depth[0, ..., 0].tolist())
    for y in range(h):
        for x in range(w):
            assert out[y, x] == (0.0 if ref[y][x] is None else ref[y][x])


def test_background_fill_takes_the_far_side_of_a_gap():
    from cycle3d.net.unet import background_fill
    latent = np.array([0.3, 0.0, -0.7]).reshape(1, 1, 3, 1)
    mask = np.array([1.0, 0.0, 1.0]).reshape(1, 1, 3, 1)
    near_left = background_fill(latent, mask, np.array([1.0, 0.0, 2.0]).reshape(1, 1, 3, 1))
    near_right = background_fill(latent, mask, np.array([2.0, 0.0, 1.0]).reshape(1, 1, 3, 1))
    assert near_left[0, 0, 1, 0] == -0.7 and near_right[0, 0, 1, 0] == 0.3


def test_depth_condition_shape_is_checked(rng):
    _, cond = _problem(UNetConfig(), rng, size=16)
    with pytest.raises(DimensionError):
        Conditions(cond.mask, cond.latent, cond.prompt, np.ones((2, 1, 8, 8)))


def test_fresh_network_predicts_zero_noise(rng):
    cfg = UNetConfig(head_steps=10)
    s = build_linear_schedule(10, 1e-3, 0.2)
    z, cond = _problem(cfg, rng, size=16)
    out = unet_forward(z, np.array([1, 10]), cond, init_params(cfg, 0), cfg, s)
    assert np.max(np.abs(out)) < 1e-9
