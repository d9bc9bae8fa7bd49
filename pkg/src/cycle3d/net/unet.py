"""Toy M-UNet noise predictor with hand-written reverse mode.

Layout for the default channel plan ``(16, 32, 64)``::

    conv_in 3->16
    down0: resblock 16->16, MEB, [skip0], stride-2 conv 16->32
    down1: resblock 32->32, MEB, [skip1], stride-2 conv 32->64
    mid:   resblock 64->64
    up1:   upsample, concat skip1, resblock 96->32
    up0:   upsample, concat skip0, resblock 48->16
    out:   SiLU, conv 16->3

The timestep MLP output plus the prompt embedding is projected into every
resblock.  Parameters live in a flat ``dict[str, ndarray]``; the network runs
in the parameters' dtype.  Inputs and outputs are NCHW, internals are NHWC.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.special import expit

from ..exceptions import ConfigurationError, DimensionError
from .layers import (
    conv_backward,
    conv_forward,
    downsample_bilinear,
    downsample_nearest,
    linear_backward,
    linear_forward,
    norm_backward,
    norm_forward,
    silu_backward,
    silu_forward,
    to_nchw,
    to_nhwc,
    upsample2x,
    upsample2x_backward,
)
from .meb import MebParams, meb_backward, meb_forward

Params = dict  # name -> ndarray


@dataclass(frozen=True)
class UNetConfig:
    channels: tuple = (16, 32, 64)
    in_channels: int = 3
    cond_channels: int = 3
    n_prompts: int = 2
    time_dim: int = 32
    emb_dim: int = 64
    meb_skips: bool = True
    mask_modulation: bool = True
    block_norm: bool = False
    x0_head: bool = True
    head_gate: bool = True
    head_steps: int = 100

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2:
            raise ValueError("need at least two resolution levels")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ValueError("time_dim must be an even integer >= 2")

    @property
    def levels(self) -> int:
        return len(self.channels) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class Conditions:
    """Per-item conditioning: occlusion mask (N,1,H,W), masked latent (N,C,H,W),
    prompt ids (N,) and optionally the known depth (N,1,H,W), used only to fill
    holes from the far side."""

    mask: np.ndarray
    latent: np.ndarray
    prompt: np.ndarray = field(default=None)
    depth: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.latent = np.asarray(self.latent, dtype=np.float64)
        n = self.latent.shape[0]
        self.prompt = np.zeros(n, dtype=np.int64) if self.prompt is None else np.asarray(self.prompt, dtype=np.int64).reshape(n)
        if self.depth is not None:
            if np.shape(self.depth) != self.mask.shape:
                raise DimensionError(f"condition depth shape {np.shape(self.depth)} does not match mask {self.mask.shape}")
            self.depth = np.nan_to_num(np.asarray(self.depth, dtype=np.float64)) * self.mask

    def with_prompt(self, prompt) -> Conditions:
        prompt = np.broadcast_to(np.asarray(prompt, dtype=np.int64), self.prompt.shape).copy()
        return Conditions(self.mask, self.latent, prompt, self.depth)


def _he(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_params(cfg: UNetConfig, seed: int = 0, dtype=np.float64) -> Params:
    """He-normal kernels, zero biases, identity MEB modulation, zero output conv
    and an x0 head that starts at zero predicted noise.

    Values are drawn in float64 and then cast, so the float32 and float64
    parameter sets of one seed agree to single precision.
    """
    rng = np.random.default_rng(seed)
    ch = cfg.channels
    p: Params = {}

    def conv(name, cout, cin, k=3):
        p[f"{name}.w"] = _he(rng, (cout, cin, k, k))
        p[f"{name}.b"] = np.zeros(cout)

    def resblock(prefix, cin, cout):
        conv(f"{prefix}.conv1", cout, cin)
        p[f"{prefix}.emb.w"] = rng.normal(0.0, math.sqrt(1.0 / cfg.emb_dim), size=(cfg.emb_dim, cout))
        p[f"{prefix}.emb.b"] = np.zeros(cout)
        conv(f"{prefix}.conv2", cout, cout)
        if cin != cout:
            conv(f"{prefix}.skip", cout, cin, k=1)

    conv("conv_in", ch[0], cfg.in_channels)
    p["temb.l1.w"] = rng.normal(0.0, math.sqrt(2.0 / cfg.time_dim), size=(cfg.time_dim, cfg.emb_dim))
    p["temb.l1.b"] = np.zeros(cfg.emb_dim)
    p["temb.l2.w"] = rng.normal(0.0, math.sqrt(2.0 / cfg.emb_dim), size=(cfg.emb_dim, cfg.emb_dim))
    p["temb.l2.b"] = np.zeros(cfg.emb_dim)
    table = rng.normal(0.0, 1.0, size=(cfg.n_prompts + 1, cfg.emb_dim))
    table[0] = 0.0
    p["prompt.table"] = table
    for lvl in range(cfg.levels):
        resblock(f"down{lvl}.res", ch[lvl], ch[lvl])
        p.update(MebParams.init(ch[lvl], cfg.cond_channels).to_params(f"down{lvl}.meb"))
        conv(f"down{lvl}.down", ch[lvl + 1], ch[lvl])
    resblock("mid.res", ch[-1], ch[-1])
    for lvl in reversed(range(cfg.levels)):
        resblock(f"up{lvl}.res", ch[lvl + 1] + ch[lvl], ch[lvl])
    p["out.conv.w"] = np.zeros((cfg.in_channels, ch[0], 3, 3))
    p["out.conv.b"] = np.zeros(cfg.in_channels)
    if cfg.x0_head:
        c, gd = cfg.in_channels, _head_features_dim(cfg)
        rows = c * _head_branches(cfg)
        p["x0head.w"] = np.zeros((cfg.emb_dim, rows * gd))
        b = np.zeros((rows, gd))
        # x0 = z_t / sqrt(abar) maps to zero noise, so a fresh network predicts eps = 0;
        # the gated branch starts at zero
        b[:c, :c] = np.eye(c)
        p["x0head.b"] = b.reshape(-1)
        p["x0head.table"] = np.zeros((cfg.head_steps + 1, rows * gd))
        if cfg.head_gate:
            conv("gate.conv", 1, ch[0])
    return {k: v.astype(dtype) for k, v in p.items()}


def param_shapes(cfg: UNetConfig) -> dict:
    return {k: v.shape for k, v in init_params(cfg).items()}


# ---------------------------------------------------------------- embeddings

def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _temb_forward(s, params):
    h, c1 = linear_forward(s, params["temb.l1.w"], params["temb.l1.b"])
    a, cs = silu_forward(h)
    e, c2 = linear_forward(a, params["temb.l2.w"], params["temb.l2.b"])
    return e, (c1, cs, c2)


def timestep_embed(t, params: Params, dim: Optional[int] = None) -> np.ndarray:
    """Sinusoidal features of step ``t`` passed through the two-layer MLP."""
    if np.any(np.asarray(t) < 1):
        raise ValueError("timesteps start at 1")
    dim = params["temb.l1.w"].shape[0] if dim is None else dim
    return _temb_forward(sinusoidal_embedding(t, dim).astype(params["temb.l1.w"].dtype), params)[0]


def prompt_embed(prompt_id, table: np.ndarray) -> np.ndarray:
    ids = np.asarray(prompt_id, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise IndexError(f"prompt id out of range 0..{table.shape[0] - 1}")
    out = table[ids]
    # row 0 is the blank prompt regardless of stored values
    return np.where((ids == 0)[..., None], np.zeros((), table.dtype), out)


# ---------------------------------------------------------------- blocks

def _resblock_forward(x, emb_act, params, prefix, use_norm):
    h0, cn1 = norm_forward(x) if use_norm else (x, None)
    h1, cs1 = silu_forward(h0)
    h2, cc1 = conv_forward(h1, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
    e, ce = linear_forward(emb_act, params[f"{prefix}.emb.w"], params[f"{prefix}.emb.b"])
    # added after the norm: a per-channel constant before it would be normalised away
    h3, cn2 = norm_forward(h2) if use_norm else (h2, None)
    h4 = h3 + e[:, None, None, :]
    h5, cs2 = silu_forward(h4)
    h6, cc2 = conv_forward(h5, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"])
    if f"{prefix}.skip.w" in params:
        sk, csk = conv_forward(x, params[f"{prefix}.skip.w"], params[f"{prefix}.skip.b"])
    else:
        sk, csk = x, None
    return sk + h6, (cn1, cs1, cc1, ce, cn2, cs2, cc2, csk)


def _resblock_backward(dout, cache, prefix, grads):
    cn1, cs1, cc1, ce, cn2, cs2, cc2, csk = cache
    dh5, grads[f"{prefix}.conv2.w"], grads[f"{prefix}.conv2.b"] = conv_backward(dout, cc2)
    dh4 = silu_backward(dh5, cs2)
    demb, grads[f"{prefix}.emb.w"], grads[f"{prefix}.emb.b"] = linear_backward(dh4.sum(axis=(1, 2)), ce)
    dh2 = dh4 if cn2 is None else norm_backward(dh4, cn2)
    dh1, grads[f"{prefix}.conv1.w"], grads[f"{prefix}.conv1.b"] = conv_backward(dh2, cc1)
    dx = silu_backward(dh1, cs1)
    if cn1 is not None:
        dx = norm_backward(dx, cn1)
    if csk is not None:
        dsk, grads[f"{prefix}.skip.w"], grads[f"{prefix}.skip.b"] = conv_backward(dout, csk)
        dx = dx + dsk
    else:
        dx = dx + dout
    return dx, demb


def _head_features_dim(cfg: UNetConfig) -> int:
    return cfg.in_channels + 3 * cfg.cond_channels + 2


def _head_branches(cfg: UNetConfig) -> int:
    return 2 if cfg.head_gate else 1


def nearest_known_fill(latent, mask):
    """NHWC latent with every hole set to its nearest known pixel (Euclidean,
    scipy's tie order); items without known pixels stay zero."""
    out = np.zeros_like(latent)
    for i in range(len(latent)):
        holes = mask[i, ..., 0] < 0.5
        if holes.all():
            continue
        if not holes.any():
            out[i] = latent[i]
            continue
        iy, ix = distance_transform_edt(holes, return_distances=False, return_indices=True)
        out[i] = latent[i][iy, ix]
    return out


_RING = ((-1, 0), (1, 0), (0, -1), (0, 1))


def background_fill(latent, mask, depth):
    """NHWC latent with holes grown in from known pixels one ring at a time;
    each new pixel copies the filled 4-neighbour of largest depth (first in
    up, down, left, right order on ties).  Disocclusions show what lies
    behind, so the far side is the better guess."""
    n, h, w, _ = latent.shape
    val = latent * mask
    dep = np.where(mask[..., 0] > 0.5, depth[..., 0], -np.inf)
    done = mask[..., 0] > 0.5
    for _ in range(h + w):
        if done.all():
            break
        pv = np.pad(val, ((0, 0), (1, 1), (1, 1), (0, 0)))
        pd = np.pad(dep, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
        cand_d = np.stack([pd[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _RING])
        cand_v = np.stack([pv[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w] for dy, dx in _RING])
        new = np.isfinite(cand_d).any(axis=0) & ~done
        if not new.any():
            break
        pick = np.argmax(cand_d, axis=0)
        val = np.where(new[..., None], np.take_along_axis(cand_v, pick[None, ..., None], axis=0)[0], val)
        dep = np.where(new, np.take_along_axis(cand_d, pick[None], axis=0)[0], dep)
        done |= new
    return val


def _head_features(z_scaled, latent, mask, depth=None):
    """Per-pixel NHWC features: z_t / sqrt(abar), masked latent, mask, the holes
    filled from known pixels (far side first when depth is given, else the
    nearest), the holes filled with the known mean, and a constant."""
    hole = 1.0 - mask
    known = mask.sum(axis=(1, 2), keepdims=True)
    lat_mean = latent.sum(axis=(1, 2), keepdims=True) / np.maximum(known, 1.0)
    one = np.ones(mask.shape, dtype=z_scaled.dtype)
    fill = nearest_known_fill(latent, mask) if depth is None else background_fill(latent, mask, depth)
    return np.concatenate([z_scaled, latent, mask, hole * fill, hole * lat_mean, one],
                          axis=-1)


def resize_conditions(latent, mask, factor: int):
    """NHWC latent by bilinear halving, mask by nearest sampling."""
    return downsample_bilinear(latent, factor), downsample_nearest(mask, factor)


# ---------------------------------------------------------------- network

def _check_inputs(z_t, t, cond: Conditions, cfg: UNetConfig):
    if z_t.ndim != 4 or z_t.shape[1] != cfg.in_channels:
        raise DimensionError(f"z_t must be (N, {cfg.in_channels}, H, W), got {z_t.shape}")
    n, _, h, w = z_t.shape
    div = 2 ** cfg.levels
    if h % div or w % div:
        raise DimensionError(f"spatial size {h}x{w} must be divisible by {div}")
    if cond.latent.shape != (n, cfg.cond_channels, h, w):
        raise DimensionError(f"condition latent shape {cond.latent.shape} does not match z_t {z_t.shape}")
    if cond.mask.shape != (n, 1, h, w):
        raise DimensionError(f"condition mask shape {cond.mask.shape} does not match z_t {z_t.shape}")
    if cond.depth is not None and cond.depth.shape != (n, 1, h, w):
        raise DimensionError(f"condition depth shape {cond.depth.shape} does not match z_t {z_t.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    if t.min() < 1:
        raise ValueError("timesteps start at 1")
    return t


def _alpha_bars(schedule, t) -> np.ndarray:
    if schedule is None:
        raise ConfigurationError("this network's x0 head needs the noise schedule")
    if t.max() > schedule.T:
        raise IndexError(f"step {t.max()} beyond the schedule's T={schedule.T}")
    return schedule.alpha_bars[t]


def unet_forward_cached(z_t, t, cond: Conditions, params: Params, cfg: UNetConfig, schedule=None):
    dtype = params["conv_in.w"].dtype
    z_t = np.asarray(z_t)
    t = _check_inputs(z_t, t, cond, cfg)
    cache = {}
    z = to_nhwc(z_t.astype(dtype, copy=False))
    latent = to_nhwc(cond.latent.astype(dtype, copy=False))
    mask = to_nhwc(cond.mask.astype(dtype, copy=False))

    sin = sinusoidal_embedding(t, cfg.time_dim).astype(dtype)
    temb, cache["temb"] = _temb_forward(sin, params)
    emb = temb + prompt_embed(cond.prompt, params["prompt.table"])
    emb_act, cache["emb_act"] = silu_forward(emb)

    x, cache["conv_in"] = conv_forward(z, params["conv_in.w"], params["conv_in.b"])
    skips = []
    for lvl in range(cfg.levels):
        x, cache[f"down{lvl}.res"] = _resblock_forward(x, emb_act, params, f"down{lvl}.res", cfg.block_norm)
        lat, msk = resize_conditions(latent, mask, 2 ** lvl)
        meb = MebParams.from_params(params, f"down{lvl}.meb")
        x, cache[f"down{lvl}.meb"] = meb_forward(x, lat, msk, meb, cfg.meb_skips, cfg.mask_modulation)
        skips.append(x)
        x, cache[f"down{lvl}.down"] = conv_forward(x, params[f"down{lvl}.down.w"], params[f"down{lvl}.down.b"], stride=2)
    x, cache["mid.res"] = _resblock_forward(x, emb_act, params, "mid.res", cfg.block_norm)
    for lvl in reversed(range(cfg.levels)):
        x = np.concatenate([upsample2x(x), skips[lvl]], axis=-1)
        x, cache[f"up{lvl}.res"] = _resblock_forward(x, emb_act, params, f"up{lvl}.res", cfg.block_norm)
    # no norm in the head: it would strip the per-channel mean of eps, an error
    # the reverse chain amplifies by 1/sqrt(alpha_bar_T)
    h, cache["out.silu"] = silu_forward(x)
    eps, cache["out.conv"] = conv_forward(h, params["out.conv.w"], params["out.conv.b"])
    if cfg.x0_head:
        # A per-pixel linear estimate of the clean latent, mapped to noise with
        # the schedule, carries whatever a fixed blend of inputs can explain;
        # the conv path adds a zero-mean residual.  Without it the conv path
        # must reproduce the conditioning through the 1/sqrt(abar) gain and
        # barely learns the spatial mean (one mode in H*W).  The blend weights
        # get a per-step table on top of the embedding term: near t = 1 the
        # head's error is amplified by sqrt(abar / (1 - abar)) ~ 30.
        ab = _alpha_bars(schedule, t).astype(dtype)[:, None, None, None]
        depth = None if cond.depth is None else to_nhwc(cond.depth.astype(dtype, copy=False))
        g = _head_features(z / np.sqrt(ab), latent, mask, depth)
        n, hh, ww, gd = g.shape
        table = params["x0head.table"]
        if t.max() >= table.shape[0]:
            raise IndexError(f"step {t.max()} beyond the head's table of {table.shape[0] - 1} steps")
        a = linear_forward(emb_act, params["x0head.w"], params["x0head.b"])[0] + table[t]
        a = a.reshape(n, -1, gd)
        x0_lin = (g.reshape(n, -1, gd) @ a.transpose(0, 2, 1)).reshape(n, hh, ww, -1)
        gate = None
        if cfg.head_gate:
            # a per-pixel switch onto a second blend, e.g. where the nearest known
            # pixel belongs to another surface
            logit, cache["gate.conv"] = conv_forward(h, params["gate.conv.w"], params["gate.conv.b"])
            gate = expit(logit)
            c = cfg.in_channels
            x0_lin, x0_alt = x0_lin[..., :c], x0_lin[..., c:]
            x0_lin = x0_lin + gate * x0_alt
            gate = (gate, x0_alt)
        eps = eps - eps.mean(axis=(1, 2), keepdims=True) + (z - np.sqrt(ab) * x0_lin) / np.sqrt(1.0 - ab)
        cache["x0head"] = (g, emb_act, ab, t, gate)
    cache["prompt"] = cond.prompt
    return to_nchw(eps), cache


def unet_forward(z_t, t, cond: Conditions, params: Params, cfg: UNetConfig, schedule=None) -> np.ndarray:
    """Predicted noise for ``z_t`` at steps ``t``; ``schedule`` is required with ``cfg.x0_head``."""
    return unet_forward_cached(z_t, t, cond, params, cfg, schedule)[0]


def unet_backward(d_eps, cache, params: Params, cfg: UNetConfig) -> Params:
    """Gradients of a scalar loss, given its gradient w.r.t. the predicted noise."""
    grads: Params = {}
    d_eps = to_nhwc(np.asarray(d_eps, dtype=params["conv_in.w"].dtype))
    demb = np.zeros((d_eps.shape[0], cfg.emb_dim), dtype=d_eps.dtype)
    if cfg.x0_head:
        g, emb_act, ab, t, gate = cache["x0head"]
        n = len(g)
        d_x0 = -np.sqrt(ab) / np.sqrt(1.0 - ab) * d_eps
        d_rows = d_x0
        if gate is not None:
            s, x0_alt = gate
            d_rows = np.concatenate([d_x0, s * d_x0], axis=-1)
            d_logit = (d_x0 * x0_alt).sum(axis=-1, keepdims=True) * s * (1.0 - s)
            dh_gate, grads["gate.conv.w"], grads["gate.conv.b"] = conv_backward(d_logit, cache["gate.conv"])
        da = (d_rows.reshape(n, -1, d_rows.shape[-1]).transpose(0, 2, 1) @ g.reshape(n, -1, g.shape[-1])).reshape(n, -1)
        demb_h, grads["x0head.w"], grads["x0head.b"] = linear_backward(da, (emb_act, params["x0head.w"]))
        grads["x0head.table"] = np.zeros_like(params["x0head.table"])
        np.add.at(grads["x0head.table"], t, da)
        demb += demb_h
        d_eps = d_eps - d_eps.mean(axis=(1, 2), keepdims=True)
    dx, grads["out.conv.w"], grads["out.conv.b"] = conv_backward(d_eps, cache["out.conv"])
    if cfg.x0_head and cfg.head_gate:
        dx = dx + dh_gate
    dx = silu_backward(dx, cache["out.silu"])
    dskips = [None] * cfg.levels
    for lvl in range(cfg.levels):
        dx, de = _resblock_backward(dx, cache[f"up{lvl}.res"], f"up{lvl}.res", grads)
        demb += de
        c_up = cfg.channels[lvl + 1]
        dskips[lvl] = dx[..., c_up:]
        dx = upsample2x_backward(dx[..., :c_up])
    dx, de = _resblock_backward(dx, cache["mid.res"], "mid.res", grads)
    demb += de
    for lvl in reversed(range(cfg.levels)):
        dx, grads[f"down{lvl}.down.w"], grads[f"down{lvl}.down.b"] = conv_backward(dx, cache[f"down{lvl}.down"])
        dx = dx + dskips[lvl]
        dx, mgrads = meb_backward(dx, cache[f"down{lvl}.meb"])
        for k, g in mgrads.items():
            conv, wb = k.rsplit("_", 1)
            name = f"down{lvl}.meb.{conv}.{wb}"
            grads[name] = np.zeros_like(params[name]) if g is None else g
        dx, de = _resblock_backward(dx, cache[f"down{lvl}.res"], f"down{lvl}.res", grads)
        demb += de
    _, grads["conv_in.w"], grads["conv_in.b"] = conv_backward(dx, cache["conv_in"], need_dx=False)

    demb = silu_backward(demb, cache["emb_act"])
    dtable = np.zeros_like(params["prompt.table"])
    np.add.at(dtable, cache["prompt"], demb)
    dtable[0] = 0.0
    grads["prompt.table"] = dtable
    c1, cs, c2 = cache["temb"]
    da, grads["temb.l2.w"], grads["temb.l2.b"] = linear_backward(demb, c2)
    _, grads["temb.l1.w"], grads["temb.l1.b"] = linear_backward(silu_backward(da, cs), c1)
    return {k: grads[k] for k in params}
