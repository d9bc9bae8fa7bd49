"""Masked Enhanced Block: two stacked spatially-adaptive modulations.

The first modulation scales and shifts the instance-normalised features with
convolutions of the masked-image latent; the second does the same with
convolutions of the occlusion mask::

    inner = gamma_z(z) * Norm(f) + beta_z(z)
    outer = gamma_m(m) * inner + beta_m(m)

With ``skips`` on, three residual adds wrap the block: ``Norm(f)`` is added to
the first modulation, the first layer's output to the second, and the block
input to the result.

``meb_forward``/``meb_backward`` work on NHWC arrays; ``meb_modulate`` takes NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import DimensionError
from .layers import conv_backward, conv_forward, norm_backward, norm_forward, to_nchw, to_nhwc

MEB_CONVS = ("gamma_z", "beta_z", "gamma_m", "beta_m")


@dataclass(frozen=True)
class MebParams:
    gamma_z_w: np.ndarray
    gamma_z_b: np.ndarray
    beta_z_w: np.ndarray
    beta_z_b: np.ndarray
    gamma_m_w: np.ndarray
    gamma_m_b: np.ndarray
    beta_m_w: np.ndarray
    beta_m_b: np.ndarray

    @classmethod
    def from_params(cls, params: dict, prefix: str) -> MebParams:
        kw = {}
        for conv in MEB_CONVS:
            kw[f"{conv}_w"] = params[f"{prefix}.{conv}.w"]
            kw[f"{conv}_b"] = params[f"{prefix}.{conv}.b"]
        return cls(**kw)

    @classmethod
    def init(cls, channels: int, cond_channels: int, kernel: int = 3) -> MebParams:
        """Identity modulation: gammas output 1, betas output 0."""
        zc = np.zeros((channels, cond_channels, kernel, kernel))
        zm = np.zeros((channels, 1, kernel, kernel))
        ones, zeros = np.ones(channels), np.zeros(channels)
        return cls(zc, ones, zc.copy(), zeros, zm, ones.copy(), zm.copy(), zeros.copy())

    def to_params(self, prefix: str) -> dict:
        return {f"{prefix}.{conv}.{k}": getattr(self, f"{conv}_{k}") for conv in MEB_CONVS for k in "wb"}


def meb_forward(f_prev, cond_latent, mask, p: MebParams, skips: bool = True, mask_modulation: bool = True):
    if cond_latent.shape[1:3] != f_prev.shape[1:3] or mask.shape[1:3] != f_prev.shape[1:3]:
        raise DimensionError(
            f"conditions {cond_latent.shape[1:3]}/{mask.shape[1:3]} not resized to features {f_prev.shape[1:3]}")
    n, ncache = norm_forward(f_prev)
    gz, cgz = conv_forward(cond_latent, p.gamma_z_w, p.gamma_z_b)
    bz, cbz = conv_forward(cond_latent, p.beta_z_w, p.beta_z_b)
    inner = gz * n + bz
    if skips:
        inner = inner + n
    if mask_modulation:
        gm, cgm = conv_forward(mask, p.gamma_m_w, p.gamma_m_b)
        bm, cbm = conv_forward(mask, p.beta_m_w, p.beta_m_b)
        outer = gm * inner + bm
    else:
        gm = cgm = cbm = None
        outer = inner
    if skips:
        outer = outer + inner
        out = f_prev + outer
    else:
        out = outer
    cache = (n, ncache, gz, cgz, cbz, inner, gm, cgm, cbm, skips, mask_modulation)
    return out, cache


def meb_backward(dout, cache):
    """Returns ``(d_f_prev, grads)`` with ``grads`` keyed by MebParams field name."""
    n, ncache, gz, cgz, cbz, inner, gm, cgm, cbm, skips, mask_modulation = cache
    grads = {}
    d_outer = dout
    d_inner = dout if skips else 0.0
    if mask_modulation:
        _, grads["gamma_m_w"], grads["gamma_m_b"] = conv_backward(d_outer * inner, cgm, need_dx=False)
        _, grads["beta_m_w"], grads["beta_m_b"] = conv_backward(d_outer, cbm, need_dx=False)
        d_inner = d_inner + d_outer * gm
    else:
        d_inner = d_inner + d_outer
    _, grads["gamma_z_w"], grads["gamma_z_b"] = conv_backward(d_inner * n, cgz, need_dx=False)
    _, grads["beta_z_w"], grads["beta_z_b"] = conv_backward(d_inner, cbz, need_dx=False)
    dn = d_inner * gz
    if skips:
        dn = dn + d_inner
    df = norm_backward(dn, ncache)
    if skips:
        df = df + dout
    if not mask_modulation:
        for conv in ("gamma_m", "beta_m"):
            grads[f"{conv}_w"] = None
            grads[f"{conv}_b"] = None
    return df, grads


def meb_modulate(f_prev, cond_latent, mask, p: MebParams, skips: bool = True, mask_modulation: bool = True):
    """NCHW features, latent (N,C,H,W) and mask (N,1,H,W) at the same resolution."""
    f_prev, cond_latent, mask = (np.asarray(a, dtype=np.float64) for a in (f_prev, cond_latent, mask))
    if f_prev.ndim != 4 or cond_latent.ndim != 4 or mask.ndim != 4:
        raise DimensionError("meb_modulate expects NCHW tensors")
    out, _ = meb_forward(to_nhwc(f_prev), to_nhwc(cond_latent), to_nhwc(mask), p, skips, mask_modulation)
    return to_nchw(out)
