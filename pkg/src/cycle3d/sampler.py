"""Guided ancestral sampling, autoregressive view rollout and two-stage out-animation.

A *model* here is any object exposing ``params``, ``net_config``, ``schedule``
and ``codec``: a :class:`~cycle3d.trainer.TrainResult` or a loaded
:class:`~cycle3d.io.Checkpoint` both qualify.  Sampling uses the model's
``ema_params`` when it has them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cyclegen import derive_rng
from .exceptions import ConfigurationError, DimensionError, SamplingDivergedError
from .frames import MaskedFrame, RgbdFrame
from .geometry import Intrinsics, Pose, pose_compose, pose_inverse
from .net.unet import Conditions, unet_forward
from .schedule import cfg_combine, posterior_step
from .warp import fill_depth_nearest, forward_warp


@dataclass(frozen=True)
class SamplerConfig:
    guidance_scale: float = 1.0
    seed: int = 0
    composite: bool = False
    prompt_id: int = 0
    clip_x0: float | None = 1.0

    def __post_init__(self):
        if not np.isfinite(self.guidance_scale) or self.guidance_scale < 0:
            raise ConfigurationError(f"guidance scale must be finite and >= 0, got {self.guidance_scale}")
        if self.prompt_id < 0:
            raise ConfigurationError("prompt_id must be >= 0")


@dataclass
class VideoRollout:
    """Frames ``V^0..V^n`` (RGB), the known-pixel mask each was sampled with, and
    the depth carried forward.  ``masks[0]`` is all ones: the start frame is given."""

    frames: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    depths: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)


def sampling_params(model):
    ema = getattr(model, "ema_params", None)
    return model.params if ema is None else ema


def _conditions(model, rendered: MaskedFrame, prompt_id: int) -> Conditions:
    codec = model.codec
    mask = codec.encode_mask(rendered.mask)[None]
    latent = codec.encode(rendered.rgb)[None] * mask
    return Conditions(mask, latent, np.array([prompt_id]), codec.encode_depth(rendered.depth)[None])


def sample_frame(model, rendered: MaskedFrame, cfg: SamplerConfig,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Inpaint the holes of ``rendered``; returns an (H, W, 3) image.

    Runs t = T..1 with guided noise ``eps_c + s (eps_c - eps_u)``, where the
    unconditional pass keeps mask and latent and swaps the prompt for the blank
    token.  Fresh noise is drawn at every step, including the last (unused)
    one, so the generator advances identically for every scale.
    """
    params = sampling_params(model)
    if cfg.prompt_id >= params["prompt.table"].shape[0]:
        raise ConfigurationError(f"prompt_id {cfg.prompt_id} not in the model's prompt table")
    h, w = rendered.mask.shape
    f = model.codec.factor
    if h % f or w % f:
        raise DimensionError(f"frame {h}x{w} not divisible by the codec factor {f}")
    rng = derive_rng(cfg.seed) if rng is None else rng
    sched = model.schedule
    cond = _conditions(model, rendered, cfg.prompt_id)
    uncond = cond.with_prompt(0)
    z = rng.standard_normal((1, 3, h // f, w // f))
    for t in range(sched.T, 0, -1):
        eps_c = unet_forward(z, t, cond, params, model.net_config, sched)
        if cfg.guidance_scale == 0:
            eps = np.asarray(eps_c, dtype=np.float64)
        else:
            eps_u = unet_forward(z, t, uncond, params, model.net_config, sched)
            eps = cfg_combine(eps_c, eps_u, cfg.guidance_scale)
        z = posterior_step(z, eps, t, rng.standard_normal(z.shape), sched, cfg.clip_x0)
        if not np.all(np.isfinite(z)):
            raise SamplingDivergedError(f"non-finite latent at step {t}")
    out = model.codec.decode(z[0])
    if cfg.composite:
        out = np.where(rendered.mask.astype(bool)[..., None], rendered.rgb, out)
    return out


def step_poses(trajectory: Sequence[Pose]) -> list:
    """Start-relative poses ``P_i`` to per-step moves ``P_i o P_{i-1}^-1``."""
    prev = Pose.identity()
    steps = []
    for p in trajectory:
        steps.append(pose_compose(p, pose_inverse(prev)))
        prev = p
    return steps


def sample_video(model, start: RgbdFrame, trajectory: Sequence[Pose], k: Intrinsics,
                 cfg: SamplerConfig) -> VideoRollout:
    """Render-then-inpaint rollout; ``trajectory[i]`` maps the start camera to camera ``i + 1``.

    Frame ``i + 1`` is drawn with generator ``(seed, i)`` and inherits the
    warped depth of frame ``i`` with holes filled from the nearest valid pixel.
    """
    out = VideoRollout([start.rgb], [np.ones(start.shape, dtype=np.uint8)], [start.depth])
    frame = start
    for i, step in enumerate(step_poses(trajectory)):
        rendered = forward_warp(frame, step, k)
        if not rendered.mask.any():
            raise SamplingDivergedError(f"frame {i + 1}: nothing of the previous frame is visible")
        rgb = sample_frame(model, rendered, cfg, derive_rng(cfg.seed, i))
        frame = RgbdFrame(rgb, fill_depth_nearest(rendered.depth))
        out.frames.append(rgb)
        out.masks.append(rendered.mask)
        out.depths.append(frame.depth)
    return out


def out_animate(objects: MaskedFrame, prompt_id: int, trajectory: Sequence[Pose], model_outpaint, model_3d,
                k: Intrinsics, cfg: SamplerConfig, depth: Optional[np.ndarray] = None) -> VideoRollout:
    """Outpaint a scene around the kept object pixels, then roll out a 3D video from it.

    ``depth`` is the depth of the outpainted first frame; without it the
    object's depth is extended by nearest fill.
    """
    stage1 = replace(cfg, prompt_id=prompt_id)
    v1 = sample_frame(model_outpaint, objects, stage1, derive_rng(cfg.seed))
    d1 = fill_depth_nearest(objects.depth) if depth is None else np.asarray(depth, dtype=np.float64)
    rollout = sample_video(model_3d, RgbdFrame(v1, d1), trajectory, k, stage1)
    rollout.masks[0] = objects.mask
    return rollout
