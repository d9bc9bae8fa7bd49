"""Self-supervised epsilon-prediction training on cycle-rendered or object-masked pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .codec import LatentCodec
from .cyclegen import DEFAULT_MAX_ROTATION, PoseSampleConfig, cycle_render, derive_rng, sample_pose
from .exceptions import ConfigurationError, TrainingDivergedError
from .frames import RgbdFrame, TrainingPair
from .geometry import Intrinsics, Pose
from .net.unet import Conditions, Params, UNetConfig, init_params, unet_backward, unet_forward_cached
from .scenes import object_mask
from .schedule import TOY_BETA_END, TOY_BETA_START, VarianceSchedule, build_linear_schedule, q_sample_batch
from .validation import check_probability
from .warp import apply_mask

log = logging.getLogger(__name__)

CONDITION_SOURCES = ("cycle", "object-mask")
# stream keys for derive_rng, so item draws and noise draws never collide
_ITEM_STREAM, _NOISE_STREAM = 0, 1


@dataclass(frozen=True)
class FrameRecord:
    """A source frame with its camera and scene-class prompt token."""

    frame: RgbdFrame
    intrinsics: Intrinsics
    prompt_id: int = 0


DatasetItem = Union[FrameRecord, TrainingPair]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 3e-4
    prompt_drop: float = 0.10
    seed: int = 0
    condition: str = "cycle"
    T: int = 100
    beta_start: float = TOY_BETA_START
    beta_end: float = TOY_BETA_END
    codec: str = "identity"
    max_rotation: float = DEFAULT_MAX_ROTATION
    checkpoint_every: int = 0
    checkpoint_path: Optional[str] = None
    dtype: str = "float32"
    ema_decay: float = 0.999

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"steps must be a positive integer, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        check_probability(self.prompt_drop, name="prompt_drop")
        if self.condition not in CONDITION_SOURCES:
            raise ConfigurationError(f"condition must be one of {CONDITION_SOURCES}, got {self.condition!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigurationError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")

    def schedule(self) -> VarianceSchedule:
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class Batch:
    z0: np.ndarray
    cond: Conditions
    pairs: list


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Params) -> AdamState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_update(params: Params, grads: Params, state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam step, applied to ``params`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def _pair_for(item: DatasetItem, condition: str, rng: np.random.Generator, pose: Optional[Pose],
              max_rotation: float) -> TrainingPair:
    if condition == "object-mask":
        frame = item.target if isinstance(item, TrainingPair) else item.frame
        m = object_mask(frame, rng)
        return TrainingPair(apply_mask(frame, m), frame, item.prompt_id)
    if isinstance(item, TrainingPair):
        return item
    if pose is None:
        pose = sample_pose(PoseSampleConfig.for_frame(item.frame, max_rotation=max_rotation), rng)
    return cycle_render(item.frame, pose, item.intrinsics, item.prompt_id)


def encode_pairs(pairs: Sequence[TrainingPair], codec: LatentCodec) -> tuple:
    """Targets to latents z0 and conditions to (mask, masked latent, prompt, known depth)."""
    z0 = np.stack([codec.encode(p.target.rgb) for p in pairs])
    mask = np.stack([codec.encode_mask(p.cond.mask) for p in pairs])
    latent = np.stack([codec.encode(p.cond.rgb) for p in pairs]) * mask
    prompt = np.array([p.prompt_id for p in pairs], dtype=np.int64)
    depth = np.stack([codec.encode_depth(p.cond.depth) for p in pairs])
    return z0, Conditions(mask, latent, prompt, depth)


def make_training_batch(dataset: Sequence[DatasetItem], cfg: TrainConfig, step: int = 0,
                        codec: Optional[LatentCodec] = None, pose: Optional[Pose] = None) -> Batch:
    """Items for ``step``; item ``i`` is drawn with generator ``(seed, 0, step, i)``.

    ``pose`` overrides the sampled cycle pose for frame records.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    codec = codec or LatentCodec(cfg.codec)
    pairs = []
    for i in range(cfg.batch_size):
        rng = derive_rng(cfg.seed, _ITEM_STREAM, step, i)
        item = dataset[int(rng.integers(len(dataset)))]
        pairs.append(_pair_for(item, cfg.condition, rng, pose, cfg.max_rotation))
    z0, cond = encode_pairs(pairs, codec)
    return Batch(z0, cond, pairs)


def train_step(params: Params, batch: Batch, schedule: VarianceSchedule, rng: np.random.Generator,
               opt_state: AdamState, net_cfg: UNetConfig, learning_rate: float = 1e-3,
               prompt_drop: float = 0.10, hook: Optional[Callable[[Conditions, np.ndarray], None]] = None):
    """Noise the batch, predict the noise, take one Adam step on ``params`` (in place).

    Returns ``(loss, grads, opt_state)``.  ``hook`` sees the conditions actually
    fed to the network and the sampled steps.
    """
    n = batch.z0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(batch.z0.shape)
    drop = rng.random(n) < prompt_drop
    cond = batch.cond.with_prompt(np.where(drop, 0, batch.cond.prompt))
    if hook is not None:
        hook(cond, t)
    z_t = q_sample_batch(batch.z0, t, eps, schedule)
    eps_hat, cache = unet_forward_cached(z_t, t, cond, params, net_cfg, schedule)
    diff = eps_hat - eps
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss}")
    grads = unet_backward(2.0 * diff / diff.size, cache, params, net_cfg)
    adam_update(params, grads, opt_state, learning_rate)
    return loss, grads, opt_state


@dataclass
class TrainResult:
    params: Params
    net_config: UNetConfig
    schedule: VarianceSchedule
    codec: LatentCodec
    opt_state: AdamState
    loss_trace: list = field(default_factory=list)
    step: int = 0
    ema_params: Optional[Params] = None

    def mean_loss(self, first: Optional[int] = None, last: Optional[int] = None) -> float:
        losses = [r["loss"] for r in self.loss_trace]
        if first is not None:
            losses = losses[:first]
        if last is not None:
            losses = losses[-last:]
        return float(np.mean(losses))


def ema_update(ema: Params, params: Params, decay: float) -> None:
    for k, v in params.items():
        e = ema[k]
        e *= decay
        e += (1.0 - decay) * v


def train_loop(dataset: Sequence[DatasetItem], cfg: TrainConfig, net_cfg: Optional[UNetConfig] = None,
               params: Optional[Params] = None, opt_state: Optional[AdamState] = None, start_step: int = 0,
               on_step: Optional[Callable[[int, float], None]] = None,
               ema_params: Optional[Params] = None) -> TrainResult:
    """Run steps ``start_step .. cfg.steps - 1``.

    Passing ``params``/``opt_state``/``ema_params``/``start_step`` from a
    checkpoint resumes a run; the per-step generators depend only on
    ``(seed, step)``, so a resumed run continues the same trajectory.  With
    ``cfg.ema_decay > 0`` an exponential moving average of the weights is
    kept for sampling.
    """
    from .io import save_checkpoint

    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    net_cfg = net_cfg or UNetConfig(head_steps=cfg.T)
    if net_cfg.x0_head and net_cfg.head_steps != cfg.T:
        raise ConfigurationError(f"network head is built for T={net_cfg.head_steps}, training uses T={cfg.T}")
    schedule = cfg.schedule()
    codec = LatentCodec(cfg.codec)
    dtype = np.dtype(cfg.dtype)
    if params is None:
        params = init_params(net_cfg, cfg.seed, dtype)
    else:
        params = {k: v.astype(dtype) for k, v in params.items()}
    if opt_state is None:
        opt_state = AdamState.zeros_like(params)
    else:
        opt_state = AdamState({k: v.astype(dtype) for k, v in opt_state.m.items()},
                              {k: v.astype(dtype) for k, v in opt_state.v.items()}, opt_state.step)
    if cfg.ema_decay > 0:
        ema_params = {k: (params if ema_params is None else ema_params)[k].astype(dtype, copy=True) for k in params}
    else:
        ema_params = None
    result = TrainResult(params, net_cfg, schedule, codec, opt_state, step=start_step, ema_params=ema_params)

    for step in range(start_step, cfg.steps):
        batch = make_training_batch(dataset, cfg, step, codec)
        rng = derive_rng(cfg.seed, _NOISE_STREAM, step)
        loss, _, _ = train_step(params, batch, schedule, rng, opt_state, net_cfg, cfg.learning_rate, cfg.prompt_drop)
        if ema_params is not None:
            ema_update(ema_params, params, cfg.ema_decay)
        result.loss_trace.append({"step": step, "loss": loss})
        result.step = step + 1
        if on_step is not None:
            on_step(step, loss)
        if step % 100 == 0:
            log.debug("step %d loss %.4f", step, loss)
        if cfg.checkpoint_every and cfg.checkpoint_path and result.step % cfg.checkpoint_every == 0:
            save_checkpoint(cfg.checkpoint_path, result)
    return result
