"""scikit-learn style wrappers around pair generation, training and sampling."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cyclegen import DEFAULT_MAX_ROTATION, derive_rng, make_cycle_pairs
from .frames import MaskedFrame, RgbdFrame, TrainingPair
from .geometry import Intrinsics
from .metrics import psnr
from .net.unet import UNetConfig
from .sampler import SamplerConfig, sample_frame
from .trainer import TrainConfig, train_loop


class CycleRenderer(BaseEstimator, TransformerMixin):
    """Turns RGBD frames into cycle-rendered training pairs.

    Stateless: ``fit`` only records the camera, taken from the first frame
    when ``intrinsics`` is None.
    """

    def __init__(self, n_pairs: Optional[int] = None, max_translation: Optional[float] = None,
                 max_rotation: float = DEFAULT_MAX_ROTATION, intrinsics: Optional[Intrinsics] = None,
                 prompt_id: int = 0, seed: int = 0):
        self.n_pairs = n_pairs
        self.max_translation = max_translation
        self.max_rotation = max_rotation
        self.intrinsics = intrinsics
        self.prompt_id = prompt_id
        self.seed = seed

    def fit(self, X: Sequence[RgbdFrame], y=None):
        if len(X) == 0:
            raise ValueError("need at least one frame")
        h, w = X[0].shape
        self.intrinsics_ = self.intrinsics or Intrinsics.default(w, h)
        return self

    def transform(self, X: Sequence[RgbdFrame]) -> list[TrainingPair]:
        check_is_fitted(self, "intrinsics_")
        n = len(X) if self.n_pairs is None else self.n_pairs
        return make_cycle_pairs(list(X), self.intrinsics_, n, self.seed, self.max_translation,
                                self.max_rotation, [self.prompt_id] * len(X))


class MaskedDiffusionInpainter(BaseEstimator):
    """Mask-conditioned diffusion inpainter.

    ``fit`` takes training pairs (or frame records for on-the-fly cycle
    rendering), ``predict`` fills the holes of masked frames and ``score``
    is the mean hole PSNR against reference images.
    """

    def __init__(self, steps: int = 2000, batch_size: int = 8, learning_rate: float = TrainConfig.learning_rate,
                 prompt_drop: float = 0.10, condition: str = "cycle", T: int = TrainConfig.T,
                 beta_start: float = TrainConfig.beta_start, beta_end: float = TrainConfig.beta_end,
                 channels: tuple = (16, 32, 64), mask_modulation: bool = True, meb_skips: bool = True,
                 n_prompts: int = 2, guidance_scale: float = 1.0, composite: bool = False, prompt_id: int = 0,
                 seed: int = 0):
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.prompt_drop = prompt_drop
        self.condition = condition
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.channels = channels
        self.mask_modulation = mask_modulation
        self.meb_skips = meb_skips
        self.n_prompts = n_prompts
        self.guidance_scale = guidance_scale
        self.composite = composite
        self.prompt_id = prompt_id
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           prompt_drop=self.prompt_drop, seed=self.seed, condition=self.condition, T=self.T,
                           beta_start=self.beta_start, beta_end=self.beta_end)

    def fit(self, X, y=None):
        net = UNetConfig(channels=tuple(self.channels), n_prompts=self.n_prompts,
                         mask_modulation=self.mask_modulation, meb_skips=self.meb_skips, head_steps=self.T)
        self.model_ = train_loop(list(X), self._train_config(), net)
        self.loss_curve_ = np.array([r["loss"] for r in self.model_.loss_trace])
        return self

    def predict(self, X: Sequence[MaskedFrame]) -> list[np.ndarray]:
        """Item ``i`` is sampled with generator ``(seed, i)``."""
        check_is_fitted(self, "model_")
        cfg = SamplerConfig(self.guidance_scale, self.seed, self.composite, self.prompt_id)
        return [sample_frame(self.model_, m, cfg, derive_rng(self.seed, i)) for i, m in enumerate(X)]

    def score(self, X: Sequence[MaskedFrame], y: Sequence[np.ndarray]) -> float:
        """Mean PSNR over the hole pixels; frames without holes are skipped."""
        vals = [psnr(p, t, m.mask == 0) for p, t, m in zip(self.predict(X), y, X) if (m.mask == 0).any()]
        return float(np.mean(vals)) if vals else math.inf
