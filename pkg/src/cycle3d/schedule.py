"""Closed-form diffusion arithmetic: variance schedule, noising, guidance, reverse step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DimensionError

FULL_STEPS = 1000
TOY_STEPS = 100
BETA_START = 1e-4
BETA_END = 0.02
# The 1000-step endpoints over only 100 steps end at alpha_bar_T ~ 0.36, far
# from the N(0, I) start of sampling.  Scaling both by FULL_STEPS / TOY_STEPS
# keeps the integrated noise: alpha_bar_T ~ 2e-5 (vs 4e-5 for the full schedule).
TOY_BETA_START = BETA_START * FULL_STEPS / TOY_STEPS
TOY_BETA_END = BETA_END * FULL_STEPS / TOY_STEPS


@dataclass(frozen=True, eq=False)
class VarianceSchedule:
    """Tables indexed by step ``t`` in ``0..T``; index 0 holds alpha_bar_0 = 1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def _check_t(self, t: int) -> int:
        if int(t) != t or not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside 1..{self.T}")
        return int(t)

    def posterior_variance(self, t: int) -> float:
        t = self._check_t(t)
        return (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t]

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_linear_schedule(T: int = TOY_STEPS, beta_start: float = BETA_START, beta_end: float = BETA_END) -> VarianceSchedule:
    if int(T) != T or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.empty(T + 1)
    betas[0] = 0.0
    betas[1:] = np.linspace(beta_start, beta_end, T) if T > 1 else [beta_start]
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return VarianceSchedule(betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def schedule_from_dict(d: dict) -> VarianceSchedule:
    if d.get("kind", "linear") != "linear":
        raise ConfigurationError(f"unsupported schedule kind {d.get('kind')!r}")
    return build_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def q_sample(z0, t: int, eps, s: VarianceSchedule):
    """Noised latent sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    t = s._check_t(t)
    z0, eps = np.asarray(z0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    _same_shape(z0, eps, "q_sample")
    ab = s.alpha_bars[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def q_sample_batch(z0: np.ndarray, t: np.ndarray, eps: np.ndarray, s: VarianceSchedule) -> np.ndarray:
    """Per-item steps ``t`` (shape ``(N,)``) for NCHW batches."""
    _same_shape(z0, eps, "q_sample_batch")
    t = np.asarray(t)
    if t.min() < 1 or t.max() > s.T:
        raise IndexError(f"steps outside 1..{s.T}")
    ab = s.alpha_bars[t].reshape(-1, *([1] * (z0.ndim - 1)))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond, eps_uncond, scale: float):
    """Classifier-free guidance: eps_c + s (eps_c - eps_u)."""
    if scale < 0:
        raise ConfigurationError(f"guidance scale must be >= 0, got {scale}")
    eps_cond, eps_uncond = np.asarray(eps_cond, dtype=np.float64), np.asarray(eps_uncond, dtype=np.float64)
    _same_shape(eps_cond, eps_uncond, "cfg_combine")
    return eps_cond + scale * (eps_cond - eps_uncond)


def posterior_step(z_t, eps_hat, t: int, noise, s: VarianceSchedule, clip_x0: float | None = None):
    """One ancestral step z_t -> z_{t-1} with variance fixed to the posterior beta-tilde.

    With ``clip_x0`` the implied clean latent is clipped to ``[-clip_x0, clip_x0]``
    and the mean is taken as the q(z_{t-1} | z_t, z_0) mean at that estimate;
    without clipping both forms agree to rounding.
    """
    t = s._check_t(t)
    z_t, eps_hat, noise = (np.asarray(a, dtype=np.float64) for a in (z_t, eps_hat, noise))
    _same_shape(z_t, eps_hat, "posterior_step")
    _same_shape(z_t, noise, "posterior_step")
    alpha, ab = s.alphas[t], s.alpha_bars[t]
    if clip_x0 is None:
        mean = (z_t - (1.0 - alpha) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    else:
        x0 = np.clip((z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -clip_x0, clip_x0)
        ab_prev = s.alpha_bars[t - 1]
        mean = (np.sqrt(ab_prev) * s.betas[t] * x0 + np.sqrt(alpha) * (1.0 - ab_prev) * z_t) / (1.0 - ab)
    if t == 1:
        return mean
    return mean + np.sqrt(s.posterior_variance(t)) * noise


def epsilon_loss(eps, eps_hat) -> float:
    eps, eps_hat = np.asarray(eps, dtype=np.float64), np.asarray(eps_hat, dtype=np.float64)
    _same_shape(eps, eps_hat, "epsilon_loss")
    return float(np.mean((eps - eps_hat) ** 2))
