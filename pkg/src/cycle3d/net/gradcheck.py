"""Central finite-difference verification of :func:`unet_backward`."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..schedule import build_linear_schedule, epsilon_loss
from .unet import Conditions, Params, UNetConfig, init_params, unet_backward, unet_forward, unet_forward_cached

FD_STEP = 1e-5
REL_TOL = 1e-4
# denominator floor, well above the ~1e-10 roundoff of a central difference at FD_STEP
ABS_FLOOR = 1e-6
GRADCHECK_T = 100


@dataclass
class GradcheckResult:
    name: str
    n_checked: int
    max_rel_error: float
    worst_param: str
    passed: bool


def random_params(cfg: UNetConfig, seed: int, jitter: float = 0.05) -> Params:
    """Initial parameters with every tensor perturbed, so no gradient path is dead.

    The output conv sees an un-normalised residual stream and the x0 head is
    amplified by sqrt(abar / (1 - abar)), so their jitter is divided by the
    fan-in; that keeps the loss O(1) and the difference quotients' roundoff
    far below ``ABS_FLOOR``.
    """
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    out = {}
    for k, v in params.items():
        scale = jitter / np.prod(v.shape[1:]) if k == "out.conv.w" else jitter
        if k.startswith("x0head."):
            scale = jitter / v.shape[-1]
        out[k] = v + rng.normal(0.0, scale, size=v.shape)
    out["prompt.table"][0] = 0.0
    return out


def random_problem(cfg: UNetConfig, seed: int, size: int = 16, batch: int = 2, T: int = GRADCHECK_T,
                   drop_prompts: bool = False):
    """A noised clean latent with a consistent masked condition.

    The target noise is independent of the one used for noising, so the
    residual stays O(1) without the network being trained.
    """
    rng = np.random.default_rng(seed + 1)
    z0 = rng.uniform(-1, 1, size=(batch, cfg.in_channels, size, size))
    t = rng.integers(1, T + 1, size=batch)
    ab = build_linear_schedule(T).alpha_bars[t][:, None, None, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * rng.normal(size=z0.shape)
    eps = rng.normal(size=z0.shape)
    mask = (rng.random((batch, 1, size, size)) > 0.3).astype(np.float64)
    latent = z0[:, :cfg.cond_channels] * mask
    prompt = rng.integers(1, cfg.n_prompts + 1, size=batch)
    if drop_prompts:
        prompt[0] = 0
    depth = rng.uniform(1.0, 3.0, size=mask.shape)
    return z_t, t, Conditions(mask, latent, prompt, depth), eps


def _loss(z_t, t, cond, eps, params, cfg, schedule):
    return epsilon_loss(eps, unet_forward(z_t, t, cond, params, cfg, schedule))


def check_gradients(cfg: UNetConfig, seed: int = 0, n_params: int = 100, size: int = 16,
                    drop_prompts: bool = False, name: str = "") -> GradcheckResult:
    params = random_params(cfg, seed)
    z_t, t, cond, eps = random_problem(cfg, seed, size=size, drop_prompts=drop_prompts)
    schedule = build_linear_schedule(GRADCHECK_T)
    eps_hat, cache = unet_forward_cached(z_t, t, cond, params, cfg, schedule)
    grads = unet_backward(2.0 * (eps_hat - eps) / eps.size, cache, params, cfg)

    rng = np.random.default_rng(seed + 2)
    names = [k for k in params if not (k.startswith("down") and ".meb." in k and "_m." in k and not cfg.mask_modulation)]
    picks = [(k, int(rng.integers(params[k].size))) for k in names]
    sizes = np.array([params[k].size for k in names], dtype=np.float64)
    while len(picks) < n_params:
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((k, int(rng.integers(params[k].size))))

    worst, worst_name = 0.0, ""
    for k, idx in picks:
        flat = params[k].reshape(-1)
        if k == "prompt.table" and idx < params[k].shape[1]:
            continue  # blank row is pinned to zero
        orig = flat[idx]
        flat[idx] = orig + FD_STEP
        lp = _loss(z_t, t, cond, eps, params, cfg, schedule)
        flat[idx] = orig - FD_STEP
        lm = _loss(z_t, t, cond, eps, params, cfg, schedule)
        flat[idx] = orig
        numeric = (lp - lm) / (2 * FD_STEP)
        analytic = grads[k].reshape(-1)[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)
        if rel > worst:
            worst, worst_name = rel, f"{k}[{idx}]"
    return GradcheckResult(name, len(picks), worst, worst_name, worst < REL_TOL)


GRADCHECK_CONFIGS = {
    "skips_on/drop_off": (dict(meb_skips=True), False),
    "skips_off/drop_off": (dict(meb_skips=False), False),
    "skips_on/drop_on": (dict(meb_skips=True), True),
    "skips_off/drop_on": (dict(meb_skips=False), True),
}


def run_gradcheck_suite(seed: int = 0, n_params: int = 100, size: int = 16,
                        base: UNetConfig | None = None) -> list[GradcheckResult]:
    base = base or UNetConfig()
    results = []
    for name, (overrides, drop) in GRADCHECK_CONFIGS.items():
        cfg = replace(base, **overrides)
        results.append(check_gradients(cfg, seed, n_params, size, drop, name))
    return results
