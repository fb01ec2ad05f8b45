"""Forward diffusion, training objective, and DDPM/DDIM reverse samplers.

The forward process corrupts a clean latent video z_0 over T steps,

    q(z_t | z_{t-1}) = N(z_t; sqrt(1 - beta_t) z_{t-1}, beta_t I),

which composes into the closed form z_t = sqrt(abar_t) z_0 +
sqrt(1 - abar_t) eps with abar_t the running product of (1 - beta_i).
Reverse sampling either walks all T steps stochastically (DDPM, with the
variance fixed to sigma_t^2 = beta_t) or jumps along an evenly spaced
step subset deterministically (DDIM, eta = 0).

Schedule arithmetic is kept in float64 end to end; coefficients are
plain Python floats, so they downcast at the point where they multiply a
model-side tensor. The array operations are written against the common
numpy/torch surface (scalar *, +, .shape, .mean), so either array kind
works.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import torch

from .conditioning import ConditionBundle

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "add_noise",
    "training_loss",
    "ddpm_step",
    "ddim_step",
    "ddim_timesteps",
    "clamp_denoised_eps",
    "sample",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta values and the derived alpha / alpha-bar tables.

    Step indices are 1-based: ``betas[t - 1]`` is the variance of the
    t-th forward step, and ``alpha_bars[t - 1]`` the cumulative product
    of (1 - beta) through step t. Index 0 is reserved for the clean
    limit, ``alpha_bar(0) == 1``.
    """

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(
                f"step {t} outside [1, {self.num_steps}]"
            )


def build_schedule(
    num_steps: int,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` inclusive.

    The defaults are the canonical linear-schedule endpoints; they are
    exposed here (and in RunConfig) rather than hard-coded deeper in.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got "
            f"({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        num_steps=num_steps,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
    )


def _check_same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(
            f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def add_noise(z0, eps, t: int, sched: NoiseSchedule):
    """Closed-form forward diffusion: sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    _check_same_shape(z0, eps, "add_noise")
    ab = sched.alpha_bar(t)  # validates t
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def training_loss(eps_hat, eps) -> float:
    """Mean squared error between predicted and injected noise."""
    _check_same_shape(eps_hat, eps, "training_loss")
    return float(((eps_hat - eps) ** 2).mean())


def ddpm_step(eps_hat, z_t, t: int, noise, sched: NoiseSchedule):
    """One stochastic ancestral step from t to t-1.

    mu = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t),
    then mu + sqrt(beta_t) * noise. The variance is the fixed
    sigma_t^2 = beta_t choice; ``noise`` is ignored at t = 1 (and a
    ``None`` noise yields the deterministic mean at any t).
    """
    _check_same_shape(eps_hat, z_t, "ddpm_step")
    beta = sched.beta(t)
    alpha = sched.alpha(t)
    ab = sched.alpha_bar(t)
    mean = (z_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if t == 1 or noise is None:
        return mean
    _check_same_shape(noise, z_t, "ddpm_step noise")
    return mean + math.sqrt(beta) * noise


def ddim_step(
    eps_hat,
    z_t,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
    eta: float = 0.0,
    noise=None,
):
    """One (optionally stochastic) jump from step t down to t_prev.

    Predicts z0_hat from the noise estimate, then re-noises it to the
    t_prev level. With eta = 0 the map is deterministic; eta = 1 matches
    the forward-posterior variance. ``alpha_bar(0)`` is defined as 1, so
    t_prev = 0 lands on the clean prediction.
    """
    _check_same_shape(eps_hat, z_t, "ddim_step")
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    z0_hat = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(
        1.0 - ab_t / ab_p
    )
    out = (
        math.sqrt(ab_p) * z0_hat
        + math.sqrt(max(1.0 - ab_p - sigma * sigma, 0.0)) * eps_hat
    )
    if sigma > 0.0 and noise is not None:
        _check_same_shape(noise, z_t, "ddim_step noise")
        out = out + sigma * noise
    return out


def ddim_timesteps(num_steps: int, num_inference_steps: int) -> list[int]:
    """Evenly spaced descending step ladder from T down to 0 inclusive.

    Returns num_inference_steps + 1 integers; consecutive entries are
    the (t, t_prev) pairs of the accelerated reverse chain.
    """
    if not 1 <= num_inference_steps <= num_steps:
        raise ValueError(
            f"num_inference_steps must be in [1, {num_steps}], "
            f"got {num_inference_steps}"
        )
    ladder = np.linspace(num_steps, 0, num_inference_steps + 1)
    steps = [int(round(v)) for v in ladder]
    if len(set(steps)) != len(steps):
        raise ValueError(
            f"step ladder for ({num_steps}, {num_inference_steps}) "
            "collapses duplicate steps"
        )
    return steps


ModelFn = Callable[[torch.Tensor, int, ConditionBundle], torch.Tensor]


def clamp_denoised_eps(
    eps_hat, z_t, t: int, sched: NoiseSchedule, limit: float
):
    """Clamp the implied clean latent to [-limit, limit], re-expressed as eps.

    z0_hat = (z_t - sqrt(1-abar) eps_hat) / sqrt(abar) is clamped and the
    clamped value folded back: eps = (z_t - sqrt(abar) z0) / sqrt(1-abar).
    """
    ab = sched.alpha_bar(t)
    z0_hat = (z_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    z0_hat = z0_hat.clamp(-limit, limit)
    return (z_t - math.sqrt(ab) * z0_hat) / math.sqrt(1.0 - ab)


def _first_frame_active(cond: ConditionBundle) -> bool:
    return cond.first_frame_latent is not None and not cond.drop_first_frame


def _renoise_first_frame(
    z: torch.Tensor,
    cond: ConditionBundle,
    t: int,
    sched: NoiseSchedule,
    gen: torch.Generator,
) -> torch.Tensor:
    """Pin the conditioned frame: overwrite slot 0 with the clean latent
    noised to the current step level (exactly the clean latent at t=0)."""
    clean = cond.first_frame_latent.to(z.dtype)
    if t == 0:
        z[0] = clean
    else:
        eps = torch.randn(clean.shape, generator=gen, dtype=z.dtype)
        z[0] = add_noise(clean, eps, t, sched)
    return z


def sample(
    model: ModelFn,
    cond: ConditionBundle,
    sched: NoiseSchedule,
    sampler: str = "ddim",
    num_inference_steps: int = 50,
    seed: int = 0,
    eta: float = 0.0,
    guidance_scale: float = 1.0,
    clip_denoised: Optional[float] = None,
) -> torch.Tensor:
    """Run the full reverse chain from seeded Gaussian noise.

    ``model(z_t, t, cond)`` must return the noise estimate with the
    shape of ``z_t``. The latent shape (F, C_lat, h, w) is derived from
    the bundle. The sampler owns its random stream, so the result is a
    deterministic function of (weights, cond, settings, seed).

    When the bundle carries an (undropped) first-frame latent, frame 0
    is overwritten after every step with that latent re-noised to the
    step's level, which pins the final frame 0 to the condition exactly.

    ``guidance_scale != 1`` blends the conditional prediction with a
    fully-dropped one: eps = eps_u + s * (eps_c - eps_u).

    ``clip_denoised`` (off by default) clamps the implied clean-latent
    estimate to [-v, v] before each step and folds the clamp back into
    the noise estimate, which keeps imperfect models from driving the
    chain out of the data range.
    """
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {sampler!r}")
    num_frames = int(cond.driving_pose_maps.shape[0])
    latent_shape = (num_frames,) + tuple(cond.ref_latent.shape)
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(latent_shape, generator=gen, dtype=torch.float32)

    uncond = None
    if guidance_scale != 1.0:
        uncond = replace(cond, drop_ref=True, drop_first_frame=True)

    def predict(z_t: torch.Tensor, t: int) -> torch.Tensor:
        eps_hat = model(z_t, t, cond)
        _check_same_shape(eps_hat, z_t, "sample model output")
        if uncond is not None:
            eps_u = model(z_t, t, uncond)
            eps_hat = eps_u + guidance_scale * (eps_hat - eps_u)
        if clip_denoised:
            eps_hat = clamp_denoised_eps(eps_hat, z_t, t, sched, clip_denoised)
        return eps_hat

    conditioned = _first_frame_active(cond)
    if conditioned:
        z = _renoise_first_frame(z, cond, sched.num_steps, sched, gen)

    if sampler == "ddpm":
        if num_inference_steps != sched.num_steps:
            raise ValueError(
                "ddpm walks every schedule step; set num_inference_steps "
                f"to {sched.num_steps}"
            )
        for t in range(sched.num_steps, 0, -1):
            eps_hat = predict(z, t)
            noise = None
            if t > 1:
                noise = torch.randn(latent_shape, generator=gen, dtype=z.dtype)
            z = ddpm_step(eps_hat, z, t, noise, sched)
            if conditioned:
                z = _renoise_first_frame(z, cond, t - 1, sched, gen)
    else:
        ladder = ddim_timesteps(sched.num_steps, num_inference_steps)
        for t, t_prev in zip(ladder[:-1], ladder[1:]):
            eps_hat = predict(z, t)
            noise = None
            if eta > 0.0 and t_prev > 0:
                noise = torch.randn(latent_shape, generator=gen, dtype=z.dtype)
            z = ddim_step(eps_hat, z, t, t_prev, sched, eta=eta, noise=noise)
            if conditioned:
                z = _renoise_first_frame(z, cond, t_prev, sched, gen)
    return z
