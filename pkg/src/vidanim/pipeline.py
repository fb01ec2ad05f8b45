"""Glue between data-space objects and the tensor-space model.

Builds models from a run configuration, turns (reference image,
reference pose, driving poses) into condition bundles with rendered
pose maps and encoded latents, and runs single-segment animation end to
end (alignment happens at the CLI layer so library callers can pass
pre-aligned sequences).
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch

from .conditioning import (
    ConditionBundle,
    denormalize_latent,
    latent_decode,
    latent_encode,
    normalize_latent,
)
from .config import RunConfig
from .denoiser import AnimationModel
from .diffusion import NoiseSchedule, build_schedule, sample
from .motion import Pose, PoseSequence, render_pose_map

__all__ = [
    "build_model",
    "make_schedule",
    "make_condition_bundle",
    "animate",
    "decode_video",
]


def build_model(config: RunConfig) -> AnimationModel:
    """Construct the model with a seeded, reproducible initialization."""
    torch.manual_seed(config.seed)
    return AnimationModel(
        reduction=config.reduction,
        stem_channels=config.stem_channels,
        pose_channels=config.pose_channels,
        ctx_dim=config.context_dim,
        channel_mult=config.channel_mult,
        temporal_kind=config.temporal_block,
        state_size=config.state_size,
        num_heads=config.num_heads,
        mamba_expand=config.mamba_expand,
        max_frames=config.max_frames,
        num_steps=config.diffusion_steps,
        use_reference_pose=config.use_reference_pose,
        latent_scale=config.latent_scale,
    )


def make_schedule(config: RunConfig) -> NoiseSchedule:
    return build_schedule(
        config.diffusion_steps, config.beta_start, config.beta_end
    )


def _image_tensor(image) -> torch.Tensor:
    if torch.is_tensor(image):
        return image.float()
    return torch.from_numpy(np.ascontiguousarray(image)).float()


def make_condition_bundle(
    ref_image,
    ref_pose: Pose,
    driving: PoseSequence,
    reduction: int = 4,
    latent_scale: float = 4.0,
    first_frame_latent: Optional[torch.Tensor] = None,
) -> ConditionBundle:
    """Render pose maps and encode the reference into a bundle.

    ``driving`` is used as given; align it to the reference pose first
    when it comes from a foreign skeleton. Latents are produced in the
    normalized diffusion space; a provided first-frame latent must
    already live there.
    """
    ref_t = _image_tensor(ref_image)
    height, width = ref_t.shape[-2:]
    ref_map = torch.from_numpy(render_pose_map(ref_pose, height, width))
    maps = torch.stack(
        [torch.from_numpy(render_pose_map(p, height, width)) for p in driving]
    )
    return ConditionBundle(
        ref_latent=normalize_latent(latent_encode(ref_t, reduction), latent_scale),
        ref_pose_map=ref_map,
        driving_pose_maps=maps,
        ref_image=ref_t,
        first_frame_latent=first_frame_latent,
    )


def animate(
    model: AnimationModel,
    sched: NoiseSchedule,
    ref_image,
    ref_pose: Pose,
    driving: PoseSequence,
    seed: int = 0,
    sampler: str = "ddim",
    num_inference_steps: int = 50,
    eta: float = 0.0,
    guidance_scale: float = 1.0,
    clip_denoised: Optional[float] = None,
    first_frame_latent: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Generate one segment of latents for a driving sequence."""
    cond = make_condition_bundle(
        ref_image,
        ref_pose,
        driving,
        reduction=model.reduction,
        latent_scale=model.latent_scale,
        first_frame_latent=first_frame_latent,
    )
    model.eval()
    with torch.no_grad():
        return sample(
            model,
            cond,
            sched,
            sampler=sampler,
            num_inference_steps=num_inference_steps,
            seed=seed,
            eta=eta,
            guidance_scale=guidance_scale,
            clip_denoised=clip_denoised,
        )


def decode_video(
    latents: torch.Tensor, reduction: int = 4, latent_scale: float = 4.0
) -> np.ndarray:
    """Latents (F, C_lat, h, w) -> pixel video (F, 3, H, W) in [0, 1]."""
    pixels = latent_decode(denormalize_latent(latents, latent_scale), reduction)
    return pixels.clamp(0.0, 1.0).numpy()
