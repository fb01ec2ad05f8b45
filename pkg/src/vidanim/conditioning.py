"""Condition streams feeding the unified denoiser.

Everything the denoiser consumes besides the noised latents lives here:
the exact invertible pixel<->latent transform standing in for a
pretrained autoencoder, the shared pose-map encoder, the fusion of
reference latent + reference pose into the reference guidance map, the
unified noised-input stem (noised video, first-frame condition stream,
binary mask, driving pose features, channel-concatenated and projected),
the small trainable context encoder, and the condition bundle with its
dropout.

Dropped conditions are zeroed (or swapped for a learned null embedding),
never removed, so tensor shapes are identical in every mode.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

__all__ = [
    "ConditionBundle",
    "apply_condition_dropout",
    "latent_channels_for",
    "latent_encode",
    "latent_decode",
    "normalize_latent",
    "denormalize_latent",
    "PoseEncoder",
    "ReferenceFusion",
    "build_condition_stream",
    "UnifiedInputStem",
    "ContextEncoder",
]


def latent_channels_for(reduction: int = 4) -> int:
    return 3 * reduction * reduction


LATENT_SHIFT = 0.5


def normalize_latent(latent: torch.Tensor, scale: float = 4.0) -> torch.Tensor:
    """Map codec-space values ([0, 1] pixels rearranged) into diffusion space.

    Centering and rescaling puts the data variance near the noise
    variance; the diffusion process, bundles, and samplers all live in
    this normalized space.
    """
    return (latent - LATENT_SHIFT) * scale


def denormalize_latent(latent: torch.Tensor, scale: float = 4.0) -> torch.Tensor:
    return latent / scale + LATENT_SHIFT


def latent_encode(image: torch.Tensor, reduction: int = 4) -> torch.Tensor:
    """Space-to-depth rearrangement: (..., 3, H, W) -> (..., 3r^2, H/r, W/r).

    Purely a pixel shuffle, so it is exactly invertible and pixel metrics
    pass through it unchanged.
    """
    h, w = image.shape[-2], image.shape[-1]
    if h % reduction or w % reduction:
        raise ValueError(
            f"spatial size ({h}, {w}) not divisible by reduction {reduction}"
        )
    return rearrange(
        image, "... c (h p) (w q) -> ... (c p q) h w", p=reduction, q=reduction
    )


def latent_decode(latent: torch.Tensor, reduction: int = 4) -> torch.Tensor:
    """Exact inverse of :func:`latent_encode`."""
    c = latent.shape[-3]
    if c % (reduction * reduction):
        raise ValueError(
            f"latent channels {c} not divisible by reduction^2 = "
            f"{reduction * reduction}"
        )
    return rearrange(
        latent, "... (c p q) h w -> ... c (h p) (w q)", p=reduction, q=reduction
    )


@dataclass
class ConditionBundle:
    """All conditioning for one segment (the "c" of the training loss).

    Tensors may carry an extra leading batch axis; the model collates
    either form. ``context`` overrides the context encoder when given.
    The drop flags mark conditions that downstream code must replace
    with zeros / the null embedding; the tensors themselves stay intact
    so a bundle can be re-used with different flags.
    """

    ref_latent: torch.Tensor  # (C_lat, h, w)
    ref_pose_map: torch.Tensor  # (3, H, W)
    driving_pose_maps: torch.Tensor  # (F, 3, H, W)
    ref_image: torch.Tensor  # (3, H, W)
    first_frame_latent: Optional[torch.Tensor] = None  # (C_lat, h, w)
    context: Optional[torch.Tensor] = None  # (d_ctx,)
    drop_ref: bool = False
    drop_first_frame: bool = False


def apply_condition_dropout(
    cond: ConditionBundle, p: float, generator: torch.Generator
) -> ConditionBundle:
    """Independently set each drop flag with probability p.

    Flags already set stay set, so p = 0 leaves the bundle unchanged.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    u = torch.rand(2, generator=generator)
    return replace(
        cond,
        drop_ref=cond.drop_ref or bool(u[0] < p),
        drop_first_frame=cond.drop_first_frame or bool(u[1] < p),
    )


class PoseEncoder(nn.Module):
    """Strided conv stack mapping pose maps to latent-resolution features.

    Weight-shared over frames; the total downsampling equals the latent
    reduction factor, so pose features align with the latent grid.
    """

    def __init__(
        self,
        out_channels: int = 64,
        reduction: int = 4,
        hidden: int = 32,
        bias: bool = True,
    ):
        super().__init__()
        n_down = reduction.bit_length() - 1
        if 2**n_down != reduction:
            raise ValueError(f"reduction must be a power of two, got {reduction}")
        layers: list[nn.Module] = []
        c_in = 3
        for i in range(n_down):
            c_out = hidden if i < n_down - 1 else out_channels
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=bias),
                nn.SiLU(),
            ]
            c_in = c_out
        layers.append(nn.Conv2d(c_in, out_channels, 3, padding=1, bias=bias))
        self.net = nn.Sequential(*layers)
        self.reduction = reduction

    def forward(self, pose_maps: torch.Tensor) -> torch.Tensor:
        """(..., 3, H, W) -> (..., C_p, H/r, W/r), frame-independent."""
        lead = pose_maps.shape[:-3]
        flat = pose_maps.reshape(-1, *pose_maps.shape[-3:])
        out = self.net(flat)
        return out.reshape(*lead, *out.shape[-3:])


class ReferenceFusion(nn.Module):
    """Fuse reference latent and reference-pose features into f_ref.

    Channel concatenation followed by a 1x1 projection down to the
    denoiser stem width. A dropped reference zeroes the latent before
    fusion; the pose features pass through either way.
    """

    def __init__(self, latent_channels: int, pose_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(latent_channels + pose_channels, out_channels, 1)

    def forward(
        self,
        ref_latent: torch.Tensor,
        ref_pose_features: torch.Tensor,
        drop_ref: torch.Tensor | bool = False,
    ) -> torch.Tensor:
        if ref_latent.shape[-2:] != ref_pose_features.shape[-2:]:
            raise ValueError(
                f"spatial mismatch: latent {tuple(ref_latent.shape[-2:])} vs "
                f"pose features {tuple(ref_pose_features.shape[-2:])}"
            )
        keep = _keep_mask(drop_ref, ref_latent)
        fused = torch.cat([ref_latent * keep, ref_pose_features], dim=-3)
        return self.proj(fused)


def _keep_mask(drop: torch.Tensor | bool, like: torch.Tensor) -> torch.Tensor:
    """1.0 where a condition is kept, 0.0 where dropped; broadcastable."""
    if isinstance(drop, bool):
        drop = torch.tensor(drop)
    keep = (~drop).to(like.dtype)
    while keep.dim() < like.dim():
        keep = keep.unsqueeze(-1)
    return keep


def build_condition_stream(
    z_t: torch.Tensor,
    first_frame_latent: Optional[torch.Tensor],
    drop_first_frame: torch.Tensor | bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Condition stream c_vid and mask m for the unified noised input.

    c_vid is all zeros except slot 0, which carries the clean first-frame
    latent when present and not dropped; m is 1 at conditioned frames.
    Shapes are fixed regardless of mode: (F, C_lat, h, w) and (F, 1, h, w)
    (plus any leading batch axis of z_t).
    """
    c_vid = torch.zeros_like(z_t)
    mask = torch.zeros_like(z_t[..., :1, :, :])
    if first_frame_latent is not None:
        if first_frame_latent.shape != z_t[..., 0, :, :, :].shape:
            raise ValueError(
                f"first-frame latent shape {tuple(first_frame_latent.shape)} "
                f"incompatible with latents {tuple(z_t.shape)}"
            )
        keep = _keep_mask(drop_first_frame, first_frame_latent)
        c_vid[..., 0, :, :, :] = first_frame_latent * keep
        mask[..., 0, :, :, :] = keep.expand_as(mask[..., 0, :, :, :])
    return c_vid, mask


class UnifiedInputStem(nn.Module):
    """Project [z_t, c_vid, m, pose features] to the denoiser width.

    One input format serves both modes: with no first frame the
    condition stream and mask are zero (pure random-noise generation);
    with one, slot 0 carries the clean latent and the mask marks it.
    """

    def __init__(self, latent_channels: int, pose_channels: int, out_channels: int):
        super().__init__()
        in_channels = 2 * latent_channels + 1 + pose_channels
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        self.in_channels = in_channels

    def forward(
        self,
        z_t: torch.Tensor,
        pose_features: torch.Tensor,
        first_frame_latent: Optional[torch.Tensor] = None,
        drop_first_frame: torch.Tensor | bool = False,
    ) -> torch.Tensor:
        """(..., F, C_lat, h, w) -> (..., F, C, h, w)."""
        if z_t.shape[-2:] != pose_features.shape[-2:]:
            raise ValueError(
                f"spatial mismatch: latents {tuple(z_t.shape[-2:])} vs "
                f"pose features {tuple(pose_features.shape[-2:])}"
            )
        c_vid, mask = build_condition_stream(
            z_t, first_frame_latent, drop_first_frame
        )
        stacked = torch.cat([z_t, c_vid, mask, pose_features], dim=-3)
        lead = stacked.shape[:-3]
        out = self.proj(stacked.reshape(-1, *stacked.shape[-3:]))
        return out.reshape(*lead, *out.shape[-3:])


class ContextEncoder(nn.Module):
    """Global appearance context from the reference image.

    A small jointly-trained conv net with global average pooling; a
    dropped reference is represented by a learned null embedding instead
    of the encoded image.
    """

    def __init__(self, dim: int = 128, hidden: int = 64, bias: bool = True):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden // 2, 3, stride=2, padding=1, bias=bias),
            nn.SiLU(),
            nn.Conv2d(hidden // 2, hidden, 3, stride=2, padding=1, bias=bias),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1, bias=bias),
            nn.SiLU(),
        )
        self.head = nn.Linear(hidden, dim, bias=bias)
        self.null_context = nn.Parameter(torch.zeros(dim))
        self.dim = dim

    def encode(self, ref_image: torch.Tensor) -> torch.Tensor:
        lead = ref_image.shape[:-3]
        flat = ref_image.reshape(-1, *ref_image.shape[-3:])
        feats = self.net(flat).mean(dim=(-2, -1))
        out = self.head(feats)
        return out.reshape(*lead, self.dim)

    def forward(
        self, ref_image: torch.Tensor, drop_ref: torch.Tensor | bool = False
    ) -> torch.Tensor:
        encoded = self.encode(ref_image)
        keep = _keep_mask(drop_ref, encoded)
        return keep * encoded + (1.0 - keep) * self.null_context


def collate_bundles(
    conds: Sequence[ConditionBundle],
) -> tuple[ConditionBundle, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stack bundles into one batched bundle plus per-sample flag tensors.

    Returns (batched_bundle, drop_ref, drop_first_frame, ff_present);
    missing first-frame latents are zero-filled and marked absent so the
    stacked tensor keeps a fixed shape.
    """
    ref_latent = torch.stack([c.ref_latent for c in conds])
    ff_present = torch.tensor(
        [c.first_frame_latent is not None for c in conds]
    )
    ff = torch.stack(
        [
            c.first_frame_latent
            if c.first_frame_latent is not None
            else torch.zeros_like(c.ref_latent)
            for c in conds
        ]
    )
    context = None
    if all(c.context is not None for c in conds):
        context = torch.stack([c.context for c in conds])
    batched = ConditionBundle(
        ref_latent=ref_latent,
        ref_pose_map=torch.stack([c.ref_pose_map for c in conds]),
        driving_pose_maps=torch.stack([c.driving_pose_maps for c in conds]),
        ref_image=torch.stack([c.ref_image for c in conds]),
        first_frame_latent=ff,
        context=context,
    )
    drop_ref = torch.tensor([c.drop_ref for c in conds])
    drop_ff = torch.tensor(
        [c.drop_first_frame or c.first_frame_latent is None for c in conds]
    )
    return batched, drop_ref, drop_ff, ff_present
