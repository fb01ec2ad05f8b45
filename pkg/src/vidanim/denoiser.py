"""The unified video denoiser.

One network processes the reference guidance and the noised video in a
shared feature space: the fused video features f_v (F slices) and the
reference representation f_ref are stacked along the temporal axis into
f_merge (F+1 slices, reference at slot 0), and every temporal mixing
layer sees all F+1 slices, which is what aligns appearance between the
reference and the generated frames. The prediction head emits a noise
estimate per slice; slot 0 is discarded (there is nothing to denoise in
a clean reference) and excluded from the loss.

The backbone is a small 3D U-Net: per-frame spatial residual blocks with
an additively injected sinusoidal step embedding, cross-attention from
spatial tokens to the single global context vector, and a configurable
temporal block (selective-SSM, self-attention, or none) at every stage.

``AnimationModel`` wires the conditioning modules to the U-Net and is
the ``model(z_t, t, cond)`` callable the samplers consume.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import (
    ConditionBundle,
    ContextEncoder,
    PoseEncoder,
    ReferenceFusion,
    UnifiedInputStem,
    collate_bundles,
    latent_channels_for,
)
from .temporal import TemporalMambaBlock, TemporalTransformerBlock

__all__ = [
    "merge_reference",
    "timestep_embedding",
    "UNetDenoiser",
    "AnimationModel",
]


def merge_reference(f_v: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """Stack f_ref at temporal slot 0 ahead of the F video slices.

    (F, C, h, w) + (C, h, w) -> (F+1, C, h, w), or the batched
    equivalents. Slot 0 equals f_ref bitwise.
    """
    if f_v.dim() == 4 and f_ref.dim() == 3:
        ref = f_ref.unsqueeze(0)
        dim = 0
    elif f_v.dim() == 5 and f_ref.dim() == 4:
        ref = f_ref.unsqueeze(1)
        dim = 1
    else:
        raise ValueError(
            f"incompatible ranks: f_v {f_v.dim()}D, f_ref {f_ref.dim()}D"
        )
    if ref.shape[-3:] != f_v.shape[-3:]:
        raise ValueError(
            f"shape mismatch: f_v slices {tuple(f_v.shape[-3:])} vs "
            f"f_ref {tuple(ref.shape[-3:])}"
        )
    return torch.cat([ref, f_v], dim=dim)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of the integer diffusion step."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


class SpatialResBlock(nn.Module):
    """Per-frame residual block with additive step-embedding injection."""

    def __init__(
        self, in_channels: int, out_channels: int, temb_dim: int,
        out_init_scale: float = 1e-2,
    ):
        super().__init__()
        del out_init_scale  # residual conv keeps a fixed damped init
        self.norm1 = _group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb_proj = nn.Linear(temb_dim, out_channels)
        self.norm2 = _group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )
        with torch.no_grad():
            self.conv2.weight.mul_(0.1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ContextCrossAttention(nn.Module):
    """Cross-attention from spatial tokens to the global context vector.

    The context is a single key/value token, so every spatial token
    attends to it with weight one; the module still goes through the
    attention form so richer contexts slot in unchanged.
    """

    def __init__(self, channels: int, ctx_dim: int, out_init_scale: float = 1e-2):
        super().__init__()
        self.norm = _group_norm(channels)
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Linear(ctx_dim, channels)
        self.to_v = nn.Linear(ctx_dim, channels)
        self.out = nn.Conv2d(channels, channels, 1)
        self.scale = channels**-0.5
        with torch.no_grad():
            if out_init_scale == 0.0:
                self.out.weight.zero_()
            else:
                self.out.weight.normal_(0.0, out_init_scale)
            self.out.bias.zero_()

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        q = self.to_q(self.norm(x)).reshape(n, c, h * w).transpose(1, 2)
        k = self.to_k(ctx).unsqueeze(1)  # (n, 1, c)
        v = self.to_v(ctx).unsqueeze(1)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(n, c, h, w)
        return x + self.out(y)


def _make_temporal_block(
    kind: str,
    channels: int,
    state_size: int,
    num_heads: int,
    mamba_expand: int,
    max_positions: int,
    out_init_scale: float,
) -> nn.Module:
    if kind == "mamba":
        return TemporalMambaBlock(
            channels,
            state_size=state_size,
            expand=mamba_expand,
            out_init_scale=out_init_scale,
        )
    if kind == "transformer":
        return TemporalTransformerBlock(
            channels,
            num_heads=num_heads,
            max_positions=max_positions,
            out_init_scale=out_init_scale,
        )
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown temporal block kind {kind!r}")


class _Stage(nn.Module):
    """One U-Net stage: spatial residual block, context attention, temporal mix."""

    def __init__(
        self, in_channels: int, out_channels: int, temb_dim: int, ctx_dim: int,
        temporal_kind: str, state_size: int, num_heads: int, mamba_expand: int,
        max_positions: int, out_init_scale: float,
    ):
        super().__init__()
        self.res = SpatialResBlock(in_channels, out_channels, temb_dim,
                                   out_init_scale=out_init_scale)
        self.cross = ContextCrossAttention(out_channels, ctx_dim,
                                           out_init_scale=out_init_scale)
        self.temporal = _make_temporal_block(
            temporal_kind, out_channels, state_size, num_heads, mamba_expand,
            max_positions, out_init_scale,
        )

    def forward(
        self, x: torch.Tensor, temb_flat: torch.Tensor, ctx_flat: torch.Tensor
    ) -> torch.Tensor:
        b, s = x.shape[:2]
        flat = x.reshape(b * s, *x.shape[2:])
        flat = self.res(flat, temb_flat)
        flat = self.cross(flat, ctx_flat)
        x = flat.reshape(b, s, *flat.shape[1:])
        return self.temporal(x)


class UNetDenoiser(nn.Module):
    """3D U-Net over merged features (B, S, C, h, w) -> per-slice noise.

    Spatial stages run per frame; the temporal block after each stage
    mixes along S (which includes the reference slot). Returns estimates
    for all S slices; the caller discards slot 0.
    """

    def __init__(
        self,
        channels: int = 64,
        channel_mult: Sequence[int] = (1, 2),
        out_channels: int = 48,
        ctx_dim: int = 128,
        temporal_kind: str = "transformer",
        state_size: int = 8,
        num_heads: int = 4,
        mamba_expand: int = 1,
        max_positions: int = 33,
        out_init_scale: float = 1e-2,
    ):
        super().__init__()
        temb_dim = 4 * channels
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.channels = channels
        widths = [channels * m for m in channel_mult]

        def stage(c_in, c_out):
            return _Stage(
                c_in, c_out, temb_dim, ctx_dim, temporal_kind, state_size,
                num_heads, mamba_expand, max_positions, out_init_scale,
            )

        self.enc = nn.ModuleList()
        self.downs = nn.ModuleList()
        c_prev = channels
        for i, c_out in enumerate(widths):
            self.enc.append(stage(c_prev, c_out))
            c_prev = c_out
            if i < len(widths) - 1:
                self.downs.append(nn.Conv2d(c_prev, c_prev, 3, stride=2, padding=1))
        self.mid = stage(c_prev, c_prev)
        self.dec = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i, c_out in reversed(list(enumerate(widths))):
            self.dec.append(stage(c_prev + c_out, c_out))
            c_prev = c_out
            if i > 0:
                self.ups.append(nn.Conv2d(c_prev, widths[i - 1], 3, padding=1))
                c_prev = widths[i - 1]
        self.head_norm = _group_norm(c_prev)
        self.head = nn.Conv2d(c_prev, out_channels, 3, padding=1)

    def forward(
        self, f_merge: torch.Tensor, step: torch.Tensor, context: torch.Tensor
    ) -> torch.Tensor:
        b, s = f_merge.shape[:2]
        temb = self.time_mlp(timestep_embedding(step, self.channels))
        temb_flat = temb.repeat_interleave(s, dim=0)
        ctx_flat = context.repeat_interleave(s, dim=0)

        x = f_merge
        skips = []
        for i, enc in enumerate(self.enc):
            x = enc(x, temb_flat, ctx_flat)
            skips.append(x)
            if i < len(self.downs):
                x = self._fold(self.downs[i], x)
        x = self.mid(x, temb_flat, ctx_flat)
        for i, dec in enumerate(self.dec):
            x = torch.cat([x, skips.pop()], dim=2)
            x = dec(x, temb_flat, ctx_flat)
            if i < len(self.ups):
                flat = x.reshape(b * s, *x.shape[2:])
                flat = self.ups[i](F.interpolate(flat, scale_factor=2.0, mode="nearest"))
                x = flat.reshape(b, s, *flat.shape[1:])
        flat = x.reshape(b * s, *x.shape[2:])
        out = self.head(F.silu(self.head_norm(flat)))
        return out.reshape(b, s, *out.shape[1:])

    @staticmethod
    def _fold(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
        b, s = x.shape[:2]
        y = module(x.reshape(b * s, *x.shape[2:]))
        return y.reshape(b, s, *y.shape[1:])


CondArg = Union[ConditionBundle, Sequence[ConditionBundle]]


class AnimationModel(nn.Module):
    """Conditioning modules + U-Net: the full noise predictor.

    ``forward(z_t, t, cond)`` accepts an unbatched latent video
    (F, C_lat, h, w) with one bundle, or a batch (B, F, C_lat, h, w)
    with a list of bundles (a single bundle broadcasts). Dropped
    conditions are zeroed or replaced by the learned null context inside
    this call, so callers only ever toggle flags.
    """

    def __init__(
        self,
        reduction: int = 4,
        stem_channels: int = 64,
        pose_channels: int = 64,
        ctx_dim: int = 128,
        channel_mult: Sequence[int] = (1, 2),
        temporal_kind: str = "transformer",
        state_size: int = 8,
        num_heads: int = 4,
        mamba_expand: int = 1,
        max_frames: int = 32,
        num_steps: int = 1000,
        use_reference_pose: bool = True,
        latent_scale: float = 4.0,
        out_init_scale: float = 1e-2,
    ):
        super().__init__()
        self.reduction = reduction
        self.latent_channels = latent_channels_for(reduction)
        self.num_steps = num_steps
        self.use_reference_pose = use_reference_pose
        # Amplitude of the diffusion latent space this model was built
        # for; bundle builders and decoders read it from here.
        self.latent_scale = latent_scale
        self.pose_encoder = PoseEncoder(pose_channels, reduction=reduction)
        self.ref_fusion = ReferenceFusion(
            self.latent_channels, pose_channels, stem_channels
        )
        self.stem = UnifiedInputStem(
            self.latent_channels, pose_channels, stem_channels
        )
        self.context_encoder = ContextEncoder(ctx_dim)
        self.unet = UNetDenoiser(
            channels=stem_channels,
            channel_mult=channel_mult,
            out_channels=self.latent_channels,
            ctx_dim=ctx_dim,
            temporal_kind=temporal_kind,
            state_size=state_size,
            num_heads=num_heads,
            mamba_expand=mamba_expand,
            max_positions=max_frames + 1,
            out_init_scale=out_init_scale,
        )

    def denoise(
        self, f_merge: torch.Tensor, step: torch.Tensor | int,
        context: torch.Tensor,
    ) -> torch.Tensor:
        """U-Net pass over merged features; drops the reference-slot output."""
        unbatched = f_merge.dim() == 4
        if unbatched:
            f_merge = f_merge.unsqueeze(0)
            context = context.unsqueeze(0)
        step_t = self._check_step(step, f_merge.shape[0])
        eps_all = self.unet(f_merge, step_t, context)
        eps = eps_all[:, 1:]
        return eps.squeeze(0) if unbatched else eps

    def _check_step(self, step: torch.Tensor | int, batch: int) -> torch.Tensor:
        step_t = torch.as_tensor(step)
        if step_t.dim() == 0:
            step_t = step_t.expand(batch)
        if torch.any(step_t < 1) or torch.any(step_t > self.num_steps):
            raise ValueError(
                f"diffusion step outside [1, {self.num_steps}]: {step}"
            )
        return step_t

    def forward(
        self, z_t: torch.Tensor, t: torch.Tensor | int, cond: CondArg
    ) -> torch.Tensor:
        unbatched = z_t.dim() == 4
        if unbatched:
            z_t = z_t.unsqueeze(0)
        if z_t.dim() != 5:
            raise ValueError(f"expected 4D or 5D latents, got {z_t.dim()}D")
        b = z_t.shape[0]
        conds = [cond] * b if isinstance(cond, ConditionBundle) else list(cond)
        if len(conds) != b:
            raise ValueError(f"{len(conds)} bundles for batch of {b}")
        batched, drop_ref, drop_ff, _ = collate_bundles(conds)
        if batched.driving_pose_maps.shape[1] != z_t.shape[1]:
            raise ValueError(
                f"{batched.driving_pose_maps.shape[1]} driving poses for "
                f"{z_t.shape[1]} latent frames"
            )

        pose_feats = self.pose_encoder(batched.driving_pose_maps)
        ref_pose_feats = self.pose_encoder(batched.ref_pose_map)
        if not self.use_reference_pose:
            ref_pose_feats = torch.zeros_like(ref_pose_feats)
        f_ref = self.ref_fusion(batched.ref_latent, ref_pose_feats, drop_ref)
        if batched.context is not None:
            context = batched.context
        else:
            context = self.context_encoder(batched.ref_image, drop_ref)
        f_v = self.stem(
            z_t, pose_feats, batched.first_frame_latent, drop_ff
        )
        f_merge = merge_reference(f_v, f_ref)
        eps = self.denoise(f_merge, t, context)
        return eps.squeeze(0) if unbatched else eps

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Trainable parameters keyed by pipeline component."""
        groups = {
            "pose_encoder": list(self.pose_encoder.parameters()),
            "context_encoder": list(self.context_encoder.parameters()),
            "fusion": list(self.ref_fusion.parameters())
            + list(self.stem.parameters()),
            "spatial": [],
            "temporal": [],
        }
        for name, param in self.unet.named_parameters():
            (groups["temporal"] if ".temporal." in name else groups["spatial"]).append(
                param
            )
        return groups
