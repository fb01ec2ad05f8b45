"""Long-video generation by segment stitching, plus seam measurement.

Memory bounds generation to short segments, so a long request is split
into a plan and the segments are reconciled by one of two strategies:

* first_frame: segments are generated in sequence; each later segment is
  conditioned on the last generated frame of its predecessor through the
  unified noised input (the conditioned slot is overwritten with the
  clean latent re-noised to the current step level on every denoising
  step, so the emitted boundary frame equals the condition bitwise).
* slide_window: overlapped windows are denoised in lockstep over a
  shared step ladder, and after every step the latents of overlapping
  frames are replaced by their arithmetic mean across windows. This is
  the baseline the first-frame strategy is measured against.

``transition_smoothness`` quantifies seams: the pixel difference across
each boundary relative to the video's median adjacent-frame difference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .diffusion import (
    NoiseSchedule,
    clamp_denoised_eps,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    sample,
)
from .motion import Pose, PoseSequence
from .pipeline import make_condition_bundle

__all__ = [
    "Segment",
    "SegmentPlan",
    "plan_segments",
    "seam_boundaries",
    "generate_long_first_frame",
    "generate_long_slide_window",
    "TransitionReport",
    "transition_smoothness",
]


@dataclass(frozen=True)
class Segment:
    start: int
    end: int  # exclusive
    condition_source: Optional[int] = None  # generated frame that seeds slot 0

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SegmentPlan:
    total_frames: int
    segment_length: int
    strategy: str
    overlap: int
    segments: tuple[Segment, ...]


def plan_segments(
    total_frames: int,
    segment_length: int,
    strategy: str,
    overlap: int = 0,
) -> SegmentPlan:
    """Decompose a long request into conditioned short segments.

    first_frame: segment 1 covers [0, F); each later segment starts on
    the previous segment's final frame (regenerated as the condition,
    emitted once) and runs up to F frames — the tail segment shrinks when
    the remainder is short, so any total >= F is reachable.

    slide_window: fixed windows of length F at stride F - overlap; the
    geometry must tile the request exactly.
    """
    if segment_length < 2:
        raise ValueError(f"segment_length must be >= 2, got {segment_length}")
    if total_frames < segment_length:
        raise ValueError(
            f"total_frames {total_frames} < segment_length {segment_length}"
        )
    if strategy == "first_frame":
        segments = [Segment(0, segment_length)]
        while segments[-1].end < total_frames:
            start = segments[-1].end - 1
            end = min(start + segment_length, total_frames)
            segments.append(Segment(start, end, condition_source=start))
        return SegmentPlan(
            total_frames=total_frames,
            segment_length=segment_length,
            strategy=strategy,
            overlap=0,
            segments=tuple(segments),
        )
    if strategy == "slide_window":
        if total_frames == segment_length:
            windows = [Segment(0, segment_length)]
        else:
            if not 0 < overlap < segment_length:
                raise ValueError(
                    f"slide_window needs 0 < overlap < segment_length, "
                    f"got {overlap}"
                )
            stride = segment_length - overlap
            if (total_frames - segment_length) % stride:
                raise ValueError(
                    f"infeasible geometry: {total_frames} frames cannot be "
                    f"tiled by windows of {segment_length} at stride {stride}"
                )
            windows = [
                Segment(s, s + segment_length)
                for s in range(0, total_frames - segment_length + 1, stride)
            ]
        return SegmentPlan(
            total_frames=total_frames,
            segment_length=segment_length,
            strategy=strategy,
            overlap=overlap if len(windows) > 1 else 0,
            segments=tuple(windows),
        )
    raise ValueError(f"unknown strategy {strategy!r}")


def seam_boundaries(plan: SegmentPlan) -> list[int]:
    """Frame indices whose incoming transition crosses a segment seam.

    For first_frame the seam transition is from the shared boundary
    frame into the first newly generated frame; for slide_window it is
    the entry into each later window's coverage.
    """
    if plan.strategy == "first_frame":
        return [seg.start + 1 for seg in plan.segments[1:]]
    return [seg.start for seg in plan.segments[1:]]


def generate_long_first_frame(
    model,
    ref_image,
    ref_pose: Pose,
    driving: PoseSequence,
    plan: SegmentPlan,
    seed: int,
    sched: NoiseSchedule,
    sampler: str = "ddim",
    num_inference_steps: int = 50,
    eta: float = 0.0,
    guidance_scale: float = 1.0,
    clip_denoised: Optional[float] = None,
) -> torch.Tensor:
    """Chain segments through first-frame conditioning.

    Segment 1 is conditioned on the reference only; every later segment
    carries the reference and the previously generated boundary frame
    as its first-frame latent. Boundary frames are emitted exactly once
    and equal their conditioning latent bitwise.
    """
    if plan.strategy != "first_frame":
        raise ValueError(f"plan strategy is {plan.strategy!r}")
    if len(driving) != plan.total_frames:
        raise ValueError(
            f"driving length {len(driving)} != planned {plan.total_frames}"
        )
    out: Optional[torch.Tensor] = None
    for k, seg in enumerate(plan.segments):
        first_frame = None
        if seg.condition_source is not None:
            first_frame = out[seg.condition_source].clone()
        cond = make_condition_bundle(
            ref_image,
            ref_pose,
            driving[seg.start : seg.end],
            reduction=model.reduction,
            latent_scale=model.latent_scale,
            first_frame_latent=first_frame,
        )
        latents = sample(
            model,
            cond,
            sched,
            sampler=sampler,
            num_inference_steps=num_inference_steps,
            seed=seed + k,
            eta=eta,
            guidance_scale=guidance_scale,
            clip_denoised=clip_denoised,
        )
        if out is None:
            out = torch.empty(
                (plan.total_frames,) + tuple(latents.shape[1:]),
                dtype=latents.dtype,
            )
            out[seg.start : seg.end] = latents
        else:
            if not torch.equal(latents[0], out[seg.start]):
                raise RuntimeError(
                    "conditioned slot diverged from its boundary frame"
                )
            out[seg.start + 1 : seg.end] = latents[1:]
    return out


def generate_long_slide_window(
    model,
    ref_image,
    ref_pose: Pose,
    driving: PoseSequence,
    plan: SegmentPlan,
    seed: int,
    sched: NoiseSchedule,
    sampler: str = "ddim",
    num_inference_steps: int = 50,
    clip_denoised: Optional[float] = None,
    return_windows: bool = False,
):
    """Lockstep overlapped-window generation with intersection averaging.

    All windows share the step ladder; after every denoising step the
    latents of frames covered by several windows are replaced by their
    arithmetic mean (frames covered once pass through bitwise).
    """
    if plan.strategy != "slide_window":
        raise ValueError(f"plan strategy is {plan.strategy!r}")
    if len(driving) != plan.total_frames:
        raise ValueError(
            f"driving length {len(driving)} != planned {plan.total_frames}"
        )
    gen = torch.Generator().manual_seed(seed)
    conds = []
    latents = []
    for seg in plan.segments:
        conds.append(
            make_condition_bundle(
                ref_image,
                ref_pose,
                driving[seg.start : seg.end],
                reduction=model.reduction,
                latent_scale=model.latent_scale,
            )
        )
        shape = (seg.length,) + tuple(conds[-1].ref_latent.shape)
        latents.append(torch.randn(shape, generator=gen, dtype=torch.float32))

    counts = torch.zeros(plan.total_frames)
    for seg in plan.segments:
        counts[seg.start : seg.end] += 1.0

    def average() -> torch.Tensor:
        acc = torch.zeros(
            (plan.total_frames,) + tuple(latents[0].shape[1:]),
            dtype=latents[0].dtype,
        )
        for seg, z in zip(plan.segments, latents):
            acc[seg.start : seg.end] += z
        acc /= counts[:, None, None, None]
        for i, seg in enumerate(plan.segments):
            latents[i] = acc[seg.start : seg.end].clone()
        return acc

    def predict(z, t, cond):
        eps_hat = model(z, t, cond)
        if clip_denoised:
            eps_hat = clamp_denoised_eps(eps_hat, z, t, sched, clip_denoised)
        return eps_hat

    if sampler == "ddim":
        ladder = ddim_timesteps(sched.num_steps, num_inference_steps)
        pairs = list(zip(ladder[:-1], ladder[1:]))
        for t, t_prev in pairs:
            for i, cond in enumerate(conds):
                eps_hat = predict(latents[i], t, cond)
                latents[i] = ddim_step(eps_hat, latents[i], t, t_prev, sched)
            video = average()
    elif sampler == "ddpm":
        if num_inference_steps != sched.num_steps:
            raise ValueError(
                "ddpm walks every schedule step; set num_inference_steps "
                f"to {sched.num_steps}"
            )
        for t in range(sched.num_steps, 0, -1):
            for i, cond in enumerate(conds):
                eps_hat = predict(latents[i], t, cond)
                noise = None
                if t > 1:
                    noise = torch.randn(
                        latents[i].shape, generator=gen, dtype=latents[i].dtype
                    )
                latents[i] = ddpm_step(eps_hat, latents[i], t, noise, sched)
            video = average()
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    if return_windows:
        return video, latents
    return video


@dataclass
class TransitionReport:
    """Seam sharpness relative to the video's typical frame-to-frame change."""

    per_boundary: dict[int, float]
    median_adjacent: float
    ratios: dict[int, float] = field(default_factory=dict)
    summary_ratio: float = 0.0


def transition_smoothness(video_pixels, boundaries) -> TransitionReport:
    """Mean |x_b - x_{b-1}| at each boundary vs. the median adjacent diff.

    The summary is the worst boundary's ratio; a video of identical
    frames reports 0, and a hard cut dwarfs the median.
    """
    video = video_pixels
    if torch.is_tensor(video):
        video = video.detach().cpu().numpy()
    video = np.asarray(video, dtype=np.float64)
    n = video.shape[0]
    if n < 2:
        raise ValueError("need at least 2 frames")
    diffs = np.abs(video[1:] - video[:-1]).mean(axis=tuple(range(1, video.ndim)))
    median = float(np.median(diffs))
    per_boundary: dict[int, float] = {}
    ratios: dict[int, float] = {}
    for b in boundaries:
        if not 1 <= b < n:
            raise ValueError(f"boundary {b} outside [1, {n - 1}]")
        d = float(diffs[b - 1])
        per_boundary[b] = d
        if median > 0.0:
            ratios[b] = d / median
        else:
            ratios[b] = 0.0 if d == 0.0 else float("inf")
    summary = max(ratios.values()) if ratios else 0.0
    return TransitionReport(
        per_boundary=per_boundary,
        median_adjacent=median,
        ratios=ratios,
        summary_ratio=summary,
    )
