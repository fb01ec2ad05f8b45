"""Training loop: noise-prediction objective with condition dropout.

Each step samples a segment length uniformly from the configured set
(capped by what the dataset can supply), a video and offset per batch
element, a uniform diffusion step, and Gaussian noise; conditions pass
through random dropout; the loss is the mean squared error between
predicted and injected noise. Every random draw comes from one owned
torch.Generator in a fixed order, which is what makes checkpoint resume
bitwise on the same platform.

Also provides dataset loading and batched regeneration of training
videos (reference + poses only), used for overfit evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import restore_training_state, save_checkpoint, checkpoint_path
from .conditioning import (
    ConditionBundle,
    apply_condition_dropout,
    denormalize_latent,
    latent_decode,
    latent_encode,
    normalize_latent,
)
from .config import RunConfig, config_to_dict
from .denoiser import AnimationModel
from .diffusion import (
    NoiseSchedule,
    add_noise,
    clamp_denoised_eps,
    ddim_step,
    ddim_timesteps,
)
from .motion import PoseSequence, load_image_png, load_pose_sequence, read_manifest

__all__ = [
    "VideoRecord",
    "load_video_records",
    "Trainer",
    "regenerate_training_videos",
]


@dataclass
class VideoRecord:
    """One dataset video with everything training needs, in memory."""

    id: str
    seed: int
    frames: np.ndarray  # (F, 3, H, W) in [0, 1]
    pose_maps: np.ndarray  # (F, 3, H, W)
    ref_image: np.ndarray  # (3, H, W)
    poses: PoseSequence

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def load_video_records(dataset_dir) -> list[VideoRecord]:
    root = Path(dataset_dir)
    records = []
    for row in read_manifest(root):
        vdir = root / row["dir"]
        n = int(row["frames"])
        frames = np.stack(
            [load_image_png(vdir / f"frame_{k:04d}.png") for k in range(n)]
        )
        pose_maps = np.stack(
            [load_image_png(vdir / f"pose_{k:04d}.png") for k in range(n)]
        )
        records.append(
            VideoRecord(
                id=row["id"],
                seed=int(row["seed"]),
                frames=frames,
                pose_maps=pose_maps,
                ref_image=load_image_png(vdir / "ref.png"),
                poses=load_pose_sequence(vdir / "poses.json"),
            )
        )
    if not records:
        raise ValueError(f"empty dataset at {dataset_dir}")
    return records


class _CachedVideo:
    """Latents and condition tensors precomputed once per video."""

    def __init__(self, record: VideoRecord, reduction: int, latent_scale: float):
        frames = torch.from_numpy(record.frames).float()
        self.z0 = normalize_latent(latent_encode(frames, reduction), latent_scale)
        self.pose_maps = torch.from_numpy(record.pose_maps).float()
        self.ref_image = torch.from_numpy(record.ref_image).float()
        self.ref_latent = normalize_latent(
            latent_encode(self.ref_image, reduction), latent_scale
        )
        self.ref_pose_map = self.pose_maps[0]
        self.num_frames = record.num_frames


class Trainer:
    """Owns the optimizer, the RNG stream, and the step counter.

    The per-step draw order is fixed — segment length, then per batch
    element (video, offset, diffusion step, two dropout draws), then one
    noise tensor — so restoring (parameters, optimizer state, RNG state)
    reproduces the continuation bitwise.
    """

    def __init__(
        self,
        config: RunConfig,
        model: AnimationModel,
        records: list[VideoRecord],
        sched: NoiseSchedule,
    ):
        if not records:
            raise ValueError("no training videos")
        self.config = config
        self.model = model
        self.sched = sched
        self.videos = [
            _CachedVideo(r, config.reduction, config.latent_scale)
            for r in records
        ]
        max_len = max(v.num_frames for v in self.videos)
        self.lengths = [L for L in config.segment_lengths if L <= max_len]
        if not self.lengths:
            raise ValueError(
                f"no feasible segment length: dataset holds {max_len}-frame "
                f"videos, configured lengths {config.segment_lengths}"
            )
        self.optimizer = torch.optim.AdamW(
            model.parameters(),
            lr=config.learning_rate,
            betas=(config.adam_beta1, config.adam_beta2),
            weight_decay=config.weight_decay,
        )
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step = 0
        self.loss_history: list[float] = []
        self.length_history: list[int] = []

    def _randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high) from the owned stream."""
        return int(
            torch.randint(low, high, (1,), generator=self.generator).item()
        )

    def train_step(self) -> float:
        cfg = self.config
        seg_len = self.lengths[self._randint(0, len(self.lengths))]
        eligible = [i for i, v in enumerate(self.videos) if v.num_frames >= seg_len]
        items = []
        for _ in range(cfg.batch_size):
            vid = eligible[self._randint(0, len(eligible))]
            video = self.videos[vid]
            start = self._randint(0, video.num_frames - seg_len + 1)
            t = self._randint(1, self.sched.num_steps + 1)
            z0 = video.z0[start : start + seg_len]
            bundle = ConditionBundle(
                ref_latent=video.ref_latent,
                ref_pose_map=video.ref_pose_map,
                driving_pose_maps=video.pose_maps[start : start + seg_len],
                ref_image=video.ref_image,
                first_frame_latent=z0[0].clone(),
            )
            bundle = apply_condition_dropout(bundle, cfg.dropout_p, self.generator)
            items.append((z0, t, bundle))

        z0_batch = torch.stack([z0 for z0, _, _ in items])
        eps = torch.randn(z0_batch.shape, generator=self.generator)
        z_t = torch.stack(
            [
                add_noise(z0, eps[i], t, self.sched)
                for i, (z0, t, _) in enumerate(items)
            ]
        )
        t_batch = torch.tensor([t for _, t, _ in items])
        bundles = [b for _, _, b in items]

        self.model.train()
        eps_hat = self.model(z_t, t_batch, bundles)
        loss = ((eps_hat - eps) ** 2).mean()
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        value = float(loss.detach())
        self.loss_history.append(value)
        self.length_history.append(seg_len)
        return value

    def train(
        self,
        until_step: int,
        log: Optional[Callable[[str], None]] = None,
        checkpoint_dir=None,
        stop_condition: Optional[Callable[["Trainer"], bool]] = None,
    ) -> None:
        """Run steps up to ``until_step``, logging and checkpointing."""
        cfg = self.config
        while self.step < until_step:
            loss = self.train_step()
            if log and (self.step % cfg.log_every == 0 or self.step == until_step):
                log(f"step={self.step} loss={loss:.6f}")
            if checkpoint_dir and self.step % cfg.checkpoint_every == 0:
                self.save(checkpoint_dir)
            if stop_condition and stop_condition(self):
                break

    def save(self, directory) -> Path:
        path = checkpoint_path(directory, self.step)
        save_checkpoint(
            path,
            config=self.config,
            global_step=self.step,
            model=self.model,
            optimizer=self.optimizer,
            generator=self.generator,
        )
        return path

    def resume(self, ckpt) -> None:
        self.step = restore_training_state(
            ckpt, self.model, self.optimizer, self.generator
        )


def regenerate_training_videos(
    model: AnimationModel,
    config: RunConfig,
    sched: NoiseSchedule,
    records: list[VideoRecord],
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Re-synthesize each training video from its reference and poses.

    Pure random-noise mode (no first frame), batched across videos over
    a shared DDIM ladder; uses the stored pose maps so conditioning
    matches training exactly. Returns id -> pixel video.
    """
    videos = [
        _CachedVideo(r, config.reduction, config.latent_scale) for r in records
    ]
    n_frames = {v.num_frames for v in videos}
    if len(n_frames) != 1:
        raise ValueError("regeneration expects equal-length videos")
    bundles = [
        ConditionBundle(
            ref_latent=v.ref_latent,
            ref_pose_map=v.ref_pose_map,
            driving_pose_maps=v.pose_maps,
            ref_image=v.ref_image,
        )
        for v in videos
    ]
    gen = torch.Generator().manual_seed(seed)
    shape = (len(videos),) + tuple(videos[0].z0.shape)
    z = torch.randn(shape, generator=gen)
    ladder = ddim_timesteps(sched.num_steps, config.num_inference_steps)
    model.eval()
    with torch.no_grad():
        for t, t_prev in zip(ladder[:-1], ladder[1:]):
            eps_hat = model(z, t, bundles)
            if config.clip_denoised:
                eps_hat = clamp_denoised_eps(
                    eps_hat, z, t, sched, config.clip_denoised
                )
            z = ddim_step(eps_hat, z, t, t_prev, sched)
    out = {}
    for record, latents in zip(records, z):
        pixels = latent_decode(
            denormalize_latent(latents, config.latent_scale), config.reduction
        ).clamp(0.0, 1.0)
        out[record.id] = pixels.numpy()
    return out


def write_run_log_header(log_fn: Callable[[str], None], config: RunConfig) -> None:
    """Echo the effective configuration into a run log."""
    log_fn(f"config={json.dumps(config_to_dict(config), sort_keys=True)}")
    log_fn(f"learning_rate={config.learning_rate}")
    log_fn(f"sampler={config.sampler} num_inference_steps={config.num_inference_steps}")
