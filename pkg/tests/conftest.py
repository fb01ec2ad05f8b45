"""Shared fixtures: a small fast configuration, dataset, and model."""

import numpy as np
import pytest
import torch

from vidanim.conditioning import ConditionBundle, latent_encode
from vidanim.config import RunConfig
from vidanim.motion import make_dataset
from vidanim.pipeline import build_model, make_schedule


@pytest.fixture(scope="session")
def tiny_config():
    return RunConfig(
        stem_channels=16,
        pose_channels=16,
        context_dim=16,
        state_size=4,
        num_heads=2,
        max_frames=8,
        diffusion_steps=20,
        num_inference_steps=5,
        image_size=32,
        n_videos=2,
        video_frames=6,
        segment_lengths=(4,),
        batch_size=1,
        max_steps=10,
        checkpoint_every=2,
        log_every=1,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config, tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    make_dataset(
        tiny_config.n_videos,
        tiny_config.video_frames,
        tiny_config.image_size,
        tiny_config.image_size,
        tiny_config.data_seed,
        root,
    )
    return root


@pytest.fixture()
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture(scope="session")
def tiny_schedule(tiny_config):
    return make_schedule(tiny_config)


def make_bundle(
    num_frames: int = 4,
    image_size: int = 32,
    reduction: int = 4,
    seed: int = 0,
    with_first_frame: bool = False,
) -> ConditionBundle:
    """A random condition bundle with consistent shapes."""
    gen = torch.Generator().manual_seed(seed)
    ref_image = torch.rand(3, image_size, image_size, generator=gen)
    latent_size = image_size // reduction
    c_lat = 3 * reduction * reduction
    ff = None
    if with_first_frame:
        ff = torch.randn(c_lat, latent_size, latent_size, generator=gen)
    return ConditionBundle(
        ref_latent=latent_encode(ref_image, reduction),
        ref_pose_map=torch.rand(3, image_size, image_size, generator=gen),
        driving_pose_maps=torch.rand(
            num_frames, 3, image_size, image_size, generator=gen
        ),
        ref_image=ref_image,
        first_frame_latent=ff,
    )
