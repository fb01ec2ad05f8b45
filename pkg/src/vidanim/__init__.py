"""vidanim: pose-driven video diffusion at desk scale.

A single denoising network handles the reference image and the noised
video in one shared feature space (the reference occupies an extra
temporal slot), a unified noised input serves both pure-noise and
first-frame-conditioned generation, and the temporal mixing layer is
switchable between a bidirectional selective state-space block and
temporal self-attention.

Ships with a procedural stick-figure dataset generator, DDPM/DDIM
samplers, long-video stitching strategies, image quality metrics, and a
CLI (`vidanim`) covering dataset creation, training, generation,
evaluation, and temporal-complexity benchmarking.
"""

__version__ = "0.1.0"

from .diffusion import (
    NoiseSchedule,
    add_noise,
    build_schedule,
    ddim_step,
    ddpm_step,
    sample,
    training_loss,
)

__all__ = [
    "NoiseSchedule",
    "add_noise",
    "build_schedule",
    "ddim_step",
    "ddpm_step",
    "sample",
    "training_loss",
]
