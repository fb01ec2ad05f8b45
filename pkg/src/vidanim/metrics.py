"""Image quality metrics and the temporal-scaling benchmark.

Pixel metrics operate on videos as float arrays in [0, 1] with shape
(F, 3, H, W):

* ``l1``: mean absolute difference over all pixels and frames.
* ``psnr``: per-frame 10*log10(peak^2 / MSE), averaged over frames;
  identical frames produce an infinite sentinel that reports must flag.
* ``psnr_star``: the overflow-safe variant (labeled UA-PSNR* in
  reports): per-frame MSE in float64 clamped below at 1e-10 before the
  log, giving a finite 100 dB ceiling at peak 1.
* ``ssim``: windowed SSIM on the channel-mean grayscale image, 11x11
  Gaussian window with sigma 1.5, stability constants (0.01*peak)^2 and
  (0.03*peak)^2, averaged over window positions and frames.

The scaling benchmark pairs the analytic per-block complexity counts
with measured wall times across sequence lengths and fits log-log
slopes, which is how the linear (state-space) vs. quadratic (attention)
temporal trend is demonstrated at desk scale.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .temporal import (
    ProbeRow,
    TemporalMambaBlock,
    TemporalTransformerBlock,
    complexity_probe,
)

__all__ = [
    "l1",
    "psnr",
    "psnr_star",
    "ssim",
    "MetricReport",
    "compute_metric_report",
    "write_metrics_csv",
    "ScalingRow",
    "ScalingResult",
    "scaling_benchmark",
    "write_scaling_csv",
]

PSNR_STAR_MSE_FLOOR = 1e-10
METRIC_NAMES = ("l1", "psnr", "psnr_star", "ssim")


def _as_video(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (F, C, H, W) video, got shape {arr.shape}")
    return arr


def _paired(x, y) -> tuple[np.ndarray, np.ndarray]:
    xv, yv = _as_video(x), _as_video(y)
    if xv.shape != yv.shape:
        raise ValueError(f"shape mismatch {xv.shape} vs {yv.shape}")
    return xv, yv


def l1(x, y) -> float:
    """Mean absolute difference over all pixels and frames."""
    xv, yv = _paired(x, y)
    return float(np.abs(xv - yv).mean())


def psnr(x, y, peak: float = 1.0) -> float:
    """Per-frame PSNR in dB, averaged; +inf on any identical frame."""
    xv, yv = _paired(x, y)
    mse = ((xv - yv) ** 2).mean(axis=(1, 2, 3))
    values = np.where(
        mse > 0.0, 10.0 * np.log10(peak**2 / np.maximum(mse, 1e-300)), np.inf
    )
    return float(values.mean())


def psnr_star(x, y, peak: float = 1.0) -> float:
    """Overflow-safe PSNR: per-frame float64 MSE clamped at 1e-10.

    The clamp makes identical inputs read exactly 100 dB at peak 1.
    """
    xv, yv = _paired(x, y)
    mse = ((xv - yv) ** 2).mean(axis=(1, 2, 3))
    mse = np.maximum(mse, PSNR_STAR_MSE_FLOOR)
    return float((10.0 * np.log10(peak**2 / mse)).mean())


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(x, y, peak: float = 1.0) -> float:
    """Mean windowed SSIM over frames (grayscale by channel mean)."""
    xv, yv = _paired(x, y)
    size = 11
    if xv.shape[-2] < size or xv.shape[-1] < size:
        raise ValueError(
            f"frames {xv.shape[-2:]} smaller than the {size}x{size} window"
        )
    kernel = _gaussian_kernel(size, 1.5)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    values = []
    for gx, gy in zip(xv.mean(axis=1), yv.mean(axis=1)):
        wx = np.lib.stride_tricks.sliding_window_view(gx, (size, size))
        wy = np.lib.stride_tricks.sliding_window_view(gy, (size, size))
        mu_x = np.tensordot(wx, kernel, axes=([2, 3], [0, 1]))
        mu_y = np.tensordot(wy, kernel, axes=([2, 3], [0, 1]))
        exx = np.tensordot(wx * wx, kernel, axes=([2, 3], [0, 1]))
        eyy = np.tensordot(wy * wy, kernel, axes=([2, 3], [0, 1]))
        exy = np.tensordot(wx * wy, kernel, axes=([2, 3], [0, 1]))
        var_x = exx - mu_x**2
        var_y = eyy - mu_y**2
        cov = exy - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        values.append(float((num / den).mean()))
    return float(np.mean(values))


_METRIC_FNS = {"l1": l1, "psnr": psnr, "psnr_star": psnr_star, "ssim": ssim}


@dataclass
class MetricReport:
    """Per-video metric values, their arithmetic means, and a config echo."""

    per_video: dict[str, dict[str, float]]
    means: dict[str, float]
    config: dict = field(default_factory=dict)
    psnr_overflow_ids: list[str] = field(default_factory=list)


def compute_metric_report(
    videos: Iterable[tuple[str, object, object]], config: dict | None = None
) -> MetricReport:
    """Evaluate all metrics over (id, predicted, ground-truth) videos."""
    per_video: dict[str, dict[str, float]] = {}
    overflow = []
    for vid, pred, gt in videos:
        row = {name: _METRIC_FNS[name](pred, gt) for name in METRIC_NAMES}
        if math.isinf(row["psnr"]):
            overflow.append(vid)
        per_video[vid] = row
    if not per_video:
        raise ValueError("no videos to evaluate")
    means = {
        name: float(np.mean([row[name] for row in per_video.values()]))
        for name in METRIC_NAMES
    }
    return MetricReport(
        per_video=per_video,
        means=means,
        config=dict(config or {}),
        psnr_overflow_ids=overflow,
    )


def write_metrics_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "l1", "psnr", "psnr_star", "ssim"])
        for vid, row in report.per_video.items():
            writer.writerow(
                [vid] + [repr(row[name]) for name in METRIC_NAMES]
            )


@dataclass(frozen=True)
class ScalingRow:
    block: str
    length: int
    measure: str
    value: float


@dataclass
class ScalingResult:
    rows: list[ScalingRow]
    slopes: dict[tuple[str, str], float]


def _build_block(kind: str, channels: int, max_length: int, state_size: int,
                 num_heads: int, expand: int):
    if kind in ("mamba", "ssm"):
        return TemporalMambaBlock(channels, state_size=state_size, expand=expand)
    if kind in ("transformer", "attention"):
        return TemporalTransformerBlock(
            channels, num_heads=num_heads, max_positions=max_length
        )
    raise ValueError(f"unknown block kind {kind!r}")


def scaling_benchmark(
    block_kinds: Sequence[str],
    lengths: Sequence[int],
    repeats: int = 3,
    channels: int = 64,
    spatial: tuple[int, int] = (2, 2),
    state_size: int = 8,
    num_heads: int = 4,
    expand: int = 1,
    seed: int = 0,
) -> ScalingResult:
    """Analytic counts + measured forward wall time vs. sequence length.

    Requires at least three lengths spanning an 8x range so the fitted
    log-log slopes are meaningful. Wall times are medians over
    ``repeats`` runs after one warmup.
    """
    lengths = sorted(int(s) for s in lengths)
    if len(lengths) < 3 or lengths[-1] < 8 * lengths[0]:
        raise ValueError("need >= 3 lengths spanning at least 8x")
    rows: list[ScalingRow] = []
    slopes: dict[tuple[str, str], float] = {}
    for kind in block_kinds:
        probe = complexity_probe(
            kind, lengths, channels=channels, spatial=spatial,
            state_size=state_size, num_heads=num_heads, expand=expand,
        )
        canonical = probe[0].block
        times = []
        block = _build_block(kind, channels, lengths[-1], state_size,
                             num_heads, expand)
        block.eval()
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for row in probe:
                x = torch.randn(
                    1, row.length, channels, spatial[0], spatial[1], generator=gen
                )
                block(x)  # warmup
                samples = []
                for _ in range(repeats):
                    start = time.perf_counter()
                    block(x)
                    samples.append(time.perf_counter() - start)
                times.append(float(np.median(samples)))
        for row, wall in zip(probe, times):
            rows.append(ScalingRow(canonical, row.length, "activation_elems",
                                   float(row.activation_elems)))
            rows.append(ScalingRow(canonical, row.length, "macs", float(row.macs)))
            rows.append(ScalingRow(canonical, row.length, "wall_time_s", wall))
        logs = np.log(np.array(lengths, dtype=np.float64))
        for measure, values in (
            ("activation_elems", [r.activation_elems for r in probe]),
            ("macs", [r.macs for r in probe]),
            ("wall_time_s", times),
        ):
            coeffs = np.polyfit(logs, np.log(np.array(values, dtype=np.float64)), 1)
            slopes[(canonical, measure)] = float(coeffs[0])
    return ScalingResult(rows=rows, slopes=slopes)


def write_scaling_csv(rows: Iterable[ScalingRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block", "length", "measure", "value"])
        for row in rows:
            writer.writerow([row.block, row.length, row.measure, repr(row.value)])
