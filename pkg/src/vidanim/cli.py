"""Command-line surface.

Verbs: make-dataset, train, animate, animate-long, evaluate,
bench-temporal. Commands that need a configuration take a flat
key=value file as their first argument; repeated ``--set key=value``
flags override file values.

Exit codes: 0 success, 2 configuration problems, 3 I/O problems
(missing paths, held training lock), 4 checkpoint problems.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    CheckpointError,
    latest_checkpoint,
    load_checkpoint,
)
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
)
from .conditioning import latent_encode
from .longvideo import (
    generate_long_first_frame,
    generate_long_slide_window,
    plan_segments,
)
from .metrics import compute_metric_report, write_metrics_csv, scaling_benchmark, write_scaling_csv
from .motion import (
    align_driving_pose,
    load_image_png,
    load_pose_sequence,
    make_dataset,
    save_image_png,
)
from .pipeline import animate, build_model, decode_video, make_schedule
from .training import (
    Trainer,
    load_video_records,
    write_run_log_header,
)

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CHECKPOINT = 4


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, _parse_overrides(args.set))


class _TrainingLock:
    """One training process owns the checkpoint directory."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        try:
            with open(self.path, "x") as fh:
                fh.write("locked\n")
        except FileExistsError:
            raise OSError(
                f"training lock already held: {self.path} "
                "(remove it if no trainer is running)"
            ) from None
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def cmd_make_dataset(args) -> int:
    cfg = _effective_config(args)
    rows = make_dataset(
        cfg.n_videos,
        cfg.video_frames,
        cfg.image_size,
        cfg.image_size,
        cfg.data_seed,
        cfg.dataset_dir,
    )
    print(f"wrote {len(rows)} videos x {cfg.video_frames} frames to {cfg.dataset_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    records = load_video_records(cfg.dataset_dir)
    out_dir = Path(cfg.output_dir)
    ckpt_dir = Path(cfg.checkpoint_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg)
    sched = make_schedule(cfg)
    trainer = Trainer(cfg, model, records, sched)
    if args.resume:
        trainer.resume(load_checkpoint(args.resume))

    log_path = out_dir / "run.log"
    with _TrainingLock(ckpt_dir), open(log_path, "a") as log_file:

        def log(line: str) -> None:
            log_file.write(line + "\n")
            log_file.flush()
            print(line)

        write_run_log_header(log, cfg)
        trainer.train(cfg.max_steps, log=log, checkpoint_dir=ckpt_dir)
        final = trainer.save(ckpt_dir)
        log(f"final_checkpoint={final}")
    return 0


def _load_model_for_generation(args, cfg: RunConfig):
    """Model from a checkpoint when given, else fresh init from config."""
    ckpt_path = args.checkpoint
    if ckpt_path is None:
        auto = latest_checkpoint(cfg.checkpoint_dir)
        ckpt_path = auto if auto else None
    if ckpt_path is None:
        print("warning: no checkpoint, using randomly initialized weights")
        return build_model(cfg), cfg
    ckpt = load_checkpoint(ckpt_path)
    model_cfg = apply_overrides(
        config_from_dict(ckpt.config), _parse_overrides(args.set)
    )
    model = build_model(model_cfg)
    state = {
        name[len("model."):]: torch.from_numpy(arr.copy())
        for name, arr in ckpt.blobs.items()
        if name.startswith("model.")
    }
    model.load_state_dict(state)
    return model, model_cfg


def _load_driving(poses_path: Path):
    path = Path(poses_path)
    if path.is_dir():
        path = path / "poses.json"
    if not path.exists():
        raise FileNotFoundError(f"no pose sequence at {path}")
    return load_pose_sequence(path)


def _write_video(out_dir: Path, pixels: np.ndarray, cfg: RunConfig, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(pixels.shape[0]):
        save_image_png(out_dir / f"frame_{k:04d}.png", pixels[k])
    manifest = {
        "frames": int(pixels.shape[0]),
        "config": config_to_dict(cfg),
        "seed": int(seed),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _prepare_animation_inputs(args, cfg: RunConfig):
    ref_image = load_image_png(args.ref)
    driving = _load_driving(args.poses)
    if args.ref_pose:
        ref_pose = load_pose_sequence(args.ref_pose)[0]
    else:
        ref_pose = driving[0]
    driving = align_driving_pose(driving, ref_pose)
    return ref_image, ref_pose, driving


class _CountingModel:
    """Wraps the model callable to count denoiser evaluations."""

    def __init__(self, model):
        self._model = model
        self.reduction = model.reduction
        self.latent_scale = model.latent_scale
        self.calls = 0

    def __call__(self, z_t, t, cond):
        self.calls += 1
        return self._model(z_t, t, cond)

    def eval(self):
        self._model.eval()
        return self

    def no_grad_model(self):
        return self._model


def cmd_animate(args) -> int:
    cfg = _effective_config(args)
    model, cfg = _load_model_for_generation(args, cfg)
    ref_image, ref_pose, driving = _prepare_animation_inputs(args, cfg)
    if args.frames:
        driving = driving[: args.frames]
    sched = make_schedule(cfg)
    counting = _CountingModel(model)
    latents = animate(
        counting,
        sched,
        ref_image,
        ref_pose,
        driving,
        seed=args.seed,
        sampler=cfg.sampler,
        num_inference_steps=cfg.num_inference_steps,
        eta=cfg.eta,
        guidance_scale=cfg.guidance_scale,
        clip_denoised=cfg.clip_denoised or None,
    )
    pixels = decode_video(latents, cfg.reduction, cfg.latent_scale)
    _write_video(Path(args.out), pixels, cfg, args.seed)
    print(f"denoiser calls: {counting.calls}")
    print(f"wrote {pixels.shape[0]} frames to {args.out}")
    return 0


def cmd_animate_long(args) -> int:
    cfg = _effective_config(args)
    model, cfg = _load_model_for_generation(args, cfg)
    ref_image, ref_pose, driving = _prepare_animation_inputs(args, cfg)
    if len(driving) < args.total_frames:
        raise ConfigError(
            f"driving sequence has {len(driving)} poses, "
            f"need {args.total_frames}"
        )
    driving = driving[: args.total_frames]
    segment_length = args.segment_length or min(cfg.video_frames, cfg.max_frames)
    plan = plan_segments(
        args.total_frames, segment_length, args.strategy, overlap=args.overlap
    )
    sched = make_schedule(cfg)
    model.eval()
    with torch.no_grad():
        if args.strategy == "first_frame":
            latents = generate_long_first_frame(
                model, ref_image, ref_pose, driving, plan, args.seed, sched,
                sampler=cfg.sampler,
                num_inference_steps=cfg.num_inference_steps,
                eta=cfg.eta,
                guidance_scale=cfg.guidance_scale,
                clip_denoised=cfg.clip_denoised or None,
            )
        else:
            latents = generate_long_slide_window(
                model, ref_image, ref_pose, driving, plan, args.seed, sched,
                sampler=cfg.sampler,
                num_inference_steps=cfg.num_inference_steps,
                clip_denoised=cfg.clip_denoised or None,
            )
    pixels = decode_video(latents, cfg.reduction, cfg.latent_scale)
    _write_video(Path(args.out), pixels, cfg, args.seed)
    print(
        f"strategy={args.strategy} segments={len(plan.segments)} "
        f"frames={pixels.shape[0]}"
    )
    return 0


def _video_dirs(root: Path) -> dict[str, Path]:
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"no such directory: {root}")
    subdirs = {
        p.name: p
        for p in sorted(root.iterdir())
        if p.is_dir() and (p / "frame_0000.png").exists()
    }
    if subdirs:
        return subdirs
    if (root / "frame_0000.png").exists():
        return {root.name: root}
    raise FileNotFoundError(f"no videos (frame_0000.png) under {root}")


def _load_frames(vdir: Path) -> np.ndarray:
    paths = sorted(vdir.glob("frame_*.png"))
    return np.stack([load_image_png(p) for p in paths])


def cmd_evaluate(args) -> int:
    pred = _video_dirs(Path(args.pred_dir))
    gt = _video_dirs(Path(args.gt_dir))
    shared = sorted(set(pred) & set(gt))
    if not shared:
        raise FileNotFoundError(
            f"no matching video directories between {args.pred_dir} and {args.gt_dir}"
        )
    report = compute_metric_report(
        (vid, _load_frames(pred[vid]), _load_frames(gt[vid])) for vid in shared
    )
    write_metrics_csv(report, args.out)
    for vid, row in report.per_video.items():
        print(
            f"{vid}: l1={row['l1']:.6g} psnr={row['psnr']:.6g} "
            f"psnr_star={row['psnr_star']:.6g} ssim={row['ssim']:.6g}"
        )
    means = report.means
    print(
        f"mean: l1={means['l1']:.6g} psnr={means['psnr']:.6g} "
        f"psnr_star={means['psnr_star']:.6g} ssim={means['ssim']:.6g}"
    )
    print("lpips: n/a (out of scope)")
    print("fvd: n/a (out of scope)")
    print(f"wrote {args.out}")
    return 0


def cmd_bench_temporal(args) -> int:
    cfg = _effective_config(args)
    lengths = [int(v) for v in args.lengths.split(",")]
    result = scaling_benchmark(
        ["mamba", "transformer"],
        lengths,
        repeats=args.repeats,
        channels=cfg.stem_channels,
        state_size=cfg.state_size,
        num_heads=cfg.num_heads,
        expand=cfg.mamba_expand,
    )
    write_scaling_csv(result.rows, args.out)
    for (block, measure), slope in sorted(result.slopes.items()):
        print(f"slope {block}/{measure}: {slope:.3f}")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidanim",
        description="pose-driven video diffusion at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("config", nargs="?", default=None,
                       help="flat key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value")

    p = sub.add_parser("make-dataset", help="write a synthetic dataset")
    add_config(p)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train the denoiser")
    add_config(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("animate", help="animate a reference image")
    add_config(p)
    p.add_argument("--ref", required=True, help="reference image PNG")
    p.add_argument("--poses", required=True,
                   help="driving poses.json (or a directory holding one)")
    p.add_argument("--ref-pose", default=None,
                   help="reference pose json (default: driving frame 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=None,
                   help="use only the first N driving poses")
    p.set_defaults(func=cmd_animate)

    p = sub.add_parser("animate-long", help="long video via segment stitching")
    add_config(p)
    p.add_argument("--ref", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--ref-pose", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--total-frames", type=int, required=True)
    p.add_argument("--strategy", choices=["first_frame", "slide_window"],
                   default="first_frame")
    p.add_argument("--overlap", type=int, default=8)
    p.add_argument("--segment-length", type=int, default=None)
    p.set_defaults(func=cmd_animate_long)

    p = sub.add_parser("evaluate", help="image metrics over paired videos")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-temporal", help="temporal-block scaling benchmark")
    add_config(p)
    p.add_argument("--lengths", default="64,128,256,512,1024")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", default="scaling.csv")
    p.set_defaults(func=cmd_bench_temporal)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
