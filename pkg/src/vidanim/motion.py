"""Procedural skeletal motion data: generation, rendering, alignment.

A 13-joint stick figure (single pelvis root, 12 bones) stands in for
detector-extracted human poses. Motion is built by forward kinematics
from fixed bone lengths and time-varying joint angles — the root follows
a smoothed, bounded random walk and the limbs swing on phase-offset
sinusoids — so bone lengths are conserved by construction and every
sequence is a pure function of its seed.

Rendering uses a small anti-aliased rasterizer (distance-field coverage
per bone/joint) rather than a drawing library, which keeps output
byte-deterministic and makes sub-pixel translation measurable. Pose maps
draw each bone in a fixed distinct color on black; ground-truth videos
draw a per-seed colored figure over a per-seed static textured
background, with frame 0 doubling as the reference image.

Driving sequences are spatially aligned to a reference pose by one
uniform scale (torso-length ratio) plus one translation (root match),
shared across all frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

__all__ = [
    "JOINT_NAMES",
    "BONES",
    "BONE_COLORS",
    "Pose",
    "PoseSequence",
    "MotionStyle",
    "generate_motion",
    "render_pose_map",
    "render_video",
    "align_driving_pose",
    "make_dataset",
    "save_image_png",
    "load_image_png",
    "save_pose_sequence",
    "load_pose_sequence",
    "read_manifest",
]

JOINT_NAMES = (
    "head",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "pelvis",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
)

HEAD, NECK = 0, 1
L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST, R_WRIST = 2, 3, 4, 5, 6, 7
PELVIS, L_KNEE, R_KNEE, L_ANKLE, R_ANKLE = 8, 9, 10, 11, 12

BONES = (
    (NECK, HEAD),
    (NECK, L_SHOULDER),
    (NECK, R_SHOULDER),
    (L_SHOULDER, L_ELBOW),
    (R_SHOULDER, R_ELBOW),
    (L_ELBOW, L_WRIST),
    (R_ELBOW, R_WRIST),
    (NECK, PELVIS),
    (PELVIS, L_KNEE),
    (PELVIS, R_KNEE),
    (L_KNEE, L_ANKLE),
    (R_KNEE, R_ANKLE),
)

# Fixed distinct colors, one per bone, for pose maps.
BONE_COLORS = np.array(
    [
        (1.00, 0.15, 0.15),
        (1.00, 0.60, 0.10),
        (0.95, 0.90, 0.10),
        (0.55, 0.95, 0.10),
        (0.10, 0.85, 0.25),
        (0.10, 0.90, 0.70),
        (0.10, 0.75, 0.95),
        (0.15, 0.40, 1.00),
        (0.45, 0.15, 1.00),
        (0.80, 0.10, 0.95),
        (1.00, 0.10, 0.60),
        (0.90, 0.45, 0.45),
    ],
    dtype=np.float64,
)

JOINT_COLOR = np.array((1.0, 1.0, 1.0), dtype=np.float64)

# Canonical body proportions in normalized [0, 1] units.
_TORSO = 0.20
_HEAD_LEN = 0.07
_SHOULDER = 0.055
_UPPER_ARM = 0.095
_FOREARM = 0.09
_THIGH = 0.12
_SHIN = 0.115


@dataclass
class Pose:
    """One skeletal pose: 13 (x, y) joints in [0, 1]^2 plus confidences."""

    joints: np.ndarray  # (13, 2) float64
    confidence: np.ndarray = field(
        default_factory=lambda: np.ones(len(JOINT_NAMES))
    )

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.joints.shape != (len(JOINT_NAMES), 2):
            raise ValueError(f"expected (13, 2) joints, got {self.joints.shape}")
        if not np.isfinite(self.joints).all():
            raise ValueError("joint coordinates must be finite")

    @property
    def root(self) -> np.ndarray:
        return self.joints[PELVIS]

    def torso_length(self) -> float:
        return float(np.linalg.norm(self.joints[NECK] - self.joints[PELVIS]))

    def bone_lengths(self) -> np.ndarray:
        return np.array(
            [np.linalg.norm(self.joints[a] - self.joints[b]) for a, b in BONES]
        )

    def translated(self, dx: float, dy: float) -> "Pose":
        return Pose(self.joints + np.array([dx, dy]), self.confidence.copy())


@dataclass
class PoseSequence:
    """Ordered poses with a constant joint count; fps is informational."""

    poses: list[Pose]
    fps: float = 8.0

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return PoseSequence([p for p in self.poses[idx]], fps=self.fps)
        return self.poses[idx]

    def __iter__(self) -> Iterator[Pose]:
        return iter(self.poses)


@dataclass(frozen=True)
class MotionStyle:
    """Knobs for procedural motion; amplitude 0 freezes the rest pose."""

    amplitude: float = 1.0
    frequency: float = 1.0
    figure_scale: float = 1.0
    root_range: float = 0.06


def _dir(theta):
    """Unit direction for angle theta; 0 points down (+y, image coords)."""
    return np.stack([np.sin(theta), np.cos(theta)], axis=-1)


def generate_motion(
    seed: int, total_frames: int, style: MotionStyle = MotionStyle()
) -> PoseSequence:
    """Smooth deterministic skeletal motion from a seed.

    The pelvis follows a smoothed bounded random walk around the canvas
    center; limb angles follow per-seed phase-offset sinusoids. Bone
    lengths are constant across frames by construction.
    """
    if total_frames < 1:
        raise ValueError(f"total_frames must be >= 1, got {total_frames}")
    rng = np.random.default_rng(seed)
    amp = style.amplitude
    sc = style.figure_scale
    t = np.arange(total_frames, dtype=np.float64)

    # Per-seed oscillator bank: phases and frequency jitter.
    phases = rng.uniform(0.0, 2.0 * np.pi, size=8)
    freqs = style.frequency * rng.uniform(0.6, 1.4, size=8) / 16.0

    def osc(i: int, scale: float) -> np.ndarray:
        return scale * amp * np.sin(2.0 * np.pi * freqs[i] * t + phases[i])

    # Bounded random walk for the root: smoothed increments, rescaled
    # into a fixed range so the figure never leaves the canvas.
    steps = rng.normal(0.0, 1.0, size=(total_frames + 8, 2))
    kernel = np.hanning(9)
    kernel /= kernel.sum()
    smooth = np.stack(
        [np.convolve(steps[:, i], kernel, mode="same") for i in range(2)], axis=1
    )[:total_frames]
    walk = np.cumsum(smooth, axis=0)
    walk -= walk[0]
    peak = np.abs(walk).max()
    if peak > 0:
        walk = walk / peak * style.root_range
    walk *= amp

    center = np.array([0.5, 0.55])
    lean = osc(0, 0.06)
    nod = osc(1, 0.15)
    arm_l = -0.30 + osc(2, 0.45)
    arm_r = 0.30 - osc(2, 0.45)
    elbow_l = -0.25 + osc(3, 0.55)
    elbow_r = 0.25 - osc(4, 0.55)
    leg_l = -0.10 + osc(5, 0.22)
    leg_r = 0.10 - osc(5, 0.22)
    knee_l = -0.05 + osc(6, 0.30)
    knee_r = 0.05 - osc(7, 0.30)

    poses = []
    for k in range(total_frames):
        j = np.zeros((len(JOINT_NAMES), 2))
        pelvis = center + walk[k]
        torso_angle = np.pi + lean[k]
        j[PELVIS] = pelvis
        j[NECK] = pelvis + sc * _TORSO * _dir(torso_angle)
        j[HEAD] = j[NECK] + sc * _HEAD_LEN * _dir(torso_angle + nod[k])
        j[L_SHOULDER] = j[NECK] + sc * _SHOULDER * _dir(torso_angle + np.pi / 2)
        j[R_SHOULDER] = j[NECK] + sc * _SHOULDER * _dir(torso_angle - np.pi / 2)
        j[L_ELBOW] = j[L_SHOULDER] + sc * _UPPER_ARM * _dir(arm_l[k])
        j[R_ELBOW] = j[R_SHOULDER] + sc * _UPPER_ARM * _dir(arm_r[k])
        j[L_WRIST] = j[L_ELBOW] + sc * _FOREARM * _dir(arm_l[k] + elbow_l[k])
        j[R_WRIST] = j[R_ELBOW] + sc * _FOREARM * _dir(arm_r[k] + elbow_r[k])
        j[L_KNEE] = pelvis + sc * _THIGH * _dir(leg_l[k])
        j[R_KNEE] = pelvis + sc * _THIGH * _dir(leg_r[k])
        j[L_ANKLE] = j[L_KNEE] + sc * _SHIN * _dir(leg_l[k] + knee_l[k])
        j[R_ANKLE] = j[R_KNEE] + sc * _SHIN * _dir(leg_r[k] + knee_r[k])
        poses.append(Pose(j))
    return PoseSequence(poses)


def _pixel_grid(height: int, width: int):
    ys, xs = np.meshgrid(
        np.arange(height, dtype=np.float64) + 0.5,
        np.arange(width, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    return xs, ys


def _segment_coverage(xs, ys, p0, p1, radius: float) -> np.ndarray:
    """Anti-aliased coverage of a thick segment over pixel centers."""
    d = p1 - p0
    len_sq = float(d @ d)
    if len_sq == 0.0:
        return _disc_coverage(xs, ys, p0, radius)
    tt = ((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / len_sq
    tt = np.clip(tt, 0.0, 1.0)
    dist = np.hypot(xs - (p0[0] + tt * d[0]), ys - (p0[1] + tt * d[1]))
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _disc_coverage(xs, ys, center, radius: float) -> np.ndarray:
    dist = np.hypot(xs - center[0], ys - center[1])
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def _composite(img: np.ndarray, coverage: np.ndarray, color: np.ndarray) -> None:
    img *= 1.0 - coverage
    img += color[:, None, None] * coverage


def _draw_figure(
    img: np.ndarray,
    pose: Pose,
    bone_colors: np.ndarray,
    joint_color: np.ndarray,
    line_radius: float,
    joint_radius: float,
) -> None:
    height, width = img.shape[1], img.shape[2]
    xs, ys = _pixel_grid(height, width)
    pts = pose.joints * np.array([width, height])
    for i, (a, b) in enumerate(BONES):
        cov = _segment_coverage(xs, ys, pts[a], pts[b], line_radius)
        _composite(img, cov, bone_colors[i])
    for p in pts:
        cov = _disc_coverage(xs, ys, p, joint_radius)
        _composite(img, cov, joint_color)


def render_pose_map(pose: Pose, height: int, width: int) -> np.ndarray:
    """Stick-figure conditioning map: colored bones + joint discs on black."""
    if height < 16 or width < 16:
        raise ValueError(f"canvas too small: ({height}, {width})")
    img = np.zeros((3, height, width), dtype=np.float64)
    scale = min(height, width)
    _draw_figure(
        img,
        pose,
        BONE_COLORS,
        JOINT_COLOR,
        line_radius=max(0.9, 0.015 * scale),
        joint_radius=max(1.3, 0.022 * scale),
    )
    return img.astype(np.float32)


def _background(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Static smooth per-seed texture: a few random sinusoid gratings."""
    xs, ys = _pixel_grid(height, width)
    u, v = xs / width, ys / height
    bg = np.zeros((3, height, width))
    for c in range(3):
        fieldsum = np.zeros((height, width))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            fieldsum += rng.uniform(0.4, 1.0) * np.sin(
                2.0 * np.pi * (fx * u + fy * v) + phase
            )
        fieldsum /= max(np.abs(fieldsum).max(), 1e-9)
        bg[c] = 0.5 + 0.33 * fieldsum
    return bg


def render_video(
    pose_seq: PoseSequence, appearance_seed: int, height: int, width: int
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth clip + reference image for one identity.

    The figure gets per-seed bone colors and stroke proportions and is
    drawn over a per-seed static background; frame k depends only on
    pose k and the seed. The reference image is frame 0.
    """
    rng = np.random.default_rng(appearance_seed)
    bg = _background(rng, height, width)
    bone_colors = rng.uniform(0.25, 1.0, size=(len(BONES), 3))
    joint_color = rng.uniform(0.6, 1.0, size=3)
    scale = min(height, width)
    line_radius = max(0.9, 0.015 * scale) * rng.uniform(0.9, 1.4)
    joint_radius = max(1.3, 0.022 * scale) * rng.uniform(0.9, 1.3)
    frames = np.empty((len(pose_seq), 3, height, width), dtype=np.float32)
    for k, pose in enumerate(pose_seq):
        img = bg.copy()
        _draw_figure(img, pose, bone_colors, joint_color, line_radius, joint_radius)
        frames[k] = img.astype(np.float32)
    return frames, frames[0].copy()


def align_driving_pose(driving: PoseSequence, ref_pose: Pose) -> PoseSequence:
    """Spatially align a driving sequence to the reference skeleton.

    One uniform scale (reference torso / driving frame-0 torso) about the
    driving root, then one translation taking the driving root onto the
    reference root; the same transform applies to every frame.
    """
    if len(driving) == 0:
        raise ValueError("empty driving sequence")
    torso_ref = ref_pose.torso_length()
    torso_drv = driving[0].torso_length()
    if torso_ref < 1e-9 or torso_drv < 1e-9:
        raise ValueError("degenerate pose: zero torso length")
    s = torso_ref / torso_drv
    root_drv = driving[0].root.copy()
    root_ref = ref_pose.root.copy()
    aligned = [
        Pose(root_ref + s * (p.joints - root_drv), p.confidence.copy())
        for p in driving
    ]
    return PoseSequence(aligned, fps=driving.fps)


def save_image_png(path, img: np.ndarray) -> None:
    """Lossless PNG from a float (3, H, W) image in [0, 1]."""
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_pose_sequence(path, seq: PoseSequence) -> None:
    payload = {
        "fps": seq.fps,
        "frames": [
            {"joints": p.joints.tolist(), "confidence": p.confidence.tolist()}
            for p in seq
        ],
    }
    Path(path).write_text(json.dumps(payload))


def load_pose_sequence(path) -> PoseSequence:
    payload = json.loads(Path(path).read_text())
    poses = [
        Pose(np.array(f["joints"]), np.array(f["confidence"]))
        for f in payload["frames"]
    ]
    return PoseSequence(poses, fps=float(payload.get("fps", 8.0)))


def make_dataset(
    n_videos: int,
    total_frames: int,
    height: int,
    width: int,
    seed: int,
    out_dir,
) -> list[dict]:
    """Write a full synthetic dataset and its manifest; returns the rows.

    Layout per video directory: frame_%04d.png and pose_%04d.png pairs,
    ref.png (frame 0), poses.json (keypoints for alignment). The
    manifest is JSON-lines at <out_dir>/manifest.jsonl with one record
    per video: {"id", "dir", "frames", "seed"}. Everything is a pure
    function of the seed.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(n_videos):
            motion_seed = seed * 1_000_003 + 2 * i
            appearance_seed = seed * 1_000_003 + 2 * i + 1
            vid = f"video_{i:04d}"
            vdir = out / vid
            vdir.mkdir(exist_ok=True)
            seq = generate_motion(motion_seed, total_frames)
            frames, ref = render_video(seq, appearance_seed, height, width)
            for k in range(total_frames):
                save_image_png(vdir / f"frame_{k:04d}.png", frames[k])
                save_image_png(
                    vdir / f"pose_{k:04d}.png", render_pose_map(seq[k], height, width)
                )
            save_image_png(vdir / "ref.png", ref)
            save_pose_sequence(vdir / "poses.json", seq)
            rows.append(
                {"id": vid, "dir": vid, "frames": total_frames, "seed": motion_seed}
            )
        with open(out / "manifest.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
    except OSError as exc:
        raise OSError(f"dataset write failed under {out}: {exc}") from exc
    return rows


def read_manifest(dataset_dir) -> list[dict]:
    path = Path(dataset_dir) / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line]
