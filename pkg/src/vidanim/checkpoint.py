"""Versioned single-file checkpoint container.

Layout: 4-byte magic ``UANM``, a little-endian u32 header length, a JSON
header (format version, config echo, global step, optimizer param
groups, and blob metadata), then the named blobs back to back, each as
u32 name length + name + u64 payload length + raw bytes.

Stored blobs cover everything a bitwise resume needs on one platform:
every model tensor, the AdamW per-parameter state, and the training
random-generator state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_to_dict

__all__ = [
    "CheckpointError",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "restore_training_state",
    "checkpoint_path",
    "latest_checkpoint",
]

CHECKPOINT_MAGIC = b"UANM"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    version: int
    config: dict
    global_step: int
    opt_param_groups: list
    blobs: dict[str, np.ndarray]


def checkpoint_path(directory, step: int) -> Path:
    return Path(directory) / f"ckpt_{step:07d}.bin"


def latest_checkpoint(directory) -> Path | None:
    paths = sorted(Path(directory).glob("ckpt_*.bin"))
    return paths[-1] if paths else None


def _collect_blobs(model, optimizer, generator) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    for name, tensor in model.state_dict().items():
        blobs[f"model.{name}"] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for idx, entry in state.items():
            for key, value in entry.items():
                if torch.is_tensor(value):
                    value = value.detach().cpu().numpy()
                else:
                    value = np.asarray(value)
                blobs[f"opt.{idx}.{key}"] = value
    if generator is not None:
        blobs["rng.torch"] = generator.get_state().numpy()
    return blobs


def save_checkpoint(
    path,
    config: RunConfig,
    global_step: int,
    model,
    optimizer=None,
    generator: torch.Generator | None = None,
) -> None:
    blobs = _collect_blobs(model, optimizer, generator)
    opt_groups = (
        optimizer.state_dict()["param_groups"] if optimizer is not None else []
    )
    header = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(config),
        "global_step": int(global_step),
        "opt_param_groups": opt_groups,
        "blobs": [
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
            for name, arr in blobs.items()
        ],
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name, arr in blobs.items():
            name_bytes = name.encode("utf-8")
            payload = np.ascontiguousarray(arr).tobytes()
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    data = p.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{p}: bad magic, not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{p}: corrupt header ({exc})") from exc
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{p}: checkpoint version {version} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    meta = {entry["name"]: entry for entry in header["blobs"]}
    blobs: dict[str, np.ndarray] = {}
    offset = 8 + header_len
    while offset < len(data):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (nbytes,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        entry = meta.get(name)
        if entry is None:
            raise CheckpointError(f"{p}: blob {name!r} missing from header")
        arr = np.frombuffer(
            data, dtype=np.dtype(entry["dtype"]), count=-1, offset=offset
        )
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = arr[:count].reshape(entry["shape"]).copy()
        offset += nbytes
        blobs[name] = arr
    missing = set(meta) - set(blobs)
    if missing:
        raise CheckpointError(f"{p}: truncated file, missing blobs {missing}")
    return Checkpoint(
        version=version,
        config=header["config"],
        global_step=header["global_step"],
        opt_param_groups=header.get("opt_param_groups", []),
        blobs=blobs,
    )


def restore_training_state(
    ckpt: Checkpoint,
    model,
    optimizer=None,
    generator: torch.Generator | None = None,
) -> int:
    """Load model/optimizer/RNG state in place; returns the global step."""
    state = {
        name[len("model."):]: torch.from_numpy(arr.copy())
        for name, arr in ckpt.blobs.items()
        if name.startswith("model.")
    }
    model.load_state_dict(state)
    if optimizer is not None:
        opt_state: dict[int, dict] = {}
        for name, arr in ckpt.blobs.items():
            if not name.startswith("opt."):
                continue
            _, idx, key = name.split(".", 2)
            opt_state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
        optimizer.load_state_dict(
            {"state": opt_state, "param_groups": ckpt.opt_param_groups}
        )
    if generator is not None and "rng.torch" in ckpt.blobs:
        generator.set_state(torch.from_numpy(ckpt.blobs["rng.torch"].copy()))
    return ckpt.global_step
