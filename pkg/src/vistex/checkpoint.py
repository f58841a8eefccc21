"""Checkpoint serialization: manifest.json + weights.bin.

The manifest carries a named-tensor table (name, shape, dtype, byte offset),
the model kind tag, a config snapshot and training metadata.  weights.bin is
the concatenation of all tensors as little-endian float32, row-major, in
sorted name order.  Nothing time-dependent is written, so identical state
serializes to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import OVLMConfig
from .errors import CheckpointCorruptionError
from .mstb import MultiScaleTextualizer
from .ovlm import ToyOVLM

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


@dataclass
class Checkpoint:
    kind: str
    config: dict
    metadata: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(state: dict[str, torch.Tensor], path: str | Path, kind: str,
                    config: dict, metadata: dict) -> Path:
    """Write a named-tensor archive; returns the checkpoint directory."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    manifest = {"kind": kind, "config": config, "metadata": metadata, "tensors": table}
    (out / WEIGHTS_NAME).write_bytes(b"".join(blobs))
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ": "), indent=1)
    )
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate an archive; every manifest entry must be present in
    full inside weights.bin."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    weights_path = root / WEIGHTS_NAME
    if not manifest_path.exists() or not weights_path.exists():
        raise CheckpointCorruptionError(f"{root} is not a checkpoint directory")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptionError(f"unreadable manifest: {exc}") from exc
    blob = weights_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(blob):
            raise CheckpointCorruptionError(
                f"tensor {entry['name']!r} extends past the end of weights.bin"
            )
        arr = np.frombuffer(blob[start:start + n], dtype=entry["dtype"])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointCorruptionError(
                f"tensor {entry['name']!r} size {arr.size} != shape {entry['shape']}"
            )
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(kind=manifest.get("kind", ""), config=manifest.get("config", {}),
                      metadata=manifest.get("metadata", {}), tensors=tensors)


def _load_into(module: torch.nn.Module, ckpt: Checkpoint) -> None:
    expected = module.state_dict()
    if set(expected) != set(ckpt.tensors):
        missing = sorted(set(expected) - set(ckpt.tensors))
        extra = sorted(set(ckpt.tensors) - set(expected))
        raise CheckpointCorruptionError(
            f"tensor table mismatch (missing {missing}, unexpected {extra})"
        )
    state = {}
    for name, arr in ckpt.tensors.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise CheckpointCorruptionError(
                f"tensor {name!r} shape {arr.shape} != expected {tuple(expected[name].shape)}"
            )
        state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(expected[name].dtype)
    module.load_state_dict(state)


# ---------------------------------------------------------------------------
# Model-specific wrappers


def save_ovlm(model: ToyOVLM, path: str | Path, metadata: dict | None = None) -> Path:
    config = {"ovlm": model.config.to_dict(), "vocab": model.vocab}
    return save_checkpoint(dict(model.state_dict()), path, kind="ovlm",
                           config=config, metadata=metadata or {})


def load_ovlm(path: str | Path) -> tuple[ToyOVLM, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "ovlm":
        raise CheckpointCorruptionError(f"expected an ovlm checkpoint, got {ckpt.kind!r}")
    config = OVLMConfig.from_dict(ckpt.config["ovlm"])
    model = ToyOVLM(config, {k: int(v) for k, v in ckpt.config["vocab"].items()})
    _load_into(model, ckpt)
    model.eval()
    return model, ckpt


def save_mstb(textualizer: MultiScaleTextualizer, path: str | Path,
              metadata: dict | None = None) -> Path:
    config = {
        "ovlm": textualizer.config.to_dict(),
        "share_scale_convs": textualizer.share_scale_convs,
        "share_across_stages": textualizer.share_across_stages,
        "scale_subset": textualizer.scale_subset,
    }
    return save_checkpoint(dict(textualizer.state_dict()), path, kind="mstb",
                           config=config, metadata=metadata or {})


def load_mstb(path: str | Path) -> tuple[MultiScaleTextualizer, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != "mstb":
        raise CheckpointCorruptionError(f"expected an mstb checkpoint, got {ckpt.kind!r}")
    textualizer = MultiScaleTextualizer(
        OVLMConfig.from_dict(ckpt.config["ovlm"]),
        share_scale_convs=ckpt.config["share_scale_convs"],
        share_across_stages=ckpt.config["share_across_stages"],
        scale_subset=ckpt.config["scale_subset"],
    )
    _load_into(textualizer, ckpt)
    textualizer.eval()
    return textualizer, ckpt
