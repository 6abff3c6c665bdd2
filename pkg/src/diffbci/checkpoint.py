"""BCIM checkpoint file: a JSON config document plus flat float32 parameters.

Layout (little-endian): ``b"BCIM"``, u16 version, u32 config length, the
UTF-8 JSON config, then every parameter as float32 in declaration order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import ModelConfig, ModelParams, NoiseSchedule, param_shapes

MAGIC = b"BCIM"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    schedule: NoiseSchedule
    train_config: dict = field(default_factory=dict)
    seed: int = 0
    dataset_fingerprint: str = ""
    data_info: dict = field(default_factory=dict)  # fs, baseline_samples, channels of the training data

    def document(self) -> dict:
        return {
            "model": self.params.config.to_dict(),
            "schedule": {"T": self.schedule.T, "s": self.schedule.s},
            "train": self.train_config,
            "seed": self.seed,
            "dataset_fingerprint": self.dataset_fingerprint,
            "data": self.data_info,
            "n_params": self.params.size(),
        }


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    doc = json.dumps(ckpt.document(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    flat = np.ascontiguousarray(ckpt.params.flat(), dtype="<f4")
    return _HEAD.pack(MAGIC, VERSION, len(doc)) + doc + flat.tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes, expect_model: ModelConfig | None = None) -> Checkpoint:
    if len(raw) < _HEAD.size:
        raise CheckpointError("file too short for a BCIM header")
    magic, version, n_doc = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported BCIM version {version}")
    end = _HEAD.size + n_doc
    if end > len(raw):
        raise CheckpointError("truncated config document")
    try:
        doc = json.loads(raw[_HEAD.size:end].decode("utf-8"))
        cfg = ModelConfig.from_dict(doc["model"])
        schedule = NoiseSchedule(int(doc["schedule"]["T"]), float(doc["schedule"]["s"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"unreadable config document: {exc}") from exc
    if expect_model is not None and cfg != expect_model:
        raise CheckpointError(f"config mismatch: checkpoint has {cfg}, expected {expect_model}")
    n = sum(int(np.prod(shape)) for _, shape in param_shapes(cfg))
    if doc.get("n_params") != n:
        raise CheckpointError(f"config mismatch: document says {doc.get('n_params')} params, config implies {n}")
    if len(raw) - end != 4 * n:
        raise CheckpointError(f"parameter payload is {len(raw) - end} bytes, expected {4 * n}")
    flat = np.frombuffer(raw, dtype="<f4", offset=end, count=n).astype(np.float64)
    return Checkpoint(ModelParams.from_flat(cfg, flat), schedule, doc.get("train", {}), int(doc.get("seed", 0)),
                      doc.get("dataset_fingerprint", ""), doc.get("data", {}))


def load_checkpoint(path: str | Path, expect_model: ModelConfig | None = None) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), expect_model)
