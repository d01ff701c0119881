"""Deterministic binary checkpoints.

Layout: an 8-byte magic, a little-endian uint64 header length, a JSON header
(sorted keys, compact) and the float64 little-endian payload of every array
in header order. Nothing time- or host-dependent is written, so saving the
same state twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, StorageError
from .model import CTRModel, ModelConfig
from .stabt import RunningStats

MAGIC = b"STCTRCK\x01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict
    stats: list
    acc: dict
    step: int = 0
    train_config: Optional[dict] = None

    @classmethod
    def from_model(cls, model: CTRModel, acc: Optional[dict] = None, step: int = 0,
                   train_config: Optional[dict] = None) -> "Checkpoint":
        return cls(model.cfg, dict(model.params), [s.copy() for s in model.stats],
                   dict(acc or {}), step, train_config)

    def to_model(self) -> CTRModel:
        return CTRModel(self.model_config, dict(self.params), [s.copy() for s in self.stats])


def _arrays(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        yield f"param/{name}", ckpt.params[name]
    for name in sorted(ckpt.acc):
        yield f"acc/{name}", ckpt.acc[name]
    for i, s in enumerate(ckpt.stats):
        yield f"bn/{i}/mean", s.raw_mean
        yield f"bn/{i}/var", s.raw_var


def dumps(ckpt: Checkpoint) -> bytes:
    entries, payload = [], []
    for name, arr in _arrays(ckpt):
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        payload.append(a.tobytes())
    header = {
        "version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "step": int(ckpt.step),
        "bn": [{"momentum": s.momentum, "steps": int(s.steps)} for s in ckpt.stats],
        "arrays": entries,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(raw)) + raw + b"".join(payload)


def loads(blob: bytes, expected: Optional[ModelConfig] = None) -> Checkpoint:
    if blob[:len(MAGIC)] != MAGIC:
        raise DataError("not a checkpoint file")
    try:
        (n,) = struct.unpack_from("<Q", blob, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(blob[start:start + n])
    except (struct.error, ValueError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('version')}")
    cfg = ModelConfig.from_dict(header["model_config"])
    if expected is not None and expected.to_dict() != cfg.to_dict():
        raise ConfigError("checkpoint was written for a different model configuration")
    offset = start + n
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise DataError("checkpoint payload is truncated")
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count,
                                          offset=offset).reshape(e["shape"]).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise DataError("checkpoint has trailing bytes")
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    acc = {k[len("acc/"):]: v for k, v in arrays.items() if k.startswith("acc/")}
    stats = [RunningStats(arrays[f"bn/{i}/mean"].size, b["momentum"], arrays[f"bn/{i}/mean"],
                          arrays[f"bn/{i}/var"], b["steps"])
             for i, b in enumerate(header["bn"])]
    ckpt = Checkpoint(cfg, params, stats, acc, header["step"], header["train_config"])
    ckpt.to_model()  # validates parameter names and shapes
    return ckpt


def save(path, ckpt: Checkpoint) -> None:
    try:
        Path(path).write_bytes(dumps(ckpt))
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path, expected: Optional[ModelConfig] = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob, expected)
