"""Checkpoint container and its binary file format.

Layout (all integers little-endian)::

    b"LRLF-CKPT"            9-byte magic
    u32                     format version (1)
    u32                     header length H
    H bytes                 canonical JSON header: config, metadata, tensor list
    float32 data            tensors in header order, C-contiguous

The header lists ``[name, shape]`` for every tensor so a reader can check
shapes against the stored model config before touching the data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .transformer import Params, param_shapes

MAGIC = b"LRLF-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainingMeta:
    stage: str = ""
    updates: int = 0
    valid_nll: float | None = None
    valid_bleu: float | None = None

    def to_dict(self) -> dict:
        return {"stage": self.stage, "updates": self.updates, "valid_nll": self.valid_nll, "valid_bleu": self.valid_bleu}


@dataclass(frozen=True)
class ModelCheckpoint:
    config: ModelConfig
    params: Params = field(repr=False)
    meta: TrainingMeta = TrainingMeta()

    def with_meta(self, **kw) -> "ModelCheckpoint":
        return replace(self, meta=replace(self.meta, **kw))

    def digest(self) -> str:
        """SHA-256 over tensor names and float32 bytes; stable across save/load."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        names = list(param_shapes(self.config))
        missing = set(names) ^ set(self.params)
        if missing:
            raise ShapeMismatchError(f"parameter set does not match config: {sorted(missing)[:3]}")
        header = {
            "config": self.config.to_dict(),
            "meta": self.meta.to_dict(),
            "tensors": [[n, list(self.params[n].shape)] for n in names],
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
        for n in names:
            chunks.append(np.ascontiguousarray(self.params[n], dtype="<f4").tobytes())
        return b"".join(chunks)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, data: bytes, expect: ModelConfig | None = None) -> "ModelCheckpoint":
        if len(data) < len(MAGIC) + 8 or not data.startswith(MAGIC):
            raise CorruptCheckpointError("corrupt checkpoint: bad magic")
        version, hlen = struct.unpack_from("<II", data, len(MAGIC))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        start = len(MAGIC) + 8
        try:
            header = json.loads(data[start : start + hlen].decode("utf-8"))
            config = ModelConfig(**header["config"])
            meta = TrainingMeta(**header["meta"])
            tensors = [(n, tuple(s)) for n, s in header["tensors"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptCheckpointError(f"corrupt checkpoint: bad header ({exc})") from None

        target = expect or config
        want = param_shapes(target)
        for name, shape in tensors:
            if want.get(name) != shape:
                raise ShapeMismatchError(f"tensor {name}: checkpoint shape {shape} vs config shape {want.get(name)}")
        if len(tensors) != len(want):
            raise ShapeMismatchError(f"checkpoint holds {len(tensors)} tensors, config needs {len(want)}")

        offset = start + hlen
        params: Params = {}
        for name, shape in tensors:
            size = int(np.prod(shape)) * 4
            if offset + size > len(data):
                raise CorruptCheckpointError(f"corrupt checkpoint: truncated in tensor {name}")
            params[name] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=offset).reshape(shape).astype(np.float32)
            offset += size
        if offset != len(data):
            raise CorruptCheckpointError("corrupt checkpoint: trailing bytes")
        return cls(config, params, meta)

    @classmethod
    def load(cls, path: str | Path, expect: ModelConfig | None = None) -> "ModelCheckpoint":
        return cls.from_bytes(Path(path).read_bytes(), expect)
