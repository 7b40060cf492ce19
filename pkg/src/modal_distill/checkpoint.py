"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"MDCKPT\\0\\0"
    u32       format version
    u32       header length in bytes
    header    UTF-8 JSON, sorted keys, compact separators:
              {"dims", "epochs", "format_version", "kind",
               "params": [{"name", "shape"}, ...], "seed"}
    payload   each parameter as row-major <f8, in header order

Parameters are ordered lexicographically by name, so save -> load -> save
reproduces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .models import ModelDims, VqdModel, build_model

MAGIC = b"MDCKPT\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, corrupt or incompatible checkpoint."""


@dataclass
class Checkpoint:
    kind: str
    dims: ModelDims
    params: dict[str, np.ndarray]
    seed: int
    epochs: int
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: VqdModel, seed: int, epochs: int) -> "Checkpoint":
        return cls(model.kind, model.dims, model.state_dict(), int(seed), int(epochs))

    def to_model(self) -> VqdModel:
        model = build_model(self.kind, self.dims, self.seed)
        try:
            model.load_state_dict(self.params)
        except ValueError as exc:
            raise CheckpointError(f"checkpoint does not fit a {self.kind} model: {exc}") from exc
        return model

    def to_bytes(self) -> bytes:
        names = sorted(self.params)
        header = {
            "dims": self.dims.to_dict(),
            "epochs": self.epochs,
            "format_version": self.format_version,
            "kind": self.kind,
            "params": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
            "seed": self.seed,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<II", self.format_version, len(hbytes)), hbytes]
        parts += [np.ascontiguousarray(self.params[n], dtype="<f8").tobytes() for n in names]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            version, hlen = struct.unpack_from("<II", buf, 8)
            header = json.loads(buf[16 : 16 + hlen].decode())
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            dims = ModelDims(**header["dims"])
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"bad dims in checkpoint: {exc}") from exc
        offset = 16 + hlen
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            end = offset + 8 * count
            if end > len(buf):
                raise CheckpointError(f"truncated checkpoint at parameter {entry['name']}")
            params[entry["name"]] = np.frombuffer(buf[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
            offset = end
        if offset != len(buf):
            raise CheckpointError(f"{len(buf) - offset} trailing bytes after payload")
        return cls(header["kind"], dims, params, header["seed"], header["epochs"], version)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())
