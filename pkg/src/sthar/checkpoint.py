"""Versioned binary checkpoints.

File layout::

    b"STHCK1"                      magic
    u32 little-endian              header length in bytes
    header                         UTF-8 JSON, keys sorted
    payload                        little-endian float32 values

The header carries the model config, the train config, seeds, data
provenance, the optimiser kind and step, and one entry per stored array
(``name``, ``shape``, ``offset`` into the payload in bytes). Arrays are
``param/<name>`` for weights and ``optim/<buffer>/<name>`` for optimiser
buffers, stored in sorted order.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError
from .models import Model, ModelConfig
from .training import OptimState

MAGIC = b"STHCK1"
FORMAT_VERSION = 1
_STORE = np.dtype("<f4")


@dataclass(eq=False)
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: OptimState | None = None
    train_config: dict | None = None
    seeds: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Model, **kwargs) -> "Checkpoint":
        return cls(model.config, model.params.state(), **kwargs)

    def build_model(self) -> Model:
        """A fresh :class:`Model` holding this checkpoint's parameters."""
        model = Model(self.model_config)
        try:
            model.params.load_state(self.params)
        except ValueError as exc:
            raise CheckpointError(f"checkpoint does not match its model config: {exc}") from None
        return model

    # -- serialisation ----------------------------------------------------
    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        arrays = [(f"param/{n}", self.params[n]) for n in sorted(self.params)]
        if self.optimizer is not None:
            for buf in sorted(self.optimizer.buffers):
                values = self.optimizer.buffers[buf]
                arrays += [(f"optim/{buf}/{n}", values[n]) for n in sorted(values)]
        return arrays

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name, arr in self._arrays():
            data = np.ascontiguousarray(arr, dtype=_STORE).tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
            chunks.append(data)
            offset += len(data)
        header = {
            "format_version": self.version,
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config,
            "seeds": self.seeds,
            "data": self.data,
            "optimizer": None
            if self.optimizer is None
            else {"kind": self.optimizer.kind, "step": self.optimizer.step},
            "tensors": entries,
            "payload_bytes": offset,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return MAGIC + struct.pack("<I", len(head)) + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[: len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        start = len(MAGIC) + 4
        if len(blob) < start:
            raise CheckpointError("truncated checkpoint header")
        (n,) = struct.unpack("<I", blob[len(MAGIC) : start])
        try:
            header = json.loads(blob[start : start + n].decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')!r}")
        payload = memoryview(blob)[start + n :]
        if len(payload) != header.get("payload_bytes"):
            raise CheckpointError(f"payload holds {len(payload)} bytes, header declares {header.get('payload_bytes')}")
        try:
            config = ModelConfig.from_dict(header["model_config"]).validate()
        except (ConfigError, TypeError) as exc:
            raise CheckpointError(f"invalid model config in checkpoint: {exc}") from None

        params: dict[str, np.ndarray] = {}
        buffers: dict[str, dict[str, np.ndarray]] = {}
        for e in header["tensors"]:
            shape = tuple(e["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            end = e["offset"] + count * _STORE.itemsize
            if e["offset"] < 0 or end > len(payload):
                raise CheckpointError(f"{e['name']}: data lies outside the payload")
            arr = np.frombuffer(payload[e["offset"] : end], dtype=_STORE).reshape(shape).astype(config.dtype)
            kind, _, rest = e["name"].partition("/")
            if kind == "param":
                params[rest] = arr
            elif kind == "optim":
                buf, _, pname = rest.partition("/")
                buffers.setdefault(buf, {})[pname] = arr
            else:
                raise CheckpointError(f"unknown array {e['name']!r}")
        opt = header.get("optimizer")
        state = None if opt is None else OptimState(opt["kind"], int(opt["step"]), buffers)
        return cls(
            model_config=config,
            params=params,
            optimizer=state,
            train_config=header.get("train_config"),
            seeds=header.get("seeds") or {},
            data=header.get("data") or {},
            version=header["format_version"],
        )

    def save(self, path) -> None:
        """Write atomically: a temporary file in the same directory, then rename."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        return cls.from_bytes(blob)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)
