"""Versioned binary checkpoints.

Layout (little-endian)::

    b"DTNC"  u32 version
    u32 length, topology JSON (model topology, seed, config snapshot)
    u32 parameter count, then per parameter:
        u16 name length, name (utf-8), u8 ndim, ndim × u32 extent, f64 data
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from dtn.errors import CheckpointError
from dtn.errors import CheckpointVersionError
from dtn.errors import CorruptCheckpointError
from dtn.errors import UnknownTopologyError
from dtn.model import DeepTensorNetwork

logger = logging.getLogger(__name__)

MAGIC = b"DTNC"
VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    net: DeepTensorNetwork
    seed: int | None = None
    config: dict[str, Any] | None = None


class _Reader:
    def __init__(self, raw: bytes, source: str) -> None:
        self.raw = raw
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.raw):
            raise CorruptCheckpointError(
                f"{self.source}: truncated at byte {self.offset}, needed {count} more"
            )
        chunk = self.raw[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def encode_checkpoint(
    net: DeepTensorNetwork, seed: int | None = None, config: dict[str, Any] | None = None
) -> bytes:
    header = json.dumps(
        {"model": net.topology(), "seed": seed, "config": config}, sort_keys=True
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header]
    params = net.parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value.data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(raw, source)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint version {version}, this build reads {VERSION}"
        )
    (length,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{source}: unreadable topology: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("model"), dict):
        raise UnknownTopologyError(f"{source}: missing model topology")

    (count,) = reader.unpack("<I")
    params = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8", errors="replace")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(reader.take(8 * size), dtype="<f8")
        params[name] = data.astype(np.float64).reshape(shape)
    if reader.offset != len(raw):
        raise CorruptCheckpointError(
            f"{source}: {len(raw) - reader.offset} unexpected trailing bytes"
        )
    net = DeepTensorNetwork.from_topology(header["model"], params)
    return Checkpoint(net, header.get("seed"), header.get("config"))


def save_checkpoint(
    net: DeepTensorNetwork,
    path: Path,
    seed: int | None = None,
    config: dict[str, Any] | None = None,
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode_checkpoint(net, seed, config))
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc
    logger.info("wrote checkpoint %s (%d parameters)", path, net.parameter_count())


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return decode_checkpoint(raw, str(path))
