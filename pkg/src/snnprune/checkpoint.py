"""Versioned binary checkpoints.

Layout (little-endian)::

    b"SNNPCKPT" | u32 version | u32 header_len | header (UTF-8 JSON)
    | per tensor: u64 byte_len, raw float64 payload | u32 crc32 of all preceding bytes

The JSON header holds the architecture, scalar state and the name and shape
of every tensor. Python's JSON float repr round-trips float64 exactly.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SNNPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arch: dict
    tensors: dict
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, ckpt: Checkpoint):
    header = {
        "arch": ckpt.arch,
        "meta": ckpt.meta,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in ckpt.tensors.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(hb)), hb]
    for arr in ckpt.tensors.values():
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        parts += [struct.pack("<Q", len(payload)), payload]
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    pos = 16
    if pos + hlen > len(raw) - 4:
        raise CheckpointError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    pos += hlen
    tensors = {}
    for spec in header["tensors"]:
        if pos + 8 > len(raw) - 4:
            raise CheckpointError(f"{path}: truncated before tensor {spec['name']!r}")
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        want = 8 * int(np.prod(spec["shape"], dtype=np.int64))
        if n != want or pos + n > len(raw) - 4:
            raise CheckpointError(f"{path}: payload length {n} for {spec['name']!r}, expected {want}")
        tensors[spec["name"]] = np.frombuffer(raw[pos:pos + n], dtype="<f8").astype(np.float64).reshape(spec["shape"])
        pos += n
    if pos != len(raw) - 4:
        raise CheckpointError(f"{path}: {len(raw) - 4 - pos} unexpected trailing bytes")
    (crc,) = struct.unpack_from("<I", raw, pos)
    if crc != zlib.crc32(raw[:pos]):
        raise CheckpointError(f"{path}: checksum mismatch")
    return Checkpoint(header["arch"], tensors, header["meta"], version)
