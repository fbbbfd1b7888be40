"""Versioned binary container shared by checkpoints, prototypes and weather vectors.

Layout::

    b"SQWC"                 magic
    uint32 LE               format version
    uint64 LE               header length in bytes
    header                  UTF-8 JSON: kind, meta, blocks [{name, shape}], crc32
    payload                 little-endian float32 blocks in header order
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SQWC"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class ContainerError(Exception):
    """Raised when a container file cannot be read back faithfully."""


class CorruptContainerError(ContainerError):
    pass


class DescriptorMismatchError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


def write_container(path, kind: str, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    payload = bytearray()
    entries = []
    for name, arr in blocks.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(a.shape)})
        payload += a.tobytes()
    header = {
        "kind": kind,
        "meta": meta,
        "blocks": entries,
        "crc32": zlib.crc32(payload),
        "payload_bytes": len(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(meta, blocks)``; nothing is returned unless the whole file checks out."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CorruptContainerError(f"{path}: bad magic or truncated preamble")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 16 + hlen:
        raise CorruptContainerError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptContainerError(f"{path}: unreadable header") from exc
    if kind is not None and header.get("kind") != kind:
        raise DescriptorMismatchError(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
    payload = raw[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CorruptContainerError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    if zlib.crc32(payload) != header["crc32"]:
        raise CorruptContainerError(f"{path}: checksum mismatch")
    blocks = {}
    offset = 0
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        blocks[entry["name"]] = np.frombuffer(payload[offset : offset + n], dtype=_DTYPE).reshape(shape).copy()
        offset += n
    return header["meta"], blocks
