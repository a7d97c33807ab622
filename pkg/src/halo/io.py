"""File plumbing: canonical JSON, digests, JSON lines, checkpoint containers."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .tensor import decode_halt, encode_halt

CONTAINER_MAGIC = b"HALC0001"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_obj(obj: Any) -> str:
    return digest_bytes(canonical_json(obj).encode("utf-8"))


def digest_file(path) -> str:
    return digest_bytes(Path(path).read_bytes())


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_jsonl(path, records: Iterable[dict]) -> None:
    lines = [canonical_json(r) + "\n" for r in records]
    write_bytes_atomic(path, "".join(lines).encode("utf-8"))


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def encode_container(header: dict, blocks: dict[str, np.ndarray]) -> bytes:
    """Canonical-JSON header followed by named HALT blocks in insertion order."""
    head = canonical_json(header).encode("utf-8")
    parts = [CONTAINER_MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, encode_halt(arr)]
    return b"".join(parts)


def decode_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != CONTAINER_MAGIC:
        raise ValueError("not a checkpoint container")
    pos = 8
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blocks = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        blocks[name], pos = decode_halt(data, pos)
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint container")
    return header, blocks


def save_container(path, header: dict, blocks: dict[str, np.ndarray]) -> None:
    write_bytes_atomic(path, encode_container(header, blocks))


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_container(Path(path).read_bytes())
