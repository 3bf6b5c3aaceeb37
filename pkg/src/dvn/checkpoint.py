"""Binary checkpoint container.

Layout::

    8 bytes   magic  b"DVNCKPT1"
    8 bytes   header length H, unsigned little-endian
    H bytes   UTF-8 JSON header (kind, architecture, config, parameter count, crc32)
    8*N bytes parameters, little-endian float64

The header fully describes how to rebuild the model; the payload is the
concatenation of the model's ``state_dict`` tensors in order.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DVNCKPT1"


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_container(path, kind: str, header: dict, params: np.ndarray) -> None:
    params = np.ascontiguousarray(params, dtype="<f8")
    payload = params.tobytes()
    header = dict(header, kind=kind, num_params=int(params.size), crc32=zlib.crc32(payload))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_container(path, kind: str | None = None) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CheckpointFormatError("file too short for checkpoint preamble", len(data))
    if data[:8] != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    (hlen,) = struct.unpack("<Q", data[8:16])
    end = 16 + hlen
    if end > len(data):
        raise CheckpointFormatError(f"header declares {hlen} bytes, file truncated", len(data))
    try:
        header = json.loads(data[16:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}", 16) from exc
    if kind is not None and header.get("kind") != kind:
        raise CheckpointFormatError(f"expected a {kind} checkpoint, found {header.get('kind')!r}", 16)
    n = int(header.get("num_params", -1))
    if n < 0:
        raise CheckpointFormatError("header lacks num_params", 16)
    payload = data[end:]
    if len(payload) != 8 * n:
        raise CheckpointFormatError(
            f"payload holds {len(payload)} bytes, expected {8 * n}", end + min(len(payload), 8 * n)
        )
    if zlib.crc32(payload) != header.get("crc32"):
        raise CheckpointFormatError("payload checksum mismatch", end)
    return header, np.frombuffer(payload, dtype="<f8").astype(np.float64)
