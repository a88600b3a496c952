"""HMC1 parameter checkpoints.

Layout, little-endian throughout:

    b"HMC1"  u32 version
    u32 meta_len  meta (utf-8 key=value lines)
    u32 n_blocks
    per block: u32 name_len  name (utf-8)  u32 ndim  u32 dims[ndim]  f64 data[prod(dims)]
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, IntegrityError

MAGIC = b"HMC1"
VERSION = 1


def pack(params: Mapping[str, np.ndarray], meta: Mapping[str, object] | None = None) -> bytes:
    meta_txt = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_txt)), meta_txt, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")  # keeps 0-d shapes; tobytes() is C-order
        enc = name.encode()
        parts.append(struct.pack("<I", len(enc)) + enc)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise IntegrityError(f"{self.path}: truncated at byte {self.pos} (need {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def unpack(raw: bytes, path="<bytes>") -> tuple[dict[str, np.ndarray], dict[str, str]]:
    r = _Reader(raw, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        meta_txt = r.take(r.u32()).decode()
        names = []
        params = {}
        for _ in range(r.u32()):
            names.append(r.take(r.u32()).decode())
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = int(np.prod(shape, dtype=np.int64))
            params[names[-1]] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    except UnicodeDecodeError as e:
        raise IntegrityError(f"{path}: undecodable text field ({e.reason})") from None
    if r.pos != len(raw):
        raise IntegrityError(f"{path}: {len(raw) - r.pos} trailing bytes")
    meta = dict(line.split("=", 1) for line in meta_txt.splitlines() if "=" in line)
    return params, meta


def save(path, params, meta=None) -> None:
    Path(path).write_bytes(pack(params, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return unpack(Path(path).read_bytes(), path)


def checksum(params: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.asarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()
