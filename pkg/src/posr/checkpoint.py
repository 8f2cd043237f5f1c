"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"POSR"                      magic
    u16                          format version (1)
    u32 + bytes                  UTF-8 config echo
    u32                          parameter count
    per parameter:
        u16 + bytes              UTF-8 name
        u8                       ndim
        u32 * ndim               shape
        f64 * prod(shape)        values, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedFileError, UnsupportedVersionError

MAGIC = b"POSR"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config_text: str = ""
    version: int = VERSION


def write_checkpoint(path, params: dict[str, np.ndarray], config_text: str = "") -> None:
    cfg = config_text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, value in params.items():
        value = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"{self.path}: file ends inside {what} (offset {self.pos}, need {n} bytes)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: expected magic {MAGIC!r}, found {magic!r}")
    version, cfg_len = r.unpack("<HI", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    config_text = r.take(cfg_len, "config echo").decode("utf-8")
    (count,) = r.unpack("<I", "parameter count")
    params = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"parameter {i} name length")
        name = r.take(name_len, f"parameter {i} name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"parameter {name} rank")
        shape = r.unpack(f"<{ndim}I", f"parameter {name} shape")
        n = int(np.prod(shape, dtype=np.int64))
        raw = r.take(8 * n, f"parameter {name} values")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return Checkpoint(params=params, config_text=config_text, version=version)
