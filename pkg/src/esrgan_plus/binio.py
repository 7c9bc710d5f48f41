"""Checksummed little-endian binary containers shared by weight, NIQE and checkpoint files."""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

CHECKSUM_SIZE = 32


class IntegrityError(ValueError):
    """File content does not match its trailing checksum or has a bad header."""


def seal(payload: bytes) -> bytes:
    return payload + hashlib.sha256(payload).digest()


def unseal(blob: bytes, source: str = "<bytes>") -> bytes:
    if len(blob) < CHECKSUM_SIZE:
        raise IntegrityError(f"{source}: file too short to hold a checksum")
    payload, digest = blob[:-CHECKSUM_SIZE], blob[-CHECKSUM_SIZE:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{source}: checksum mismatch, file is corrupted")
    return payload


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u32(self, value: int) -> None:
        self.buf.write(struct.pack("<I", value))

    def raw(self, data: bytes) -> None:
        self.buf.write(data)

    def blob(self, data: bytes) -> None:
        self.buf.write(struct.pack("<Q", len(data)))
        self.buf.write(data)

    def text(self, s: str) -> None:
        data = s.encode("utf-8")
        self.u32(len(data))
        self.buf.write(data)

    def json(self, obj) -> None:
        self.blob(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))

    def f64(self, arr: np.ndarray) -> None:
        self.buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def array(self, arr: np.ndarray) -> None:
        self.u32(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.f64(arr)

    def named_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.u32(len(arrays))
        for name, arr in arrays.items():
            self.text(name)
            self.array(np.asarray(arr))

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class Reader:
    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data = data
        self.pos = 0
        self.source = source

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"{self.source}: truncated record")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        (n,) = struct.unpack("<Q", self._take(8))
        return self._take(n)

    def text(self) -> str:
        return self._take(self.u32()).decode("utf-8")

    def json(self):
        return json.loads(self.blob().decode("utf-8"))

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64)

    def array(self) -> np.ndarray:
        shape = tuple(self.u32() for _ in range(self.u32()))
        return self.f64(int(np.prod(shape, dtype=np.int64))).reshape(shape)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {self.text(): self.array() for _ in range(self.u32())}

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise IntegrityError(f"{self.source}: {len(self.data) - self.pos} trailing bytes")


def check_header(reader: Reader, magic: bytes, version: int) -> None:
    got = reader.raw(len(magic))
    if got != magic:
        raise IntegrityError(f"{reader.source}: bad magic {got!r}, expected {magic!r}")
    ver = reader.u32()
    if ver != version:
        raise IntegrityError(f"{reader.source}: unsupported format version {ver}")
