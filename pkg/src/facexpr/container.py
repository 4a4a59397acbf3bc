"""Tagged binary container shared by shape models and regressors.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"FXPRBIN1"
    offset 8   uint32    length L of the metadata record
    offset 12  L bytes   UTF-8 text, one ``key=value`` per line
    ...        uint32    number of arrays
    per array: uint16 name length, name bytes (UTF-8),
               uint8 ndim, ndim * uint64 dims,
               prod(dims) * float64 values (little-endian, C order)

The metadata always carries ``kind``, ``version`` and ``endianness``.
Integer arrays are stored as float64; callers convert back.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ContainerError

MAGIC = b"FXPRBIN1"
VERSION = 1


def write_container(path, kind: str, metadata: dict, arrays: dict) -> None:
    meta = {"kind": kind, "version": str(VERSION), "endianness": "little"}
    meta.update({k: str(v) for k, v in metadata.items()})
    for key, value in meta.items():
        if "\n" in key or "=" in key or "\n" in value:
            raise ValueError(f"metadata entry {key!r} is not representable")
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")

    chunks = [MAGIC, struct.pack("<I", len(text)), text, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".fxb")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(
                f"{self.path}: truncated container while reading {what} at byte offset {self.pos}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path, expected_kind: str | None = None) -> tuple[dict, dict]:
    """Return ``(metadata, arrays)``; raises ContainerError on any malformation."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ContainerError(f"{path}: cannot read container ({exc})") from exc

    r = _Reader(data, path)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic header at byte offset 0 (got {magic!r})")

    (meta_len,) = r.unpack("<I", "metadata length")
    meta_offset = r.pos
    try:
        text = r.take(meta_len, "metadata").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ContainerError(f"{path}: metadata at byte offset {meta_offset} is not UTF-8") from exc
    meta = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(
                f"{path}: malformed metadata line {line!r} in record at byte offset {meta_offset}"
            )
        meta[key] = value
    for key in ("kind", "version", "endianness"):
        if key not in meta:
            raise ContainerError(f"{path}: metadata at byte offset {meta_offset} lacks {key!r}")
    if meta["endianness"] != "little":
        raise ContainerError(f"{path}: unsupported endianness {meta['endianness']!r}")
    if meta["version"] != str(VERSION):
        raise ContainerError(f"{path}: unsupported container version {meta['version']!r}")
    if expected_kind is not None and meta["kind"] != expected_kind:
        raise ContainerError(f"{path}: expected a {expected_kind!r} container, found {meta['kind']!r}")

    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<H", "array name length")
        try:
            name = r.take(name_len, "array name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"{path}: array name at byte offset {start} is not UTF-8") from exc
        (ndim,) = r.unpack("<B", f"ndim of {name!r}")
        dims = r.unpack(f"<{ndim}Q", f"shape of {name!r}") if ndim else ()
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.take(8 * n, f"values of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(data):
        raise ContainerError(f"{path}: {len(data) - r.pos} trailing bytes at byte offset {r.pos}")
    return meta, arrays
