"""Tagged binary container shared by episode files and checkpoints.

Layout, all integers little-endian::

    magic (5 bytes) b"\\n"
    u32 manifest length, manifest text (UTF-8 ``key = value`` lines)
    u32 array count
    per array: u16 name length, name, u8 kind (b"f" float32 | b"i" int32),
               u8 ndim, ndim x u32 extents, raw little-endian data

Nothing may follow the last array.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_KINDS = {b"f": np.dtype("<f4"), b"i": np.dtype("<i4")}


class CorruptFileError(ValueError):
    """The file is truncated, has a foreign magic, or is otherwise unreadable."""


class ValidationError(ValueError):
    """The file parsed but its content contradicts its manifest or schema."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def format_manifest(manifest: dict[str, object]) -> str:
    lines = []
    for key, value in manifest.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"manifest entry {key!r} cannot be encoded")
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptFileError(f"manifest line {n} has no '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def encode(magic: bytes, manifest: dict[str, object], arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 5:
        raise ValueError("magic must be 5 bytes")
    text = format_manifest(manifest).encode()
    parts = [magic, b"\n", struct.pack("<I", len(text)), text, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            kind = b"f"
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            kind = b"i"
        else:
            raise TypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        target = _KINDS[kind]
        cast = arr.astype(target)
        if kind == b"f" and arr.dtype != np.float32 and not np.array_equal(cast, arr, equal_nan=True):
            raise ValueError(f"array {name!r} is not exactly representable as float32")
        if kind == b"i" and not np.array_equal(cast, arr):
            raise ValueError(f"array {name!r} overflows int32")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + kind + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(cast).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFileError(f"{self.source}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, magic: bytes, source: str = "<bytes>") -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(buf, source)
    head = r.take(6, "magic")
    if head != magic + b"\n":
        raise CorruptFileError(f"{source}: bad magic {head[:5]!r}, expected {magic!r}")
    (mlen,) = r.unpack("<I", "manifest length")
    try:
        manifest = parse_manifest(r.take(mlen, "manifest").decode())
    except UnicodeDecodeError as exc:
        raise CorruptFileError(f"{source}: manifest is not UTF-8") from exc
    (count,) = r.unpack("<I", "array count")
    arrays: dict[str, np.ndarray] = {}
    for k in range(count):
        (nlen,) = r.unpack("<H", f"array {k} name length")
        name = r.take(nlen, f"array {k} name").decode(errors="replace")
        kind = r.take(1, f"array {name!r} kind")
        if kind not in _KINDS:
            raise CorruptFileError(f"{source}: array {name!r} has unknown kind {kind!r}")
        (ndim,) = r.unpack("<B", f"array {name!r} rank")
        shape = r.unpack(f"<{ndim}I", f"array {name!r} shape")
        dtype = _KINDS[kind]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = r.take(nbytes, f"array {name!r} data")
        if name in arrays:
            raise CorruptFileError(f"{source}: duplicate array {name!r}")
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CorruptFileError(f"{source}: {len(buf) - r.pos} unexpected trailing bytes")
    return manifest, arrays


def write(path, magic: bytes, manifest: dict[str, object], arrays: dict[str, np.ndarray]) -> None:
    data = encode(magic, manifest, arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    tmp.replace(path)


def read(path, magic: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    return decode(path.read_bytes(), magic, str(path))
