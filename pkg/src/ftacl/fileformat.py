"""On-disk formats.

FTT1 tensor file::

    b"FTT1" | u8 dtype code | u8 rank | rank x u64 extents (LE) | row-major LE payload

dtype codes: 1 = f32, 2 = f64.

Checkpoint bundle (``.ftck``)::

    b"FTCK" | u32 version | u32 metadata length | metadata (UTF-8 key=value lines)
    | u32 tensor count | per tensor: u16 name length, name, u64 blob length, FTT1 blob
    | 32-byte SHA-256 of everything before it
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"FTT1"
BUNDLE_MAGIC = b"FTCK"
BUNDLE_VERSION = 1

_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    head = TENSOR_MAGIC + struct.pack("<BB", _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def tensor_nbytes(shape, dtype="f32") -> int:
    itemsize = 4 if dtype == "f32" else 8
    return 6 + 8 * len(shape) + itemsize * int(np.prod(shape, dtype=np.int64))


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != TENSOR_MAGIC:
        raise FormatError("not an FTT1 tensor")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise FormatError("truncated FTT1 header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    dt = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + n * dt.itemsize:
        raise FormatError("FTT1 payload length does not match extents")
    return np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def _encode_meta(meta: dict) -> bytes:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise FormatError(f"metadata entry {k!r} not representable")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode()


def _decode_meta(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode().splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out


def bundle_to_bytes(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    meta_raw = _encode_meta(meta)
    parts = [BUNDLE_MAGIC, struct.pack("<II", BUNDLE_VERSION, len(meta_raw)), meta_raw]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nm = name.encode()
        blob = tensor_to_bytes(arr)
        parts += [struct.pack("<H", len(nm)), nm, struct.pack("<Q", len(blob)), blob]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def bundle_nbytes(shapes: dict[str, tuple], meta: dict, dtype="f32") -> int:
    """Exact size of :func:`bundle_to_bytes` output without materialising tensors."""
    n = 4 + 8 + len(_encode_meta(meta)) + 4 + 32
    for name, shape in shapes.items():
        n += 2 + len(name.encode()) + 8 + tensor_nbytes(shape, dtype)
    return n


def bundle_from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if len(buf) < 4 + 8 + 4 + 32 or buf[:4] != BUNDLE_MAGIC:
        raise FormatError("not an FTCK checkpoint")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    version, mlen = struct.unpack_from("<II", body, 4)
    if version != BUNDLE_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {BUNDLE_VERSION})")
    off = 12
    meta = _decode_meta(body[off : off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + nl].decode()
        off += nl
        (bl,) = struct.unpack_from("<Q", body, off)
        off += 8
        tensors[name] = tensor_from_bytes(body[off : off + bl])
        off += bl
    if off != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return tensors, meta


def save_bundle(path, tensors: dict[str, np.ndarray], meta: dict) -> int:
    raw = bundle_to_bytes(tensors, meta)
    Path(path).write_bytes(raw)
    return len(raw)


def load_bundle(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return bundle_from_bytes(Path(path).read_bytes())
