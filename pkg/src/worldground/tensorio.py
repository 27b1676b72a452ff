"""Binary tensor container used for samples and checkpoints.

One tensor block:

    bytes 0..3   magic b"WGND"
    byte  4      dtype code: 0 = float32, 1 = uint8
    byte  5      ndim
    next 4*ndim  dims, little-endian uint32 each
    rest         payload, row-major, little-endian

A container file is a flat sequence of keyed records until EOF:

    uint16-le key length | key bytes (utf-8) | tensor block

Keys stay in insertion order, so writing the same mapping twice produces
byte-identical files. JSON metadata rides along as a uint8 tensor (the
encoded bytes) under whatever key the caller picks, conventionally "meta".
All errors carry the byte offset of the bad record.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"WGND"
DTYPE_F32 = 0
DTYPE_U8 = 1
_MAX_NDIM = 8
_MAX_KEY = 4096

_CODE_TO_NP = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1")}
_NP_TO_CODE = {np.dtype("float32"): DTYPE_F32, np.dtype("uint8"): DTYPE_U8}


class FormatError(ValueError):
    """Malformed container bytes; message names the byte offset."""


def write_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)  # not ascontiguousarray: that would promote 0-d to 1-d
    if arr.dtype not in _NP_TO_CODE:
        raise FormatError(f"unsupported dtype {arr.dtype}; only float32 and uint8 serialize")
    if arr.ndim > _MAX_NDIM:
        raise FormatError(f"tensor rank {arr.ndim} exceeds limit {_MAX_NDIM}")
    code = _NP_TO_CODE[arr.dtype]
    head = MAGIC + struct.pack("<BB", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = arr.astype(_CODE_TO_NP[code], copy=False).tobytes()
    return head + dims + payload


def read_tensor(buf: bytes, offset: int = 0):
    """Decode one tensor block at `offset`; returns (array, next_offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic at byte {offset}: expected {MAGIC!r}")
    if len(buf) < offset + 6:
        raise FormatError(f"truncated header at byte {offset}")
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODE_TO_NP:
        raise FormatError(f"unknown dtype code {code} at byte {offset + 4}")
    if ndim > _MAX_NDIM:
        raise FormatError(f"tensor rank {ndim} at byte {offset + 5} exceeds limit {_MAX_NDIM}")
    dims_at = offset + 6
    if len(buf) < dims_at + 4 * ndim:
        raise FormatError(f"truncated dims at byte {dims_at}")
    dims = struct.unpack_from(f"<{ndim}I", buf, dims_at) if ndim else ()
    dt = _CODE_TO_NP[code]
    count = 1
    for d in dims:
        count *= d
    data_at = dims_at + 4 * ndim
    nbytes = count * dt.itemsize
    if len(buf) < data_at + nbytes:
        raise FormatError(
            f"truncated payload at byte {data_at}: need {nbytes} bytes, have {len(buf) - data_at}"
        )
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=data_at).reshape(dims)
    if code == DTYPE_F32:
        arr = arr.astype(np.float32, copy=False)  # native view of little-endian data
    return arr.copy(), data_at + nbytes


def pack_entries(entries: dict) -> bytes:
    out = []
    for key, arr in entries.items():
        kb = key.encode("utf-8")
        if not kb or len(kb) > _MAX_KEY:
            raise FormatError(f"key length {len(kb)} outside 1..{_MAX_KEY}")
        out.append(struct.pack("<H", len(kb)))
        out.append(kb)
        out.append(write_tensor(arr))
    return b"".join(out)


def unpack_entries(buf: bytes) -> dict:
    entries = {}
    offset = 0
    n = len(buf)
    while offset < n:
        if n < offset + 2:
            raise FormatError(f"truncated key length at byte {offset}")
        (klen,) = struct.unpack_from("<H", buf, offset)
        if klen == 0 or klen > _MAX_KEY:
            raise FormatError(f"key length {klen} at byte {offset} outside 1..{_MAX_KEY}")
        key_at = offset + 2
        if n < key_at + klen:
            raise FormatError(f"truncated key at byte {key_at}")
        try:
            key = buf[key_at : key_at + klen].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"key at byte {key_at} is not valid utf-8") from e
        if key in entries:
            raise FormatError(f"duplicate key {key!r} at byte {offset}")
        arr, offset = read_tensor(buf, key_at + klen)
        entries[key] = arr
    return entries


def write_container(path, entries: dict) -> None:
    with open(path, "wb") as f:
        f.write(pack_entries(entries))


def read_container(path) -> dict:
    with open(path, "rb") as f:
        return unpack_entries(f.read())
