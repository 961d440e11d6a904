"""Binary tensor (FYMT), weights (FYMW) and PPM image files.

FYMT layout, all little-endian::

    bytes 0-3   b"FYMT"
    byte  4     dtype code (1 = float32, 2 = float64)
    byte  5     ndim
    ndim x u32  extents
    payload     row-major values

FYMW layout: ``b"FYMW"``, version u16, tensor count u32, then per tensor a
u16 name length, the UTF-8 name and an embedded FYMT record.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, SizeMismatchError, TensorFormatError, TruncatedPayloadError

FYMT_MAGIC = b"FYMT"
FYMW_MAGIC = b"FYMW"
FYMW_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _as_array(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    return arr


def encode_tensor(t) -> bytes:
    arr = _as_array(t)
    if arr.ndim > 255:
        raise TensorFormatError(f"too many dims: {arr.ndim}")
    header = FYMT_MAGIC + bytes([_CODES[arr.dtype], arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()


def _decode_from(stream: io.BufferedIOBase, strict_end: bool) -> np.ndarray:
    head = stream.read(6)
    if len(head) < 4 or head[:4] != FYMT_MAGIC:
        raise BadMagicError(f"bad tensor magic {head[:4]!r}, expected {FYMT_MAGIC!r}")
    if len(head) < 6:
        raise TruncatedPayloadError("tensor header truncated")
    code, ndim = head[4], head[5]
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    raw_dims = stream.read(4 * ndim)
    if len(raw_dims) != 4 * ndim:
        raise TruncatedPayloadError("tensor extents truncated")
    dims = struct.unpack(f"<{ndim}I", raw_dims)
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = stream.read(count * dtype.itemsize)
    if len(payload) < count * dtype.itemsize:
        got = len(payload) // dtype.itemsize
        raise TruncatedPayloadError(f"header declares {dims} ({count} values) but payload holds {got}")
    if strict_end and stream.read(1):
        raise SizeMismatchError(f"payload longer than the {count} values declared by extents {dims}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def decode_tensor(data: bytes) -> np.ndarray:
    return _decode_from(io.BytesIO(data), strict_end=True)


def write_tensor(t, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_weights(tensors: dict, path) -> None:
    """Write an ordered name -> tensor mapping as an FYMW file."""
    buf = io.BytesIO()
    buf.write(FYMW_MAGIC)
    buf.write(struct.pack("<HI", FYMW_VERSION, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(encode_tensor(t))
    Path(path).write_bytes(buf.getvalue())


def read_weights(path) -> dict[str, np.ndarray]:
    stream = io.BytesIO(Path(path).read_bytes())
    magic = stream.read(4)
    if magic != FYMW_MAGIC:
        raise BadMagicError(f"bad weights magic {magic!r}, expected {FYMW_MAGIC!r}")
    head = stream.read(6)
    if len(head) < 6:
        raise TruncatedPayloadError("weights header truncated")
    version, count = struct.unpack("<HI", head)
    if version != FYMW_VERSION:
        raise TensorFormatError(f"unsupported weights version {version}")
    out = {}
    for _ in range(count):
        raw_len = stream.read(2)
        if len(raw_len) < 2:
            raise TruncatedPayloadError("weights file ends before all tensors were read")
        (n,) = struct.unpack("<H", raw_len)
        name = stream.read(n)
        if len(name) < n:
            raise TruncatedPayloadError("tensor name truncated")
        out[name.decode("utf-8")] = _decode_from(stream, strict_end=False)
    if stream.read(1):
        raise SizeMismatchError("trailing bytes after the declared tensors")
    return out


def write_ppm(image, path) -> None:
    """Write a ``3 x H x W`` (or ``H x W``) image with values in [0, 1] as binary P6."""
    arr = _as_array(image).astype(np.float64)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise TensorFormatError(f"PPM needs 3xHxW or HxW, got {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    h, w = arr.shape[1:]
    pix = np.clip(np.rint(np.clip(arr, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    body = pix.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + body)


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back into a float32 ``3 x H x W`` array in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise BadMagicError(f"not a binary PPM: {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    body = data[pos + 1:pos + 1 + w * h * 3]
    if len(body) < w * h * 3:
        raise TruncatedPayloadError("PPM pixel data truncated")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (pix.transpose(2, 0, 1).astype(np.float32) / maxval)
