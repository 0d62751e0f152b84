"""Minimal deterministic PNG encode/decode.

The encoder always writes 8-bit gray or RGB, filter type 0 on every row, a
single IDAT compressed at a fixed zlib level, and no ancillary chunks — so
the same pixels give the same bytes on every run and machine (for a given
zlib, which has had a stable compressed format across releases).

The decoder handles the common 8-bit cases needed to ingest upstream QC
pages: gray, RGB, palette, and alpha variants (alpha composited over
black). Interlaced or 16-bit files are rejected.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

SIGNATURE = b"\x89PNG\r\n\x1a\n"
COMPRESSION_LEVEL = 6


class PngError(Exception):
    pass


def _chunk(kind: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(payload, zlib.crc32(kind))
    return struct.pack(">I", len(payload)) + kind + payload + struct.pack(">I", crc)


def encode_png(image: np.ndarray) -> bytes:
    """Encode a uint8 array, (H, W) gray or (H, W, 3) RGB, to PNG bytes."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise PngError(f"expected uint8 pixels, got {arr.dtype}")
    if arr.ndim == 2:
        color_type, channels = 0, 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color_type, channels = 2, 3
    else:
        raise PngError(f"unsupported array shape {arr.shape}")
    height, width = arr.shape[:2]
    if height == 0 or width == 0:
        raise PngError("empty image")

    ihdr = struct.pack(">IIBBBBB", width, height, 8, color_type, 0, 0, 0)
    raw = arr.reshape(height, width * channels)
    scanlines = bytearray()
    for row in raw:
        scanlines.append(0)          # filter type 0 on every row
        scanlines.extend(row.tobytes())
    idat = zlib.compress(bytes(scanlines), COMPRESSION_LEVEL)
    return SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", idat) + \
        _chunk(b"IEND", b"")


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(data: bytes, width: int, height: int, channels: int) -> bytearray:
    stride = width * channels
    if len(data) < height * (stride + 1):
        raise PngError("truncated IDAT payload")
    out = bytearray(height * stride)
    prev_start = -stride
    pos = 0
    for y in range(height):
        ftype = data[pos]
        pos += 1
        line = data[pos:pos + stride]
        pos += stride
        start = y * stride
        if ftype == 0:
            out[start:start + stride] = line
        elif ftype == 1:
            for i in range(stride):
                left = out[start + i - channels] if i >= channels else 0
                out[start + i] = (line[i] + left) & 0xFF
        elif ftype == 2:
            if y == 0:
                out[start:start + stride] = line
            else:
                for i in range(stride):
                    out[start + i] = (line[i] + out[prev_start + start + i]) & 0xFF
        elif ftype == 3:
            for i in range(stride):
                left = out[start + i - channels] if i >= channels else 0
                up = out[prev_start + start + i] if y > 0 else 0
                out[start + i] = (line[i] + (left + up) // 2) & 0xFF
        elif ftype == 4:
            for i in range(stride):
                left = out[start + i - channels] if i >= channels else 0
                up = out[prev_start + start + i] if y > 0 else 0
                ul = out[prev_start + start + i - channels] \
                    if (y > 0 and i >= channels) else 0
                out[start + i] = (line[i] + _paeth(left, up, ul)) & 0xFF
        else:
            raise PngError(f"unknown filter type {ftype}")
    return out


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes to uint8 (H, W) gray or (H, W, 3) RGB."""
    if data[:8] != SIGNATURE:
        raise PngError("not a PNG (bad signature)")
    pos = 8
    ihdr = None
    palette = None
    idat = bytearray()
    while pos + 8 <= len(data):
        length, kind = struct.unpack_from(">I4s", data, pos)
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if kind == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif kind == b"PLTE":
            palette = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3)
        elif kind == b"IDAT":
            idat.extend(payload)
        elif kind == b"IEND":
            break
    if ihdr is None:
        raise PngError("missing IHDR")
    width, height, depth, color_type, _, _, interlace = ihdr
    if depth != 8:
        raise PngError(f"unsupported bit depth {depth}")
    if interlace != 0:
        raise PngError("interlaced PNGs are unsupported")
    channels = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}.get(color_type)
    if channels is None:
        raise PngError(f"unsupported color type {color_type}")

    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise PngError(f"bad IDAT stream: {exc}") from exc
    pixels = np.frombuffer(bytes(_unfilter(raw, width, height, channels)),
                           dtype=np.uint8).reshape(height, width, channels)

    if color_type == 0:
        return pixels[:, :, 0]
    if color_type == 2:
        return pixels
    if color_type == 3:
        if palette is None:
            raise PngError("palette image without PLTE")
        return palette[pixels[:, :, 0]]
    # alpha variants: composite over black
    alpha = pixels[:, :, -1].astype(np.uint16)
    color = pixels[:, :, :-1].astype(np.uint16)
    composited = ((color * alpha[..., None] + 127) // 255).astype(np.uint8)
    if color_type == 4:
        return composited[:, :, 0]
    return composited
