"""Independent reference NIFTI-1 writer used as the parser oracle.

Assembles the 348-byte header field-by-field from the published layout
(offset/format table below) with struct.pack, entirely separate from the
production parser. Tests write files with this module and assert the
parser reproduces shapes, scaling and voxel values.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

# (name, offset, struct format) for every field of the NIFTI-1 header.
FIELDS = [
    ("sizeof_hdr", 0, "i"),
    ("data_type", 4, "10s"),
    ("db_name", 14, "18s"),
    ("extents", 32, "i"),
    ("session_error", 36, "h"),
    ("regular", 38, "c"),
    ("dim_info", 39, "B"),
    ("dim", 40, "8h"),
    ("intent_p1", 56, "f"),
    ("intent_p2", 60, "f"),
    ("intent_p3", 64, "f"),
    ("intent_code", 68, "h"),
    ("datatype", 70, "h"),
    ("bitpix", 72, "h"),
    ("slice_start", 74, "h"),
    ("pixdim", 76, "8f"),
    ("vox_offset", 108, "f"),
    ("scl_slope", 112, "f"),
    ("scl_inter", 116, "f"),
    ("slice_end", 120, "h"),
    ("slice_code", 122, "B"),
    ("xyzt_units", 123, "B"),
    ("cal_max", 124, "f"),
    ("cal_min", 128, "f"),
    ("slice_duration", 132, "f"),
    ("toffset", 136, "f"),
    ("glmax", 140, "i"),
    ("glmin", 144, "i"),
    ("descrip", 148, "80s"),
    ("aux_file", 228, "24s"),
    ("qform_code", 252, "h"),
    ("sform_code", 254, "h"),
    ("quatern_b", 256, "f"),
    ("quatern_c", 260, "f"),
    ("quatern_d", 264, "f"),
    ("qoffset_x", 268, "f"),
    ("qoffset_y", 272, "f"),
    ("qoffset_z", 276, "f"),
    ("srow_x", 280, "4f"),
    ("srow_y", 296, "4f"),
    ("srow_z", 312, "4f"),
    ("intent_name", 328, "16s"),
    ("magic", 344, "4s"),
]

DTYPE_TO_CODE = {
    np.dtype(np.uint8): (2, 8),
    np.dtype(np.int16): (4, 16),
    np.dtype(np.int32): (8, 32),
    np.dtype(np.float32): (16, 32),
    np.dtype(np.float64): (64, 64),
    np.dtype(np.uint16): (512, 16),
    np.dtype(np.uint32): (768, 32),
}


def build_header(values: dict, endian: str = "<") -> bytes:
    buf = bytearray(348)
    for name, offset, fmt in FIELDS:
        if name not in values:
            continue
        val = values[name]
        if isinstance(val, (tuple, list, np.ndarray)):
            struct.pack_into(endian + fmt, buf, offset, *val)
        else:
            struct.pack_into(endian + fmt, buf, offset, val)
    return bytes(buf)


def header_values(array: np.ndarray, *, voxel_size=(1.0, 1.0, 1.0),
                  slope=0.0, inter=0.0, affine=None, vox_offset=352.0,
                  magic=b"n+1\x00") -> dict:
    dtype = np.dtype(array.dtype)
    code, bits = DTYPE_TO_CODE[dtype]
    dim = [array.ndim] + list(array.shape) + [1] * (7 - array.ndim)
    pixdim = [1.0] + list(voxel_size) + [1.0] * (7 - len(voxel_size))
    values = {
        "sizeof_hdr": 348,
        "dim": dim,
        "datatype": code,
        "bitpix": bits,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": slope,
        "scl_inter": inter,
        "magic": magic,
    }
    if affine is not None:
        affine = np.asarray(affine, dtype=float)
        values["sform_code"] = 1
        values["srow_x"] = affine[0, :]
        values["srow_y"] = affine[1, :]
        values["srow_z"] = affine[2, :]
    return values


def write_nifti(path, array: np.ndarray, *, endian: str = "<",
                voxel_size=(1.0, 1.0, 1.0), slope=0.0, inter=0.0,
                affine=None, gzipped=None, truncate_to=None,
                header_overrides=None) -> Path:
    """Write ``array`` (stored dtype preserved) as a single-file NIFTI-1."""
    path = Path(path)
    if gzipped is None:
        gzipped = path.name.endswith(".nii.gz")
    values = header_values(array, voxel_size=voxel_size, slope=slope,
                           inter=inter, affine=affine)
    if header_overrides:
        values.update(header_overrides)
    header = build_header(values, endian)
    payload = header + b"\x00" * (int(values["vox_offset"]) - 348)
    data = np.asarray(array, dtype=np.dtype(array.dtype).newbyteorder(endian))
    payload += data.tobytes(order="F")
    if truncate_to is not None:
        payload = payload[:truncate_to]
    if gzipped:
        with gzip.open(path, "wb") as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)
    return path


def byteswap_header(header: bytes) -> bytes:
    """Swap every multi-byte numeric field; the parse must be unchanged."""
    buf = bytearray(header)
    for _, offset, fmt in FIELDS:
        if fmt[-1] in ("s", "c", "B"):
            continue
        count = int(fmt[:-1] or 1)
        size = struct.calcsize(fmt[-1])
        for k in range(count):
            start = offset + k * size
            buf[start:start + size] = buf[start:start + size][::-1]
    return bytes(buf)
