"""NIFTI-1 reading and canonical reorientation.

Parses the 348-byte NIFTI-1 header directly (plain ``.nii`` or gzipped
``.nii.gz``), applies slope/intercept scaling, and reorients volumes to a
closest-to-RAS voxel layout so that "axial", "coronal" and "sagittal" mean
the same planes for every file.

Voxel data is always promoted to float64; QC-scale volumes are small enough
that uniform downstream math wins over on-disk compactness.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# NIFTI-1 datatype code -> numpy dtype character (endianness applied later).
DTYPE_CODES = {
    2: "u1",    # uint8
    4: "i2",    # int16
    8: "i4",    # int32
    16: "f4",   # float32
    64: "f8",   # float64
    512: "u2",  # uint16
    768: "u4",  # uint32
}


class NiftiError(Exception):
    """Base class for NIFTI parsing failures."""


class TooShortError(NiftiError):
    pass


class BadMagicError(NiftiError):
    pass


class Nifti2Error(NiftiError):
    """File is NIFTI-2; only NIFTI-1 is supported."""


class UnsupportedDatatypeError(NiftiError):
    pass


class BadDimError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


class GzipReadError(NiftiError):
    pass


@dataclass
class VolumeHeader:
    sizeof_hdr: int
    endianness: str                 # "little" | "big"
    dim: tuple[int, ...]            # 8 entries, dim[0] = rank
    datatype_code: int
    voxel_size: tuple[float, float, float]   # mm
    time_points: int
    scl_slope: float
    scl_inter: float
    affine: np.ndarray              # 4x4 voxel -> world (mm)
    magic: bytes
    vox_offset: int
    warnings: tuple[str, ...] = ()

    @property
    def rank(self) -> int:
        return self.dim[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.dim[1:1 + self.dim[0]])


@dataclass(eq=False)
class Volume:
    """A voxel grid with physical orientation metadata.

    ``data`` is float64 with slope/intercept already applied, shaped
    (nx, ny, nz) or (nx, ny, nz, nt). ``orientation`` holds the
    closest-to-RAS axis codes of the current voxel axes, e.g. ("R","A","S").
    """

    data: np.ndarray
    affine: np.ndarray
    orientation: tuple[str, str, str]
    canonical: bool = False
    warnings: tuple[str, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def time_points(self) -> int:
        return self.data.shape[3] if self.data.ndim == 4 else 1

    def frame(self, t: int = 0) -> "Volume":
        """A 3D view of one time point (the volume itself if already 3D)."""
        if self.data.ndim == 3:
            return self
        return replace(self, data=self.data[..., t])


def _unpack(fmt: str, buf: bytes, offset: int, prefix: str):
    return struct.unpack_from(prefix + fmt, buf, offset)


def _quaternion_rotation(b: float, c: float, d: float) -> np.ndarray | None:
    """Rotation matrix from a unit quaternion's (b, c, d); None if not unit."""
    w2 = 1.0 - (b * b + c * c + d * d)
    if w2 < -1e-5:
        return None
    a = np.sqrt(max(w2, 0.0))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])


def _diagonal_affine(voxel_size) -> np.ndarray:
    aff = np.eye(4)
    for i, v in enumerate(voxel_size):
        aff[i, i] = v if v != 0 else 1.0
    return aff


def parse_header(data: bytes) -> VolumeHeader:
    """Parse a NIFTI-1 header from raw bytes.

    Endianness is detected from the sizeof_hdr field (348 reads correctly
    only under the file's true byte order). Raises TooShortError,
    BadMagicError, Nifti2Error, UnsupportedDatatypeError or BadDimError.
    """
    if len(data) < HEADER_SIZE:
        raise TooShortError(f"need {HEADER_SIZE} header bytes, got {len(data)}")

    if _unpack("i", data, 0, "<")[0] == HEADER_SIZE:
        prefix, endianness = "<", "little"
    elif _unpack("i", data, 0, ">")[0] == HEADER_SIZE:
        prefix, endianness = ">", "big"
    else:
        if data[4:7] == b"n+2" or 540 in (_unpack("i", data, 0, "<")[0],
                                          _unpack("i", data, 0, ">")[0]):
            raise Nifti2Error("NIFTI-2 file; only NIFTI-1 is supported")
        raise BadMagicError("sizeof_hdr is not 348 under either byte order")

    magic = data[344:348]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        if magic[:3] == b"n+2":
            raise Nifti2Error("NIFTI-2 magic; only NIFTI-1 is supported")
        raise BadMagicError(f"bad magic {magic!r}")

    dim = _unpack("8h", data, 40, prefix)
    rank = dim[0]
    if not 1 <= rank <= 4:
        raise BadDimError(f"rank {rank} outside 1..4")
    if any(n < 1 for n in dim[1:1 + rank]):
        raise BadDimError(f"axis lengths {dim[1:1 + rank]} must all be >= 1")

    datatype_code = _unpack("h", data, 70, prefix)[0]
    if datatype_code not in DTYPE_CODES:
        raise UnsupportedDatatypeError(f"datatype code {datatype_code}")

    pixdim = _unpack("8f", data, 76, prefix)
    vox_offset = _unpack("f", data, 108, prefix)[0]
    scl_slope = _unpack("f", data, 112, prefix)[0]
    scl_inter = _unpack("f", data, 116, prefix)[0]
    qform_code = _unpack("h", data, 252, prefix)[0]
    sform_code = _unpack("h", data, 254, prefix)[0]

    warnings: list[str] = []
    voxel_size = tuple(abs(p) for p in pixdim[1:4])

    if sform_code > 0:
        affine = np.eye(4)
        affine[0, :] = _unpack("4f", data, 280, prefix)
        affine[1, :] = _unpack("4f", data, 296, prefix)
        affine[2, :] = _unpack("4f", data, 312, prefix)
    elif qform_code > 0:
        qb, qc, qd = (_unpack("f", data, off, prefix)[0] for off in (256, 260, 264))
        rot = _quaternion_rotation(qb, qc, qd)
        qfac = -1.0 if pixdim[0] == -1 else 1.0
        if rot is None:
            warnings.append("qform quaternion not unit; using diagonal affine")
            affine = _diagonal_affine(voxel_size)
        else:
            scale = np.diag([voxel_size[0], voxel_size[1], voxel_size[2] * qfac])
            affine = np.eye(4)
            affine[:3, :3] = rot @ scale
            affine[:3, 3] = [_unpack("f", data, off, prefix)[0]
                             for off in (268, 272, 276)]
    else:
        affine = _diagonal_affine(voxel_size)

    return VolumeHeader(
        sizeof_hdr=HEADER_SIZE,
        endianness=endianness,
        dim=tuple(dim),
        datatype_code=datatype_code,
        voxel_size=voxel_size,
        time_points=dim[4] if rank == 4 else 1,
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        affine=affine,
        magic=magic,
        vox_offset=int(vox_offset),
        warnings=tuple(warnings),
    )


def orientation_codes(affine: np.ndarray) -> tuple[str, str, str]:
    """Closest world-axis code (R/L, A/P, S/I) for each voxel axis."""
    labels = (("L", "R"), ("P", "A"), ("I", "S"))
    rot = np.asarray(affine)[:3, :3]
    codes = []
    for j in range(3):
        i = int(np.argmax(np.abs(rot[:, j])))
        codes.append(labels[i][1 if rot[i, j] >= 0 else 0])
    return tuple(codes)


def _read_file_bytes(path: Path) -> bytes:
    if path.name.endswith(".nii.gz"):
        try:
            with gzip.open(path, "rb") as fh:
                return fh.read()
        except (gzip.BadGzipFile, EOFError, zlib.error) as exc:
            raise GzipReadError(f"{path}: {exc}") from exc
    return path.read_bytes()


def load_header(path) -> VolumeHeader:
    """Parse just the header of a ``.nii`` / ``.nii.gz`` file."""
    path = Path(path)
    if path.name.endswith(".nii.gz"):
        try:
            with gzip.open(path, "rb") as fh:
                raw = fh.read(HEADER_SIZE)
        except (gzip.BadGzipFile, EOFError, zlib.error) as exc:
            raise GzipReadError(f"{path}: {exc}") from exc
    elif path.name.endswith(".nii"):
        with open(path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
    else:
        raise NiftiError(f"{path}: expected a .nii or .nii.gz file")
    return parse_header(raw)


def load_volume(path) -> Volume:
    """Load a ``.nii`` / ``.nii.gz`` file into a Volume.

    Slope/intercept scaling is applied when scl_slope != 0. The returned
    volume is NOT yet canonically oriented; pass it through
    canonical_orient before slicing.
    """
    path = Path(path)
    if not path.name.endswith((".nii", ".nii.gz")):
        raise NiftiError(f"{path}: expected a .nii or .nii.gz file")
    raw = _read_file_bytes(path)
    header = parse_header(raw)
    if header.magic == MAGIC_PAIR:
        raise BadMagicError(
            f"{path}: header/image pair magic 'ni1' in a single .nii file")

    shape = header.shape
    dtype = np.dtype(DTYPE_CODES[header.datatype_code]).newbyteorder(
        "<" if header.endianness == "little" else ">")
    count = int(np.prod(shape))
    offset = max(header.vox_offset, HEADER_SIZE)
    available = len(raw) - offset
    if available < count * dtype.itemsize:
        raise TruncatedDataError(
            f"{path}: need {count * dtype.itemsize} voxel bytes, have {available}")

    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    if header.scl_slope != 0 and not (header.scl_slope == 1 and header.scl_inter == 0):
        data = data * float(header.scl_slope) + float(header.scl_inter)

    return Volume(
        data=data,
        affine=header.affine,
        orientation=orientation_codes(header.affine),
        warnings=header.warnings,
    )


def canonical_orient(volume: Volume) -> Volume:
    """Permute/flip voxel axes to the closest-to-RAS layout.

    The affine is updated so every voxel keeps its world coordinate
    exactly. Idempotent. If two voxel axes share a dominant world axis the
    data is returned unchanged with a "degenerate_affine" warning (still
    marked canonical so downstream rendering can proceed on best effort).
    """
    rot = volume.affine[:3, :3]
    if abs(np.linalg.det(volume.affine)) < 1e-12:
        raise NiftiError("affine is singular; cannot orient")

    dominant = [int(np.argmax(np.abs(rot[:, j]))) for j in range(3)]
    if len(set(dominant)) < 3:
        return replace(volume, canonical=True,
                       warnings=volume.warnings + ("degenerate_affine",))

    perm = tuple(dominant.index(i) for i in range(3))   # world axis -> voxel axis
    flips = tuple(i for i in range(3) if rot[i, perm[i]] < 0)

    axes = perm + (3,) if volume.data.ndim == 4 else perm
    data = np.transpose(volume.data, axes)
    for i in flips:
        data = np.flip(data, axis=i)
    data = np.ascontiguousarray(data)

    # new voxel index -> old voxel index, so new_affine = affine @ mapping
    mapping = np.zeros((4, 4))
    mapping[3, 3] = 1.0
    for i in range(3):
        n_i = data.shape[i]
        if i in flips:
            mapping[perm[i], i] = -1.0
            mapping[perm[i], 3] = n_i - 1
        else:
            mapping[perm[i], i] = 1.0
    affine = volume.affine @ mapping

    return Volume(
        data=data,
        affine=affine,
        orientation=orientation_codes(affine),
        canonical=True,
        warnings=volume.warnings,
    )
