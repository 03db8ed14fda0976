"""Minimal single-file NIfTI-1 (.nii / .nii.gz) reader and writer.

Covers exactly what volume ingestion needs: 3D scalar grids with the
common integer/float voxel types, slope/intercept scaling, and either
byte order. Written files are float32, little-endian, magic ``n+1``.
Gzipped output uses mtime=0 so identical volumes produce identical bytes.
"""

from __future__ import annotations

import contextlib
import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

HEADER_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}


@contextlib.contextmanager
def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        if "w" in mode:
            # empty name + fixed mtime keep written files byte-deterministic
            with open(path, "wb") as raw:
                with gzip.GzipFile(filename="", mode=mode, fileobj=raw, mtime=0) as gz:
                    yield gz
        else:
            with gzip.open(path, mode) as gz:
                yield gz
    else:
        with open(path, mode) as fh:
            yield fh


def read_nifti(path) -> np.ndarray:
    """Read a .nii/.nii.gz file and return its voxel grid as float32."""
    path = Path(path)
    try:
        with _open(path, "rb") as fh:
            header = fh.read(HEADER_SIZE)
            if len(header) < HEADER_SIZE:
                raise FormatError(f"{path}: truncated header")
            order = "<"
            (sizeof_hdr,) = struct.unpack("<i", header[:4])
            if sizeof_hdr != HEADER_SIZE:
                (sizeof_hdr,) = struct.unpack(">i", header[:4])
                if sizeof_hdr != HEADER_SIZE:
                    raise FormatError(f"{path}: not a NIfTI-1 file")
                order = ">"
            magic = header[344:348]
            if magic not in (_MAGIC_SINGLE, _MAGIC_PAIR):
                raise FormatError(f"{path}: bad magic {magic!r}")
            dim = struct.unpack(order + "8h", header[40:56])
            datatype, _bitpix = struct.unpack(order + "2h", header[70:74])
            (vox_offset,) = struct.unpack(order + "f", header[108:112])
            scl_slope, scl_inter = struct.unpack(order + "2f", header[112:120])
            ndim = dim[0]
            if ndim < 1 or ndim > 7:
                raise FormatError(f"{path}: invalid dim[0]={ndim}")
            shape = tuple(int(d) for d in dim[1 : ndim + 1])
            if datatype not in _DTYPES:
                raise FormatError(f"{path}: unsupported datatype code {datatype}")
            dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
            offset = int(vox_offset) if vox_offset else HEADER_SIZE + 4
            fh.seek(offset)
            count = int(np.prod(shape))
            raw = fh.read(count * dtype.itemsize)
            if len(raw) < count * dtype.itemsize:
                raise FormatError(f"{path}: truncated voxel data")
            data = np.frombuffer(raw, dtype=dtype, count=count)
            # NIfTI stores the first index fastest
            data = data.reshape(shape, order="F").astype(np.float32)
            if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
                slope = scl_slope if scl_slope != 0.0 else 1.0
                data = data * slope + scl_inter
            return data
    except FormatError:
        raise
    except (OSError, struct.error, ValueError) as exc:
        raise FormatError(f"{path}: cannot parse NIfTI file ({exc})") from exc


def write_nifti(path, voxels: np.ndarray) -> None:
    """Write a voxel grid as a float32 single-file NIfTI-1 image."""
    path = Path(path)
    voxels = np.asarray(voxels, dtype=np.float32)
    ndim = voxels.ndim
    if ndim < 1 or ndim > 7:
        raise FormatError(f"cannot write {ndim}-dimensional grid as NIfTI")
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = [ndim] + list(voxels.shape) + [1] * (7 - ndim)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<2h", header, 70, 16, 32)  # float32, 32 bits
    pixdim = [1.0] * 8
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = _MAGIC_SINGLE
    with _open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00\x00\x00\x00")  # empty extension block
        fh.write(voxels.tobytes(order="F"))
