"""Minimal NIfTI-1 volume I/O (single-file .nii / .nii.gz, 3D only)."""

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes we can read/write.
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
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(Exception):
    pass


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read_volume(path):
    """Read a 3D NIfTI-1 volume.

    Returns (data, pixdim) with data as a float64/float32/int array in
    (i, j, k) index order and pixdim the three voxel spacings.
    """
    path = Path(path)
    if not path.exists():
        raise NiftiError(f"no such file: {path}")
    with _open(path, "rb") as f:
        hdr = f.read(HEADER_SIZE)
        if len(hdr) < HEADER_SIZE:
            raise NiftiError(f"truncated header in {path}")
        endian = "<"
        (sizeof_hdr,) = struct.unpack("<i", hdr[:4])
        if sizeof_hdr != HEADER_SIZE:
            endian = ">"
            (sizeof_hdr,) = struct.unpack(">i", hdr[:4])
            if sizeof_hdr != HEADER_SIZE:
                raise NiftiError(f"not a NIfTI-1 file: {path}")
        dim = struct.unpack(endian + "8h", hdr[40:56])
        ndim = dim[0]
        if ndim < 3:
            raise NiftiError(f"expected a 3D volume, got {ndim}D: {path}")
        shape = tuple(dim[1 : 1 + ndim])
        if any(s > 1 for s in shape[3:]):
            raise NiftiError(f"expected a 3D volume, got shape {shape}: {path}")
        shape = shape[:3]
        (datatype,) = struct.unpack(endian + "h", hdr[70:72])
        if datatype not in _DTYPES:
            raise NiftiError(f"unsupported datatype code {datatype}: {path}")
        pixdim = struct.unpack(endian + "8f", hdr[76:108])[1:4]
        (vox_offset,) = struct.unpack(endian + "f", hdr[108:112])
        scl_slope, scl_inter = struct.unpack(endian + "2f", hdr[112:120])
        magic = hdr[344:348]
        if magic not in (b"n+1\x00", b"ni1\x00"):
            raise NiftiError(f"bad magic {magic!r}: {path}")
        f.seek(int(vox_offset))
        dtype = np.dtype(_DTYPES[datatype]).newbyteorder(endian)
        count = int(np.prod(shape))
        raw = f.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise NiftiError(f"truncated data in {path}")
        data = np.frombuffer(raw, dtype=dtype, count=count)
        # NIfTI stores data Fortran-ordered over (i, j, k).
        data = data.reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    else:
        data = np.asarray(data)
    return data, pixdim


def write_volume(path, data, pixdim=(1.0, 1.0, 1.0)):
    """Write a 3D array as a NIfTI-1 single file (.nii or .nii.gz)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError(f"expected 3D data, got shape {data.shape}")
    dtype = np.dtype(data.dtype)
    if dtype == np.bool_:
        data = data.astype(np.uint8)
        dtype = np.dtype(np.uint8)
    if dtype not in _CODES:
        data = data.astype(np.float32)
        dtype = np.dtype(np.float32)
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODES[dtype])
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[344:348] = MAGIC
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # extension flag
        f.write(np.asfortranarray(data).tobytes(order="F"))
    return path
