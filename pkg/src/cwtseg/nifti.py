"""Minimal single-file NIfTI-1 reader and writer.

Supports uncompressed ``.nii`` volumes with datatype uint8, int16 or
float32, either endianness (detected through the ``sizeof_hdr`` sentinel),
and the ``scl_slope``/``scl_inter`` intensity transform.  No ``.hdr/.img``
pairs, extensions, or compression.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import NiftiParseError
from .volumes import SegmentationMask, VolumeImage

__all__ = ["parse_nifti", "write_nifti"]

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_OFFSET = 344
DT_UINT8, DT_INT16, DT_FLOAT32 = 2, 4, 16
_DTYPES = {DT_UINT8: ("u1", 8), DT_INT16: ("i2", 16), DT_FLOAT32: ("f4", 32)}


def parse_nifti(data: bytes) -> VolumeImage:
    """Decode a single-file NIfTI-1 byte stream into a volume in HU."""
    if len(data) < HEADER_SIZE:
        raise NiftiParseError(
            f"header truncated at byte offset {len(data)}: need {HEADER_SIZE} bytes"
        )
    if struct.unpack_from("<i", data, 0)[0] == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", data, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise NiftiParseError(
            f"sizeof_hdr at byte offset 0 is {struct.unpack_from('<i', data, 0)[0]}, "
            f"expected {HEADER_SIZE} in either byte order"
        )

    magic = data[MAGIC_OFFSET : MAGIC_OFFSET + 4]
    if magic != b"n+1\x00":
        raise NiftiParseError(
            f"magic at byte offset {MAGIC_OFFSET} is {magic!r}, expected b'n+1\\x00'"
        )

    dim = struct.unpack_from(f"{bo}8h", data, 40)
    if dim[0] != 3:
        raise NiftiParseError(f"dim[0] at byte offset 40 is {dim[0]}, expected 3")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise NiftiParseError(f"dim at byte offset 40 has non-positive extent {dim[1:4]}")

    (datatype,) = struct.unpack_from(f"{bo}h", data, 70)
    if datatype not in _DTYPES:
        raise NiftiParseError(
            f"datatype at byte offset 70 is {datatype}, supported: uint8(2), "
            f"int16(4), float32(16)"
        )
    np_code, _ = _DTYPES[datatype]

    pixdim = struct.unpack_from(f"{bo}8f", data, 76)
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise NiftiParseError(
            f"pixdim at byte offset 76 has non-positive spacing {spacing}"
        )

    (vox_offset_f,) = struct.unpack_from(f"{bo}f", data, 108)
    vox_offset = int(vox_offset_f)
    if vox_offset < HEADER_SIZE:
        raise NiftiParseError(
            f"vox_offset at byte offset 108 is {vox_offset_f}, expected >= {HEADER_SIZE}"
        )
    slope, inter = struct.unpack_from(f"{bo}2f", data, 112)
    if slope == 0.0:
        slope = 1.0

    count = nx * ny * nz
    itemsize = np.dtype(np_code).itemsize
    need = vox_offset + count * itemsize
    if len(data) < need:
        raise NiftiParseError(
            f"voxel payload truncated at byte offset {len(data)}: need {need} bytes "
            f"for {count} voxels"
        )
    raw = np.frombuffer(data, dtype=bo + np_code, count=count, offset=vox_offset)
    voxels = raw.astype(np.float32)
    if slope != 1.0 or inter != 0.0:
        voxels = voxels * np.float32(slope) + np.float32(inter)
    # NIfTI stores x fastest; unravel accordingly.
    voxels = voxels.reshape((nx, ny, nz), order="F").copy()
    return VolumeImage(voxels, spacing)


def write_nifti(image: VolumeImage | SegmentationMask) -> bytes:
    """Encode a volume (float32) or mask (uint8) as little-endian NIfTI-1."""
    if isinstance(image, SegmentationMask):
        datatype = DT_UINT8
        payload = np.ascontiguousarray(image.voxels, dtype="u1")
    else:
        datatype = DT_FLOAT32
        payload = np.ascontiguousarray(image.voxels, dtype="<f4")
    np_code, bitpix = _DTYPES[datatype]
    nx, ny, nz = image.dims

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into(
        "<8f", hdr, 76, 1.0, image.spacing_mm[0], image.spacing_mm[1],
        image.spacing_mm[2], 0.0, 0.0, 0.0, 0.0,
    )
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: millimetres
    hdr[MAGIC_OFFSET : MAGIC_OFFSET + 4] = b"n+1\x00"

    out = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    return out + payload.tobytes(order="F")
