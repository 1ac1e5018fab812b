"""Minimal NIfTI-1 and MetaImage volume I/O.

Only the header fields the pipeline needs are honored: dim, datatype,
pixdim, scl_slope/inter, vox_offset. Axes are taken in stored order with
the fastest-varying file axis last in memory, so a freshly written payload
of 0..n-1 loads as 0..n-1 in row-major order. Orientation (qform/sform) is
deliberately not interpreted.
"""
from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .errors import FormatError

# NIfTI-1 datatype codes
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4,
                np.dtype(np.float32): 16, np.dtype(np.float64): 64}

_MHD_DTYPES = {"MET_UCHAR": np.uint8, "MET_SHORT": np.int16,
               "MET_FLOAT": np.float32, "MET_DOUBLE": np.float64}


def _open_maybe_gzip(path: str):
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_nifti(path: str | os.PathLike):
    """Returns ``(volume, spacing)``.

    ``volume`` axes are the stored axes reversed (slowest first), so a 3D
    file yields (z, y, x) with spacing ordered to match. Scale slope and
    intercept are applied when the slope is nonzero and non-identity.
    """
    path = str(path)
    with _open_maybe_gzip(path) as f:
        hdr = f.read(348)
        if len(hdr) < 348:
            raise FormatError(f"{path}: truncated NIfTI header")
        sizeof_hdr = struct.unpack("<i", hdr[0:4])[0]
        endian = "<"
        if sizeof_hdr != 348:
            sizeof_hdr = struct.unpack(">i", hdr[0:4])[0]
            if sizeof_hdr != 348:
                raise FormatError(f"{path}: bad sizeof_hdr (not a NIfTI-1 file)")
            endian = ">"
        magic = hdr[344:348]
        if magic[:3] not in (b"n+1", b"ni1"):
            raise FormatError(f"{path}: bad magic {magic!r}")
        dim = struct.unpack(endian + "8h", hdr[40:56])
        ndim = dim[0]
        if not 1 <= ndim <= 7:
            raise FormatError(f"{path}: invalid dim[0] = {ndim}")
        extents = dim[1:1 + ndim]
        datatype = struct.unpack(endian + "h", hdr[70:72])[0]
        if datatype not in _NIFTI_DTYPES:
            raise FormatError(f"{path}: unsupported datatype code {datatype}")
        pixdim = struct.unpack(endian + "8f", hdr[76:108])
        vox_offset = struct.unpack(endian + "f", hdr[108:112])[0]
        scl_slope = struct.unpack(endian + "f", hdr[112:116])[0]
        scl_inter = struct.unpack(endian + "f", hdr[116:120])[0]

        skip = int(vox_offset) - 348
        if skip < 0:
            raise FormatError(f"{path}: vox_offset {vox_offset} before header end")
        if skip:
            f.read(skip)
        dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
        count = int(np.prod(extents))
        raw = f.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise FormatError(f"{path}: truncated voxel payload")
        data = np.frombuffer(raw, dtype=dtype, count=count)
    # fastest-varying stored axis becomes the last memory axis
    volume = data.reshape(tuple(reversed(extents))).astype(
        _NIFTI_DTYPES[datatype])
    spacing = tuple(reversed([float(p) for p in pixdim[1:1 + ndim]]))
    if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
        volume = volume * scl_slope + scl_inter
    return volume, spacing


def write_nifti(path: str | os.PathLike, volume: np.ndarray, spacing=None):
    """Write a volume with the axis convention of :func:`read_nifti`."""
    path = str(path)
    volume = np.asarray(volume)
    if volume.dtype not in _NIFTI_CODES:
        raise FormatError(f"unsupported write dtype {volume.dtype}")
    ndim = volume.ndim
    if spacing is None:
        spacing = (1.0,) * ndim
    extents = tuple(reversed(volume.shape))
    dim = [ndim] + list(extents) + [1] * (7 - ndim)
    pixdim = [1.0] + list(reversed([float(s) for s in spacing])) + [1.0] * (7 - ndim)

    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, _NIFTI_CODES[volume.dtype])
    struct.pack_into("<h", hdr, 72, volume.dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    hdr[344:348] = b"n+1\x00"

    payload = np.ascontiguousarray(volume).astype(
        volume.dtype.newbyteorder("<")).tobytes()
    opener = gzip.open if path.endswith(".gz") else open
    tmp = path + ".tmp"
    with opener(tmp, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * 4)  # extension flag
        f.write(payload)
    os.replace(tmp, path)


def read_mhd(path: str | os.PathLike):
    """Read a MetaImage header + raw payload. Returns ``(volume, spacing)``."""
    path = str(path)
    fields: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if "=" not in line:
                continue
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    try:
        ndims = int(fields["NDims"])
        dims = [int(v) for v in fields["DimSize"].split()]
        elem_type = fields["ElementType"]
        data_file = fields["ElementDataFile"]
    except KeyError as exc:
        raise FormatError(f"{path}: missing MetaImage field {exc.args[0]}") from exc
    if len(dims) != ndims:
        raise FormatError(f"{path}: DimSize has {len(dims)} entries, NDims={ndims}")
    if fields.get("CompressedData", "False").lower() == "true":
        raise FormatError(f"{path}: compressed MetaImage payloads are unsupported")
    if elem_type not in _MHD_DTYPES:
        raise FormatError(f"{path}: unsupported ElementType {elem_type}")
    spacing_field = fields.get("ElementSpacing", " ".join(["1.0"] * ndims))
    spacing = tuple(reversed([float(v) for v in spacing_field.split()]))
    msb = fields.get("BinaryDataByteOrderMSB",
                     fields.get("ElementByteOrderMSB", "False")).lower() == "true"
    dtype = np.dtype(_MHD_DTYPES[elem_type]).newbyteorder(">" if msb else "<")
    raw_path = os.path.join(os.path.dirname(path), data_file)
    count = int(np.prod(dims))
    with open(raw_path, "rb") as f:
        raw = f.read()
    if len(raw) < count * dtype.itemsize:
        raise FormatError(f"{raw_path}: truncated payload")
    data = np.frombuffer(raw, dtype=dtype, count=count)
    volume = data.reshape(tuple(reversed(dims))).astype(_MHD_DTYPES[elem_type])
    return volume, spacing


def read_volume(path: str | os.PathLike):
    """Dispatch on extension: .nii/.nii.gz or .mhd."""
    p = str(path)
    if p.endswith((".nii", ".nii.gz")):
        return read_nifti(p)
    if p.endswith(".mhd"):
        return read_mhd(p)
    raise FormatError(f"unrecognized volume format: {p}")
