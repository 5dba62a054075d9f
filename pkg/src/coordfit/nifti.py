"""Minimal single-file NIfTI-1 reader/writer (``.nii`` and ``.nii.gz``).

Supported datatypes are uint8, int16, int32 and float32.  Vector fields are
stored 5-D, ``(nx, ny, nz, 1, 3)``, with intent code 1007 and values in
world millimetres.  Files are always written little-endian with an sform
(code 1) and no qform; gzip output uses a zero timestamp so that rewriting
the same data yields identical bytes.
"""
import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import (BadMagic, DimensionMismatch, NiftiError, TruncatedFile,
                     UnsupportedDatatype)
from .grid import CoordField, DisplacementField, Grid, LabelVolume, Mask, ScalarVolume
from .polyaffine import SvfField, auto_steps

__all__ = [
    "read_header",
    "read_volume",
    "write_volume",
    "read_vector_field",
    "write_vector_field",
    "read_coord_field",
    "write_coord_field",
    "read_displacement",
    "write_displacement",
    "read_svf",
    "write_svf",
]

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
INTENT_VECTOR = 1007
NIFTI_UNITS_MM = 2

# (name, struct code)
_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"),
    ("qoffset_x", "f"), ("qoffset_y", "f"), ("qoffset_z", "f"),
    ("srow_x", "4f"), ("srow_y", "4f"), ("srow_z", "4f"),
    ("intent_name", "16s"), ("magic", "4s"),
]
_FORMAT = "".join(code for _, code in _FIELDS)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE

DATATYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 8: np.dtype("i4"), 16: np.dtype("f4")}


def _field_width(code):
    n = code[:-1]
    return int(n) if n and code[-1] != "s" else 1


def _unpack(raw, endian):
    values = struct.unpack(endian + _FORMAT, raw)
    hdr, pos = {}, 0
    for name, code in _FIELDS:
        width = _field_width(code)
        hdr[name] = values[pos] if width == 1 else tuple(values[pos:pos + width])
        pos += width
    return hdr


def _pack(hdr):
    flat = []
    for name, code in _FIELDS:
        v = hdr[name]
        if _field_width(code) == 1:
            flat.append(v)
        else:
            flat.extend(v)
    return struct.pack("<" + _FORMAT, *flat)


def _load_bytes(path):
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (EOFError, OSError) as exc:
            raise TruncatedFile(f"{path}: corrupt gzip stream ({exc})") from None
    return data


def _parse_header(data, path):
    if len(data) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: header has {len(data)} bytes, expected {HEADER_SIZE}")
    raw = data[:HEADER_SIZE]
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise BadMagic(f"{path}: sizeof_hdr is not {HEADER_SIZE} in either byte order")
    hdr = _unpack(raw, endian)
    if hdr["magic"] != MAGIC:
        raise BadMagic(f"{path}: magic {hdr['magic']!r} is not {MAGIC!r}")
    if hdr["datatype"] not in DATATYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {hdr['datatype']} is not supported")
    if hdr["vox_offset"] < VOX_OFFSET:
        raise NiftiError(f"{path}: vox_offset {hdr['vox_offset']} is below {VOX_OFFSET}")
    ndim = hdr["dim"][0]
    if not 1 <= ndim <= 7 or any(d < 1 for d in hdr["dim"][1:ndim + 1]):
        raise NiftiError(f"{path}: invalid dim field {hdr['dim']}")
    hdr["_endian"] = endian
    return hdr


def read_header(path):
    """Parsed header fields as a dict (raw, no interpretation)."""
    return _parse_header(_load_bytes(path), path)


def _quaternion_affine(hdr):
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    scale = np.array(hdr["pixdim"][1:4], dtype=np.float64) * [1.0, 1.0, qfac]
    m = np.eye(4)
    m[:3, :3] = rot * scale
    m[:3, 3] = hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]
    return m


def _header_grid(hdr):
    if hdr["sform_code"] > 0:
        m = np.eye(4)
        m[0], m[1], m[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        m = _quaternion_affine(hdr)
    else:
        m = np.diag(list(np.abs(hdr["pixdim"][1:4])) + [1.0])
    ndim = hdr["dim"][0]
    full = [hdr["dim"][i] if i <= ndim else 1 for i in range(1, 4)]
    return Grid(tuple(full), m)


def _payload(data, hdr, path):
    ndim = hdr["dim"][0]
    shape = tuple(hdr["dim"][1:ndim + 1])
    dtype = DATATYPES[hdr["datatype"]].newbyteorder(hdr["_endian"])
    start = int(hdr["vox_offset"])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if len(data) < start + nbytes:
        raise TruncatedFile(f"{path}: data payload has {max(len(data) - start, 0)} bytes, "
                            f"expected {nbytes}")
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=start)
    arr = arr.reshape(shape, order="F")
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        arr = arr.astype(np.float64) * slope + inter
    return arr


def read_volume(path, kind="scalar"):
    """Read a 3-D volume.

    Parameters
    ----------
    path : str or Path
        ``.nii`` or gzip-compressed ``.nii.gz`` (detected from content).
    kind : {"scalar", "label", "mask"}
        Container to return.
    """
    data = _load_bytes(path)
    hdr = _parse_header(data, path)
    arr = _payload(data, hdr, path)
    if arr.ndim > 3:
        if any(d != 1 for d in arr.shape[3:]):
            raise DimensionMismatch(f"{path}: expected a 3-D volume, got dim {arr.shape}")
    grid = _header_grid(hdr)
    arr = arr.reshape(grid.dims, order="F")
    if kind == "scalar":
        return ScalarVolume(grid, arr.astype(np.float64))
    if kind == "label":
        return LabelVolume(grid, np.rint(arr).astype(np.int64))
    if kind == "mask":
        return Mask(grid, arr != 0)
    raise ValueError(f"unknown volume kind {kind!r}")


def _base_header(grid, shape, datatype, intent_code=0, intent_p1=0.0):
    m32 = np.asarray(grid.voxel_to_world, dtype=np.float32).astype(np.float64)
    spacing = np.linalg.norm(m32[:3, :3], axis=0)
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    pixdim = [1.0] + [float(s) for s in spacing] + [1.0] * 4
    dtype = DATATYPES[datatype]
    return {
        "sizeof_hdr": HEADER_SIZE, "data_type": b"", "db_name": b"", "extents": 0,
        "session_error": 0, "regular": b"r", "dim_info": 0, "dim": tuple(dim),
        "intent_p1": float(intent_p1), "intent_p2": 0.0, "intent_p3": 0.0,
        "intent_code": intent_code, "datatype": datatype, "bitpix": dtype.itemsize * 8,
        "slice_start": 0, "pixdim": tuple(pixdim), "vox_offset": float(VOX_OFFSET),
        "scl_slope": 1.0, "scl_inter": 0.0, "slice_end": 0, "slice_code": 0,
        "xyzt_units": NIFTI_UNITS_MM, "cal_max": 0.0, "cal_min": 0.0,
        "slice_duration": 0.0, "toffset": 0.0, "glmax": 0, "glmin": 0,
        "descrip": b"coordfit", "aux_file": b"", "qform_code": 0, "sform_code": 1,
        "quatern_b": 0.0, "quatern_c": 0.0, "quatern_d": 0.0,
        "qoffset_x": 0.0, "qoffset_y": 0.0, "qoffset_z": 0.0,
        "srow_x": tuple(m32[0]), "srow_y": tuple(m32[1]), "srow_z": tuple(m32[2]),
        "intent_name": b"", "magic": MAGIC,
    }


def _write(path, hdr, arr):
    dtype = DATATYPES[hdr["datatype"]].newbyteorder("<")
    body = np.asarray(arr).astype(dtype).tobytes(order="F")
    data = _pack(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, compresslevel=6, mtime=0)
    path.write_bytes(data)


def write_volume(vol, path):
    """Write a ScalarVolume (float32), Mask (uint8) or LabelVolume (int16/int32)."""
    if isinstance(vol, ScalarVolume):
        arr, code = vol.values, 16
    elif isinstance(vol, Mask):
        arr, code = vol.flags.astype(np.uint8), 2
    elif isinstance(vol, LabelVolume):
        arr = vol.labels
        code = 4 if arr.max(initial=0) <= np.iinfo(np.int16).max else 8
    else:
        raise TypeError(f"cannot write {type(vol).__name__} as a volume")
    _write(path, _base_header(vol.grid, vol.grid.dims, code), arr)


def write_vector_field(grid, values, path, intent_p1=0.0):
    """Write an ``(nx, ny, nz, 3)`` float field as a 5-D vector NIfTI."""
    values = np.asarray(values, dtype=np.float64).reshape(grid.dims + (3,))
    shape = grid.dims + (1, 3)
    hdr = _base_header(grid, shape, 16, INTENT_VECTOR, intent_p1)
    _write(path, hdr, values.reshape(shape))


def read_vector_field(path):
    """Return ``(grid, values (nx, ny, nz, 3), header)`` of a vector file."""
    data = _load_bytes(path)
    hdr = _parse_header(data, path)
    arr = _payload(data, hdr, path)
    ndim = hdr["dim"][0]
    if ndim != 5 or arr.shape[3] != 1 or arr.shape[4] != 3:
        raise DimensionMismatch(f"{path}: expected dim (5, nx, ny, nz, 1, 3), "
                                f"got {hdr['dim'][:ndim + 1]}")
    grid = _header_grid(hdr)
    return grid, arr.reshape(grid.dims + (3,)).astype(np.float64), hdr


def write_coord_field(cf, path):
    write_vector_field(cf.grid, cf.coords, path)


def read_coord_field(path):
    grid, values, _ = read_vector_field(path)
    return CoordField(grid, values)


def write_displacement(field, path):
    write_vector_field(field.grid, field.disp, path)


def read_displacement(path):
    grid, values, _ = read_vector_field(path)
    return DisplacementField(grid, values)


def write_svf(svf, path):
    """Velocity field file; the step count rides in ``intent_p1``."""
    write_vector_field(svf.grid, svf.velocity, path, intent_p1=svf.n_steps)


def read_svf(path, n_steps=None):
    grid, values, hdr = read_vector_field(path)
    if n_steps is None:
        stored = int(round(hdr["intent_p1"]))
        n_steps = stored if stored >= 1 else auto_steps(values, grid.spacing)
    return SvfField(grid, values, n_steps)
