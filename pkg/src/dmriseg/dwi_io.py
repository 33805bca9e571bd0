"""Minimal NIfTI-1 and FSL bvals/bvecs file I/O.

Only single-file NIfTI-1 (.nii / .nii.gz) with uint8 / int16 / float32
payloads is supported.  Orientation: pixel spacing and the sform translation
are honored; rotation parts are readable from the header but never applied,
since every grid in this pipeline is axis-aligned.

Writes are fully deterministic (fixed header bytes, gzip mtime pinned to 0)
so identical inputs produce byte-identical files.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .core import Grid3, Volume
from .qspace import GradientTable

# NIfTI-1 datatype codes
_DT_UINT8 = 2
_DT_INT16 = 4
_DT_FLOAT32 = 16

_DTYPES = {
    "uint8": (_DT_UINT8, 8, np.uint8),
    "int16": (_DT_INT16, 16, np.int16),
    "float32": (_DT_FLOAT32, 32, np.float32),
}
_CODE_TO_NAME = {code: name for name, (code, _, _) in _DTYPES.items()}

_HDR_SIZE = 348
_VOX_OFFSET = 352.0

# little-endian NIfTI-1 header layout, 348 bytes
_HDR_FMT = "<i10s18sih2B8h3f4h8f3fh2B4f2i80s24s2h6f12f16s4s"


class NiftiError(Exception):
    """Base class for NIfTI format errors."""


class BadMagicError(NiftiError):
    """File is not a single-file NIfTI-1 image."""


class UnsupportedDatatypeError(NiftiError):
    """Datatype code outside the supported {uint8, int16, float32} set."""


class TruncatedFileError(NiftiError):
    """Payload shorter than the header promises."""


class GradientFormatError(ValueError):
    """Malformed bvals/bvecs text files."""


@dataclass(frozen=True)
class NiftiHeaderLite:
    """The header fields this pipeline actually consumes."""

    dims: tuple
    datatype: str
    pixdim: tuple
    scl_slope: float
    scl_inter: float
    vox_offset: int
    srow: tuple  # three rows of four floats; pass-through only


@dataclass(frozen=True)
class GradientFilePair:
    """Raw FSL-layout gradient files: one bvals row, three bvecs rows."""

    bvals: np.ndarray  # (m,)
    bvecs: np.ndarray  # (3, m)

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if bvals.ndim != 1 or bvecs.shape != (3, bvals.size):
            raise GradientFormatError(
                "bvals length %d does not match bvecs columns %r"
                % (bvals.size, bvecs.shape)
            )
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)


def _open_read(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _parse_header(raw):
    if len(raw) < _HDR_SIZE:
        raise TruncatedFileError("file shorter than the 348-byte header")
    fields = struct.unpack(_HDR_FMT, raw[:_HDR_SIZE])
    sizeof_hdr = fields[0]
    if sizeof_hdr != _HDR_SIZE:
        # try byte-swapped (big-endian) header
        fields = struct.unpack(_HDR_FMT.replace("<", ">"), raw[:_HDR_SIZE])
        if fields[0] != _HDR_SIZE:
            raise BadMagicError("not a NIfTI-1 file (bad sizeof_hdr)")
    magic = fields[-1]
    if magic not in (b"n+1\x00",):
        raise BadMagicError("bad magic %r (only single-file NIfTI-1 supported)" % magic)
    dim = fields[7:15]
    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise NiftiError("unsupported number of dimensions: %d" % ndim)
    dims = tuple(int(d) for d in dim[1 : ndim + 1])
    datatype_code = fields[19]
    if datatype_code not in _CODE_TO_NAME:
        raise UnsupportedDatatypeError("datatype code %d not supported" % datatype_code)
    pixdim = fields[22:30]
    vox_offset = int(fields[30])
    scl_slope = float(fields[31])
    scl_inter = float(fields[32])
    sform_code = fields[45]
    srow = tuple(float(x) for x in fields[52:64])
    if sform_code <= 0:
        srow = (
            float(pixdim[1]), 0.0, 0.0, 0.0,
            0.0, float(pixdim[2]), 0.0, 0.0,
            0.0, 0.0, float(pixdim[3]), 0.0,
        )
    return NiftiHeaderLite(
        dims=dims,
        datatype=_CODE_TO_NAME[datatype_code],
        pixdim=tuple(float(p) for p in pixdim[1:4]),
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        vox_offset=vox_offset,
        srow=(srow[0:4], srow[4:8], srow[8:12]),
    )


def read_nifti_header(path):
    with _open_read(path) as f:
        raw = f.read(_HDR_SIZE)
    return _parse_header(raw)


def read_nifti(path):
    """Read a single-file NIfTI-1 image into a :class:`Volume`.

    Values are scaled by scl_slope/scl_inter (slope 0 means no scaling);
    spacing comes from pixdim and the origin from the sform translation.
    """
    with _open_read(path) as f:
        raw = f.read()
    hdr = _parse_header(raw)
    dims = hdr.dims + (1,) * (4 - len(hdr.dims))
    nx, ny, nz, nc = dims
    _, bits, np_dtype = _DTYPES[hdr.datatype]
    n_bytes = nx * ny * nz * nc * bits // 8
    payload = raw[hdr.vox_offset : hdr.vox_offset + n_bytes]
    if len(payload) < n_bytes:
        raise TruncatedFileError(
            "payload has %d bytes, header promises %d" % (len(payload), n_bytes)
        )
    flat = np.frombuffer(payload, dtype=np.dtype(np_dtype).newbyteorder("<"))
    data = flat.reshape((nx, ny, nz, nc), order="F")
    if hdr.scl_slope not in (0.0, 1.0) or hdr.scl_inter != 0.0:
        slope = hdr.scl_slope if hdr.scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * np.float32(slope) + np.float32(hdr.scl_inter)
    grid = Grid3(
        dims=(nx, ny, nz),
        spacing=hdr.pixdim,
        origin=(hdr.srow[0][3], hdr.srow[1][3], hdr.srow[2][3]),
    )
    return Volume(grid, data.astype(np.float32))


def _quantization(data, datatype):
    # slope/inter mapping real values onto the raw integer range; values
    # already integral and in range are stored verbatim (slope 1, inter 0)
    span = {"uint8": 255.0, "int16": 32767.0}[datatype]
    lo = {"uint8": 0.0, "int16": -32768.0}[datatype]
    vmin = float(data.min())
    vmax = float(data.max())
    integral = np.all(data == np.round(data))
    if integral and vmin >= lo and vmax <= span:
        return 1.0, 0.0
    if vmax == vmin:
        return 1.0, vmin
    return (vmax - vmin) / span, vmin


def write_nifti(v, path, datatype="float32"):
    """Write a :class:`Volume` as single-file NIfTI-1 (.nii or .nii.gz).

    float32 writes are lossless (slope 1, inter 0); integer writes quantize
    onto the datatype's range and store the slope/inter needed to invert.
    """
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError("datatype %r not supported" % datatype)
    code, bits, np_dtype = _DTYPES[datatype]
    data = v.data
    if datatype == "float32":
        slope, inter = 1.0, 0.0
        raw = np.asarray(data, dtype="<f4")
    else:
        slope, inter = _quantization(data, datatype)
        q = np.round((data.astype(np.float64) - inter) / slope)
        raw = q.astype(np.dtype(np_dtype).newbyteorder("<"))

    nx, ny, nz = v.grid.dims
    nc = v.channels
    ndim = 4 if nc > 1 else 3
    dim = [ndim, nx, ny, nz, nc if nc > 1 else 1, 1, 1, 1]
    sx, sy, sz = v.grid.spacing
    ox, oy, oz = v.grid.origin
    pixdim = [1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0]
    header = struct.pack(
        _HDR_FMT,
        _HDR_SIZE,                      # sizeof_hdr
        b"", b"",                       # data_type, db_name (unused)
        0, 0,                           # extents, session_error
        ord("r"), 0,                    # regular, dim_info
        *dim,                           # dim[8]
        0.0, 0.0, 0.0,                  # intent_p1..p3
        0, code, bits, 0,               # intent_code, datatype, bitpix, slice_start
        *pixdim,                        # pixdim[8]
        _VOX_OFFSET, slope, inter,      # vox_offset, scl_slope, scl_inter
        0, 0, 2,                        # slice_end, slice_code, xyzt_units (mm)
        0.0, 0.0, 0.0, 0.0,             # cal_max, cal_min, slice_duration, toffset
        0, 0,                           # glmax, glmin
        b"dmriseg", b"",                # descrip, aux_file
        0, 1,                           # qform_code, sform_code
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,   # quatern_b..d, qoffset_x..z
        sx, 0.0, 0.0, ox,               # srow_x
        0.0, sy, 0.0, oy,               # srow_y
        0.0, 0.0, sz, oz,               # srow_z
        b"",                            # intent_name
        b"n+1\x00",                     # magic
    )
    body = header + b"\x00\x00\x00\x00" + raw.tobytes(order="F")
    if str(path).endswith(".gz"):
        with open(path, "wb") as f:
            # filename="" keeps the member name out of the stream so equal
            # volumes produce byte-identical files at any path
            with gzip.GzipFile(
                filename="", mode="wb", fileobj=f, mtime=0
            ) as gz:
                gz.write(body)
    else:
        with open(path, "wb") as f:
            f.write(body)


def _parse_rows(path, n_rows):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if len(lines) != n_rows:
        raise GradientFormatError(
            "%s: expected %d non-empty rows, found %d" % (path, n_rows, len(lines))
        )
    rows = []
    for ln in lines:
        try:
            rows.append([float(tok) for tok in ln.split()])
        except ValueError as e:
            raise GradientFormatError("%s: non-numeric token (%s)" % (path, e))
    return rows


def read_gradients(bval_path, bvec_path, b0_tol=50.0):
    """Read FSL-layout gradient files into a :class:`GradientTable`.

    bvals is one whitespace-separated row; bvecs is three rows (x, y, z
    components).  Directions with b above ``b0_tol`` are renormalized to
    unit length; entries with b <= ``b0_tol`` are flagged as b0.
    """
    (bvals,) = _parse_rows(bval_path, 1)
    bvec_rows = _parse_rows(bvec_path, 3)
    pair = GradientFilePair(np.array(bvals), np.array(bvec_rows))
    bvals = pair.bvals
    dirs = pair.bvecs.T.copy()
    if np.any(bvals < 0):
        raise GradientFormatError("negative b-value")
    is_b0 = np.abs(bvals) <= b0_tol
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(~is_b0 & (norms == 0)):
        raise GradientFormatError("zero-norm direction with b > 0")
    dirs[~is_b0] /= norms[~is_b0, np.newaxis]
    return GradientTable(bvals=bvals, dirs=dirs, is_b0=is_b0)


def write_gradients(table, bval_path, bvec_path):
    """Write a :class:`GradientTable` as FSL bvals/bvecs text files."""
    if table.m == 0:
        raise ValueError("refusing to write an empty gradient table")
    with open(bval_path, "w") as f:
        f.write(" ".join("%.9g" % b for b in table.bvals) + "\n")
    with open(bvec_path, "w") as f:
        for row in table.dirs.T:
            f.write(" ".join("%.9g" % x for x in row) + "\n")
