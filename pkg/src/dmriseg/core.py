"""Voxel grid and volume primitives shared by the whole pipeline.

Conventions used everywhere downstream:

* a volume is a dense grid of float32 values with axes (x, y, z, channel),
* the linear (on-disk) element order is x fastest-varying, then y, then z,
  then channel, i.e. ``data.ravel(order='F')``,
* grid spacing is in millimeters per voxel.

All types are immutable after construction; the operations are pure
functions, so they can be called concurrently on disjoint voxel ranges.
"""

from dataclasses import dataclass

import numpy as np


class GridMismatchError(ValueError):
    """Two volumes/masks that must share a grid do not."""


@dataclass(frozen=True)
class Grid3:
    """Axis-aligned 3D voxel grid.

    Parameters
    ----------
    dims : tuple of int
        Voxel counts (nx, ny, nz), each >= 1.
    spacing : tuple of float
        Voxel size in mm (sx, sy, sz), each > 0.
    origin : tuple of float
        World coordinate (mm) of the center of voxel (0, 0, 0).
    """

    dims: tuple
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("dims, spacing and origin must have length 3")
        if any(d < 1 for d in dims):
            raise ValueError("all dims must be >= 1, got %r" % (dims,))
        if any(s <= 0 for s in spacing):
            raise ValueError("all spacings must be > 0, got %r" % (spacing,))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def n_voxels(self):
        nx, ny, nz = self.dims
        return nx * ny * nz


def _freeze(arr):
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """Dense multi-channel scalar volume on a :class:`Grid3`.

    ``data`` has shape (nx, ny, nz, channels), dtype float32, and all values
    finite.  A 3D array is accepted and treated as single-channel.
    """

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[..., np.newaxis]
        if arr.ndim != 4:
            raise ValueError("volume data must be 3D or 4D, got %dD" % arr.ndim)
        if arr.shape[:3] != self.grid.dims:
            raise ValueError(
                "data shape %r does not match grid dims %r"
                % (arr.shape[:3], self.grid.dims)
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume data contains non-finite values")
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(arr)))

    @property
    def channels(self):
        return self.data.shape[3]

    def channel(self, c):
        """Return channel ``c`` as a read-only (nx, ny, nz) array."""
        return self.data[..., c]

    @classmethod
    def full(cls, grid, value, channels=1):
        return cls(grid, np.full(grid.dims + (channels,), value, dtype=np.float32))


@dataclass(frozen=True)
class BinaryMask:
    """Per-voxel boolean mask on a :class:`Grid3`."""

    grid: Grid3
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=bool)
        if arr.shape != self.grid.dims:
            raise ValueError(
                "mask shape %r does not match grid dims %r"
                % (arr.shape, self.grid.dims)
            )
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(arr)))

    @property
    def n_foreground(self):
        return int(self.data.sum())


def check_same_grid(a, b):
    """Raise :class:`GridMismatchError` unless the two grids are equal."""
    if a.grid != b.grid:
        raise GridMismatchError("grids differ: %r vs %r" % (a.grid, b.grid))


def voxel_index(grid, i, j, k):
    """Linear storage index of voxel (i, j, k): x fastest-varying.

    Raises IndexError for out-of-range coordinates.
    """
    nx, ny, nz = grid.dims
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise IndexError(
            "voxel (%d, %d, %d) outside grid %r" % (i, j, k, grid.dims)
        )
    return i + nx * (j + ny * k)


def voxel_coords(grid, index):
    """Inverse of :func:`voxel_index`."""
    nx, ny, nz = grid.dims
    if not 0 <= index < grid.n_voxels:
        raise IndexError("linear index %d outside grid %r" % (index, grid.dims))
    i = index % nx
    j = (index // nx) % ny
    k = index // (nx * ny)
    return i, j, k


def _catmull_rom_weights(t):
    # 4 taps at offsets -1..2 around the unit cell, fraction t in [0, 1).
    # Reproduces linear functions exactly; weights sum to 1.
    t2 = t * t
    t3 = t2 * t
    return np.array(
        [
            -0.5 * t3 + t2 - 0.5 * t,
            1.5 * t3 - 2.5 * t2 + 1.0,
            -1.5 * t3 + 2.0 * t2 + 0.5 * t,
            0.5 * t3 - 0.5 * t2,
        ]
    )


def _cubic_axis_downsample(arr, axis, factor):
    # Sample the Catmull-Rom interpolant at the centers of length-`factor`
    # blocks along `axis`; tap coordinates are clamped to the array domain.
    n = arr.shape[axis]
    n_out = n // factor
    centers = np.arange(n_out) * factor + (factor - 1) / 2.0
    base = np.floor(centers).astype(int)
    t = float(centers[0] - base[0])  # identical for every block
    w = _catmull_rom_weights(t)
    out = None
    for h in range(4):
        taps = np.clip(base + h - 1, 0, n - 1)
        term = w[h] * np.take(arr, taps, axis=axis)
        out = term if out is None else out + term
    return out


def resample_cubic(v, factor):
    """Downsample a single-channel volume by an integer factor per axis.

    Each output voxel is the separable tricubic (Catmull-Rom) interpolant of
    the input, sampled at the center of its ``factor**3`` source block.
    Sample coordinates are clamped at the domain edges.  Dims that are not
    divisible by ``factor`` are zero-padded at the high end first.  Output
    values may overshoot (e.g. go negative near sharp edges); clamping is
    left to the caller.
    """
    if v.channels != 1:
        raise ValueError("resample_cubic expects a single-channel volume")
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    arr = v.channel(0).astype(np.float64)
    pad = [(-d) % factor for d in v.grid.dims]
    if any(pad):
        arr = np.pad(arr, [(0, p) for p in pad], mode="constant")
    for axis in range(3):
        arr = _cubic_axis_downsample(arr, axis, factor)
    sx, sy, sz = v.grid.spacing
    ox, oy, oz = v.grid.origin
    shift = (factor - 1) / 2.0
    grid = Grid3(
        dims=arr.shape,
        spacing=(sx * factor, sy * factor, sz * factor),
        origin=(ox + sx * shift, oy + sy * shift, oz + sz * shift),
    )
    return Volume(grid, arr.astype(np.float32))


def argmax_threshold_binarize(probs, thr):
    """Threshold every channel of a probability volume into a mask.

    A voxel is foreground in the mask of channel c iff ``probs[..., c] >= thr``.
    Channels are independent (labels may overlap), so this is thresholding,
    not a mutually exclusive argmax.  Raises ValueError if any probability
    lies outside [0, 1].
    """
    if not 0.0 < thr < 1.0:
        raise ValueError("threshold must lie in (0, 1), got %r" % thr)
    if probs.data.min() < 0.0 or probs.data.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    return [
        BinaryMask(probs.grid, probs.channel(c) >= thr)
        for c in range(probs.channels)
    ]
