"""Real even-order spherical harmonics signal representation.

Diffusion signals are antipodally symmetric, so only even-degree harmonics
carry information.  At maximum degree 2 the representation has 6 real
coefficients per voxel, ordered (0,0), (2,-2), (2,-1), (2,0), (2,1), (2,2).
Fitting is linear least squares against the sampled directions; a single
factorization of the design matrix is shared by every voxel.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import lpmv

from .core import BinaryMask, Volume, check_same_grid


class FitError(ValueError):
    """The direction set cannot support the requested fit."""


@dataclass(frozen=True)
class ShBasis:
    """Real symmetric spherical-harmonics basis of even maximum degree."""

    l_max: int = 2

    def __post_init__(self):
        if self.l_max < 0 or self.l_max % 2 != 0:
            raise ValueError("l_max must be a non-negative even integer")

    @property
    def n_coeffs(self):
        # even degrees only: sum of (2l + 1) for l = 0, 2, ..., l_max
        return (self.l_max + 1) * (self.l_max + 2) // 2

    @property
    def lm_pairs(self):
        pairs = []
        for l in range(0, self.l_max + 1, 2):
            for m in range(-l, l + 1):
                pairs.append((l, m))
        return tuple(pairs)


def _to_angles(dirs):
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise ValueError("directions must have shape (n, 3)")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-length direction")
    unit = dirs / norms[:, np.newaxis]
    theta = np.arccos(np.clip(unit[:, 2], -1.0, 1.0))
    phi = np.arctan2(unit[:, 1], unit[:, 0])
    return theta, phi


def sh_basis_values(l, m, theta, phi):
    """Evaluate one real harmonic at polar angle theta, azimuth phi."""
    am = abs(m)
    k = math.sqrt(
        (2 * l + 1) / (4.0 * math.pi) * math.factorial(l - am) / math.factorial(l + am)
    )
    p = lpmv(am, l, np.cos(theta))
    if m == 0:
        return k * p
    if m < 0:
        return math.sqrt(2.0) * k * p * np.sin(am * phi)
    return math.sqrt(2.0) * k * p * np.cos(m * phi)


def sh_basis_row(direction, basis=None):
    """All basis functions evaluated at one unit direction.

    Returns a vector of length ``basis.n_coeffs`` in the fixed channel
    order.  The direction must be unit length within 1e-4.
    """
    if basis is None:
        basis = ShBasis()
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-4:
        raise ValueError("direction must be unit length within 1e-4")
    return design_matrix(d[np.newaxis, :], basis)[0]


def design_matrix(dirs, basis=None):
    """Rows evaluate every basis function at one direction: shape (n, n_coeffs)."""
    if basis is None:
        basis = ShBasis()
    theta, phi = _to_angles(dirs)
    cols = [sh_basis_values(l, m, theta, phi) for l, m in basis.lm_pairs]
    return np.stack(cols, axis=1)


# Relative singular-value cutoff below which design directions are treated
# as dependent and the corresponding modes are dropped from the solve.
_SV_RTOL = 1e-8

# Normalized signals above this ratio are treated as noise outliers.
B0_CLAMP_MAX = 2.0

# Voxel-axis block length for float64 solves; fixed so that any routine
# reproducing the fit blockwise gets bit-identical results.
FIT_BLOCK = 1 << 16


class _TruncatedLstsq:
    """Pseudo-inverse solver built once, applied to many right-hand sides."""

    def __init__(self, A):
        u, s, vt = np.linalg.svd(A, full_matrices=False)
        keep = s > _SV_RTOL * s[0]
        self.rank = int(np.count_nonzero(keep))
        self.pinv = (vt[keep].T / s[keep]) @ u[:, keep].T

    def solve(self, B):
        # B: (n_dirs, n_voxels) -> coefficients (n_coeffs, n_voxels)
        return self.pinv @ B


def fit_sh(signals, dirs, basis=None):
    """Least-squares spherical-harmonics coefficients per voxel.

    ``signals`` carries one channel per direction in ``dirs``.  Computation
    runs in float64; the stored coefficients are float32.  Measurements are
    re-sorted into a canonical direction order internally, so permuting
    channels and directions together gives bit-identical coefficients.
    """
    if basis is None:
        basis = ShBasis()
    dirs = np.asarray(dirs, dtype=np.float64)
    if signals.channels != dirs.shape[0]:
        raise FitError(
            "signal has %d channels but %d directions given"
            % (signals.channels, dirs.shape[0])
        )
    if dirs.shape[0] < basis.n_coeffs:
        raise FitError(
            "need at least %d directions for l_max=%d"
            % (basis.n_coeffs, basis.l_max)
        )
    order = np.lexsort((dirs[:, 2], dirs[:, 1], dirs[:, 0]))
    A = design_matrix(dirs[order], basis)
    solver = _TruncatedLstsq(A)
    nx, ny, nz, _ = signals.data.shape
    flat = signals.data.reshape(-1, signals.channels)[:, order]
    n_vox = flat.shape[0]
    coeffs = np.empty((n_vox, basis.n_coeffs), dtype=np.float32)
    # block the voxel axis to bound the float64 working set
    for lo in range(0, n_vox, FIT_BLOCK):
        hi = min(lo + FIT_BLOCK, n_vox)
        block = flat[lo:hi].astype(np.float64).T
        coeffs[lo:hi] = solver.solve(block).T.astype(np.float32)
    return Volume(signals.grid, coeffs.reshape(nx, ny, nz, basis.n_coeffs))


def sh_reconstruct(coeffs, dirs, basis=None):
    """Signal values predicted by the coefficients along ``dirs``."""
    if basis is None:
        basis = ShBasis()
    if coeffs.channels != basis.n_coeffs:
        raise FitError(
            "coefficient volume has %d channels, basis needs %d"
            % (coeffs.channels, basis.n_coeffs)
        )
    A = design_matrix(dirs, basis)
    nx, ny, nz, _ = coeffs.data.shape
    flat = coeffs.data.reshape(-1, basis.n_coeffs).astype(np.float64)
    sig = (flat @ A.T).reshape(nx, ny, nz, A.shape[0])
    return Volume(coeffs.grid, sig.astype(np.float32))


def b0_normalize(dwi, b0, eps=None, clamp_max=B0_CLAMP_MAX):
    """Divide each channel by the non-weighted reference signal.

    Returns the normalized volume and a background mask that is True where
    the reference signal fell below ``eps``; those voxels are zeroed.
    Elsewhere the ratio is clipped to [0, clamp_max] to bound noise-driven
    outliers (the noiseless ratio is physically <= 1).  ``eps`` defaults to
    1e-3 times the 99th percentile of ``b0``.
    """
    check_same_grid(dwi, b0)
    if b0.channels != 1:
        raise ValueError("reference volume must have exactly one channel")
    ref = b0.channel(0).astype(np.float64)
    if eps is None:
        eps = 1e-3 * float(np.percentile(ref, 99.0))
        if eps <= 0:
            eps = float(np.finfo(np.float32).tiny)
    background = ref < eps
    ratio = dwi.data.astype(np.float64) / np.maximum(ref, eps)[..., np.newaxis]
    ratio = np.clip(ratio, 0.0, clamp_max)
    ratio[background] = 0.0
    return Volume(dwi.grid, ratio.astype(np.float32)), BinaryMask(dwi.grid, background)
