"""Synthetic diffusion-weighted phantoms with known tract labels.

Signals follow the monoexponential tensor model S = S0 exp(-b g^T D g).
Tracts are tubes (straight or arc-shaped) carrying an anisotropic tensor;
where tubes overlap the tensors are averaged so every voxel stays
monoexponential and a log-linear tensor fit can recover it exactly.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import BinaryMask, Grid3, Volume

# Literature-typical diffusivities, mm^2/s.
TRACT_EIGENVALUES = (1.7e-3, 0.3e-3, 0.3e-3)
BACKGROUND_DIFFUSIVITY = 0.8e-3
CSF_DIFFUSIVITY = 3.0e-3


@dataclass(frozen=True)
class DiffusionTensor:
    """Symmetric positive semi-definite 3x3 tensor, mm^2/s."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("tensor must be a 3x3 matrix")
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-12):
            raise ValueError("tensor must be symmetric")
        if np.min(np.linalg.eigvalsh(m)) < -1e-15:
            raise ValueError("tensor must be positive semi-definite")
        m = 0.5 * (m + m.T)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def isotropic(cls, d):
        return cls(d * np.eye(3))

    @classmethod
    def from_eigenvalues(cls, eigenvalues, principal_dir):
        """Cylindrically framed tensor with the first eigenvalue along
        ``principal_dir`` and the remaining two on perpendicular axes."""
        lam = np.asarray(eigenvalues, dtype=np.float64)
        if lam.shape != (3,) or np.any(lam < 0):
            raise ValueError("need three eigenvalues >= 0")
        e1 = np.asarray(principal_dir, dtype=np.float64)
        n = np.linalg.norm(e1)
        if n == 0:
            raise ValueError("principal direction must be nonzero")
        e1 = e1 / n
        helper = np.eye(3)[np.argmin(np.abs(e1))]
        e2 = helper - np.dot(helper, e1) * e1
        e2 /= np.linalg.norm(e2)
        e3 = np.cross(e1, e2)
        frame = np.stack([e1, e2, e3], axis=1)
        return cls(frame @ np.diag(lam) @ frame.T)

    def to_dict(self):
        return {"matrix": self.matrix.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["matrix"], dtype=np.float64))


@dataclass(frozen=True)
class Tube:
    """Straight circular cylinder along one grid axis, in voxel units.

    ``center`` gives the two perpendicular coordinates in ascending axis
    order; ``span`` is the closed [lo, hi] range along ``axis``.
    """

    axis: str
    center: tuple
    radius: float
    span: tuple

    def __post_init__(self):
        if self.axis not in ("x", "y", "z"):
            raise ValueError("axis must be one of x, y, z")
        center = tuple(float(c) for c in self.center)
        span = tuple(float(s) for s in self.span)
        if len(center) != 2 or len(span) != 2:
            raise ValueError("center needs 2 coords, span needs 2 bounds")
        if self.radius <= 0:
            raise ValueError("radius must be > 0")
        if span[0] > span[1]:
            raise ValueError("span lo must not exceed hi")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "span", span)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def _axis_index(self):
        return "xyz".index(self.axis)

    def contains(self, i, j, k):
        coords = (i, j, k)
        a = self._axis_index
        perp = [coords[d] for d in range(3) if d != a]
        along = coords[a]
        d2 = (perp[0] - self.center[0]) ** 2 + (perp[1] - self.center[1]) ** 2
        return (
            (d2 <= self.radius**2)
            & (along >= self.span[0])
            & (along <= self.span[1])
        )

    def bounds(self):
        a = self._axis_index
        out = [None, None, None]
        out[a] = self.span
        perp_axes = [d for d in range(3) if d != a]
        for c, d in zip(self.center, perp_axes):
            out[d] = (c - self.radius, c + self.radius)
        return tuple(out)

    def principal_direction(self):
        e = np.zeros(3)
        e[self._axis_index] = 1.0
        return e

    def to_dict(self):
        return {
            "kind": "tube",
            "axis": self.axis,
            "center": list(self.center),
            "radius": self.radius,
            "span": list(self.span),
        }


@dataclass(frozen=True)
class CurvedTube:
    """Circular-arc tube in a coordinate plane, in voxel units.

    The centerline is the arc of radius ``arc_radius`` around ``center``
    (in-plane coordinates) at ``height`` along the remaining axis, swept
    between ``angle_start_deg`` and ``angle_end_deg``.
    """

    plane: str
    center: tuple
    height: float
    arc_radius: float
    tube_radius: float
    angle_start_deg: float
    angle_end_deg: float

    def __post_init__(self):
        if self.plane not in ("xy", "xz", "yz"):
            raise ValueError("plane must be one of xy, xz, yz")
        center = tuple(float(c) for c in self.center)
        if len(center) != 2:
            raise ValueError("center needs 2 in-plane coords")
        if self.arc_radius <= 0 or self.tube_radius <= 0:
            raise ValueError("radii must be > 0")
        sweep = self.angle_end_deg - self.angle_start_deg
        if sweep <= 0 or sweep > 360:
            raise ValueError("angle sweep must lie in (0, 360]")
        object.__setattr__(self, "center", center)

    @property
    def _plane_axes(self):
        return ("xyz".index(self.plane[0]), "xyz".index(self.plane[1]))

    def _frame(self, i, j, k):
        coords = (i, j, k)
        pa, pb = self._plane_axes
        za = next(d for d in range(3) if d not in (pa, pb))
        u = coords[pa] - self.center[0]
        v = coords[pb] - self.center[1]
        w = coords[za] - self.height
        return u, v, w

    def contains(self, i, j, k):
        u, v, w = self._frame(i, j, k)
        rho = np.hypot(u, v)
        theta = np.degrees(np.arctan2(v, u))
        rel = np.mod(theta - self.angle_start_deg, 360.0)
        sweep = self.angle_end_deg - self.angle_start_deg
        on_arc = rel <= sweep
        d2_arc = (rho - self.arc_radius) ** 2 + w**2
        d2_ends = np.full(np.shape(d2_arc), np.inf)
        for ang in (self.angle_start_deg, self.angle_end_deg):
            eu = self.arc_radius * math.cos(math.radians(ang))
            ev = self.arc_radius * math.sin(math.radians(ang))
            d2_ends = np.minimum(d2_ends, (u - eu) ** 2 + (v - ev) ** 2 + w**2)
        d2 = np.where(on_arc, d2_arc, d2_ends)
        return d2 <= self.tube_radius**2

    def bounds(self):
        # conservative: the full annulus box, ignoring the angular range
        reach = self.arc_radius + self.tube_radius
        pa, pb = self._plane_axes
        za = next(d for d in range(3) if d not in (pa, pb))
        out = [None, None, None]
        out[pa] = (self.center[0] - reach, self.center[0] + reach)
        out[pb] = (self.center[1] - reach, self.center[1] + reach)
        out[za] = (self.height - self.tube_radius, self.height + self.tube_radius)
        return tuple(out)

    def to_dict(self):
        return {
            "kind": "curved_tube",
            "plane": self.plane,
            "center": list(self.center),
            "height": self.height,
            "arc_radius": self.arc_radius,
            "tube_radius": self.tube_radius,
            "angle_start_deg": self.angle_start_deg,
            "angle_end_deg": self.angle_end_deg,
        }


def _shape_from_dict(d):
    kind = d.get("kind")
    if kind == "tube":
        return Tube(d["axis"], tuple(d["center"]), d["radius"], tuple(d["span"]))
    if kind == "curved_tube":
        return CurvedTube(
            d["plane"],
            tuple(d["center"]),
            d["height"],
            d["arc_radius"],
            d["tube_radius"],
            d["angle_start_deg"],
            d["angle_end_deg"],
        )
    raise ValueError("unknown shape kind %r" % kind)


@dataclass(frozen=True)
class TractComponent:
    shape: object
    tensor: DiffusionTensor
    label: int

    def __post_init__(self):
        if int(self.label) <= 0:
            raise ValueError("label must be a positive integer")
        object.__setattr__(self, "label", int(self.label))

    def to_dict(self):
        return {
            "label": self.label,
            "tensor": self.tensor.to_dict(),
            "shape": self.shape.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            shape=_shape_from_dict(d["shape"]),
            tensor=DiffusionTensor.from_dict(d["tensor"]),
            label=d["label"],
        )


@dataclass(frozen=True)
class PhantomSpec:
    """Complete description of one synthetic scan."""

    grid: Grid3
    components: tuple
    background: DiffusionTensor
    s0: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0
    border: DiffusionTensor = None
    border_thickness: int = 0

    def __post_init__(self):
        comps = tuple(self.components)
        labels = [c.label for c in comps]
        if len(set(labels)) != len(labels):
            raise ValueError("component labels must be distinct")
        if self.s0 <= 0:
            raise ValueError("s0 must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.border_thickness < 0:
            raise ValueError("border_thickness must be >= 0")
        for c in comps:
            for (lo, hi), dim in zip(c.shape.bounds(), self.grid.dims):
                if lo < -0.5 or hi > dim - 0.5:
                    raise ValueError(
                        "shape of label %d extends outside the grid" % c.label
                    )
        object.__setattr__(self, "components", comps)

    def to_dict(self):
        return {
            "grid": {
                "dims": list(self.grid.dims),
                "spacing": list(self.grid.spacing),
                "origin": list(self.grid.origin),
            },
            "components": [c.to_dict() for c in self.components],
            "background": self.background.to_dict(),
            "s0": self.s0,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "border": None if self.border is None else self.border.to_dict(),
            "border_thickness": self.border_thickness,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        g = d["grid"]
        return cls(
            grid=Grid3(tuple(g["dims"]), tuple(g["spacing"]), tuple(g["origin"])),
            components=tuple(TractComponent.from_dict(c) for c in d["components"]),
            background=DiffusionTensor.from_dict(d["background"]),
            s0=d.get("s0", 1.0),
            noise_sigma=d.get("noise_sigma", 0.0),
            seed=d.get("seed", 0),
            border=(
                None if d.get("border") is None else DiffusionTensor.from_dict(d["border"])
            ),
            border_thickness=d.get("border_thickness", 0),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PhantomOutput:
    dwi: Volume
    b0: Volume
    labels: tuple
    label_ids: tuple


def tensor_signal(tensor, b, g, s0):
    """Monoexponential signal S0 * exp(-b g^T D g)."""
    if b < 0:
        raise ValueError("b must be >= 0")
    g = np.asarray(g, dtype=np.float64)
    return float(s0 * math.exp(-b * float(g @ tensor.matrix @ g)))


def _tensor_field(spec):
    nx, ny, nz = spec.grid.dims
    ii, jj, kk = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    masks = [c.shape.contains(ii, jj, kk) for c in spec.components]
    field_ = np.broadcast_to(spec.background.matrix, (nx, ny, nz, 3, 3)).copy()
    tsum = np.zeros((nx, ny, nz, 3, 3))
    count = np.zeros((nx, ny, nz), dtype=np.int64)
    for comp, mask in zip(spec.components, masks):
        tsum[mask] += comp.tensor.matrix
        count[mask] += 1
    covered = count > 0
    field_[covered] = tsum[covered] / count[covered, np.newaxis, np.newaxis]
    if spec.border is not None and spec.border_thickness > 0:
        t = spec.border_thickness
        shell = (
            (ii < t) | (ii >= nx - t)
            | (jj < t) | (jj >= ny - t)
            | (kk < t) | (kk >= nz - t)
        )
        field_[shell & ~covered] = spec.border.matrix
    return field_, masks


def simulate(spec, table):
    """Render the phantom through a gradient table.

    Returns the noisy multi-channel signal volume, the mean non-weighted
    image, and one binary mask per tract.  Deterministic given spec.seed.
    """
    if table.m == 0:
        raise ValueError("gradient table is empty")
    if table.b0_indices.size == 0:
        raise ValueError("gradient table needs at least one b0 entry")
    field_, masks = _tensor_field(spec)
    nx, ny, nz = spec.grid.dims
    dwi = np.empty((nx, ny, nz, table.m), dtype=np.float32)
    rng = np.random.Generator(np.random.Philox(spec.seed))
    sigma = spec.noise_sigma * spec.s0
    for i in range(table.m):
        q = table.bvals[i] * np.outer(table.dirs[i], table.dirs[i])
        ex = np.einsum("xyzab,ab->xyz", field_, q)
        s = spec.s0 * np.exp(-ex)
        if sigma > 0:
            s = s + rng.normal(0.0, sigma, size=(nx, ny, nz))
        dwi[..., i] = s.astype(np.float32)
    b0 = dwi[..., table.b0_indices].astype(np.float64).mean(axis=3)
    return PhantomOutput(
        dwi=Volume(spec.grid, dwi),
        b0=Volume(spec.grid, b0.astype(np.float32)),
        labels=tuple(BinaryMask(spec.grid, m) for m in masks),
        label_ids=tuple(c.label for c in spec.components),
    )


def default_crossing_spec(noise_sigma=0.05, seed=0, variant=None):
    """Two perpendicular tubes crossing at the volume center, 64^3 grid.

    ``variant`` jitters tube centers and radii deterministically so a
    family of geometrically distinct phantoms can be generated for
    training/evaluation splits; None keeps the canonical geometry.
    """
    dims = (64, 64, 64)
    grid = Grid3(dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    ca = [32.0, 32.0]
    cb = [32.0, 32.0]
    ra = rb = 7.0
    if variant is not None:
        vrng = np.random.default_rng(variant)
        ca = list(32.0 + vrng.uniform(-4.0, 4.0, size=2))
        cb = list(32.0 + vrng.uniform(-4.0, 4.0, size=2))
        ra = float(vrng.uniform(6.0, 9.0))
        rb = float(vrng.uniform(6.0, 9.0))
    tube_a = Tube("x", tuple(ca), ra, (0.0, 63.0))
    tube_b = Tube("y", tuple(cb), rb, (0.0, 63.0))
    ten_a = DiffusionTensor.from_eigenvalues(TRACT_EIGENVALUES, (1.0, 0.0, 0.0))
    ten_b = DiffusionTensor.from_eigenvalues(TRACT_EIGENVALUES, (0.0, 1.0, 0.0))
    return PhantomSpec(
        grid=grid,
        components=(
            TractComponent(tube_a, ten_a, 1),
            TractComponent(tube_b, ten_b, 2),
        ),
        background=DiffusionTensor.isotropic(BACKGROUND_DIFFUSIVITY),
        s0=1.0,
        noise_sigma=noise_sigma,
        seed=seed,
    )
