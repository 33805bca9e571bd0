"""Disagreement scoring across test-time-averaged predictions.

Each prediction and the mean prediction are downsampled, normalized to
unit mass, unfolded into a 1D chain that preserves voxel adjacency, and
compared by the exact 1D earth mover's distance (the l1 norm of the
difference of cumulative sums).  The per-tract score u is the mean EMD
between members and mean; predictions that place no mass anywhere are
defined as maximally uncertain.
"""

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import Volume, check_same_grid, resample_cubic


class ZeroMassError(ValueError):
    """A probability map holds no mass at all."""


class MassMismatchError(ValueError):
    """Two mass vectors differ in total mass beyond tolerance."""


@dataclass(frozen=True)
class UnfoldedMass:
    """1D nonnegative mass vector obtained by unfolding a volume."""

    values: np.ndarray
    dims: tuple
    traversal: str = "serpentine"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        dims = tuple(int(d) for d in self.dims)
        if v.ndim != 1 or v.size != dims[0] * dims[1] * dims[2]:
            raise ValueError("values length must equal the voxel count")
        if np.any(v < 0):
            raise ValueError("mass values must be >= 0")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "dims", dims)

    @property
    def total(self):
        return float(self.values.sum())

    def normalized(self):
        """Unit-sum copy; raises on zero mass."""
        t = self.total
        if t <= 0:
            raise ZeroMassError("cannot normalize zero mass")
        return UnfoldedMass(self.values / t, self.dims, self.traversal)


@lru_cache(maxsize=32)
def _serpentine_order(dims):
    # traversal where consecutive positions are always 6-neighbors:
    # x sweeps flip per (y+z) parity, y sweeps flip per z parity
    nx, ny, nz = dims
    xi = np.empty(nx * ny * nz, dtype=np.intp)
    yi = np.empty_like(xi)
    zi = np.empty_like(xi)
    pos = 0
    fwd_x = np.arange(nx)
    rev_x = fwd_x[::-1]
    for k in range(nz):
        ys = range(ny) if k % 2 == 0 else range(ny - 1, -1, -1)
        for j in ys:
            xs = fwd_x if (j + k) % 2 == 0 else rev_x
            xi[pos : pos + nx] = xs
            yi[pos : pos + nx] = j
            zi[pos : pos + nx] = k
            pos += nx
    return xi, yi, zi


def unfold(v):
    """Serpentine linearization of a single-channel volume.

    Bijective, and every pair of consecutive output indices corresponds
    to voxels at city-block distance 1.
    """
    if v.channels != 1:
        raise ValueError("unfold expects a single-channel volume")
    xi, yi, zi = _serpentine_order(v.grid.dims)
    return UnfoldedMass(v.channel(0)[xi, yi, zi], v.grid.dims)


def prepare_mass(prob):
    """Downsample by 4 per axis, clamp negatives, normalize to unit sum."""
    if prob.channels != 1:
        raise ValueError("prepare_mass expects a single-channel volume")
    if prob.data.min() < 0.0 or prob.data.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    small = resample_cubic(prob, 4)
    vals = np.maximum(small.data[..., 0].astype(np.float64), 0.0)
    total = float(vals.sum())
    if total <= 0.0:
        raise ZeroMassError("probability map has zero total mass")
    return Volume(small.grid, (vals / total).astype(np.float32))


def emd_unfolded(p, q, scorer="l1"):
    """Earth mover's distance along the unfolded chain.

    With the default l1 aggregation this is the exact 1D Wasserstein-1
    distance; 'l2' aggregates the cumulative differences quadratically.
    """
    if scorer not in ("l1", "l2"):
        raise ValueError("scorer must be 'l1' or 'l2'")
    if p.values.size != q.values.size:
        raise ValueError("unfolded vectors differ in length")
    if abs(p.total - q.total) > 1e-6:
        raise MassMismatchError(
            "total mass differs: %g vs %g" % (p.total, q.total)
        )
    cum = np.cumsum(p.values - q.values)
    if scorer == "l1":
        return float(np.sum(np.abs(cum)))
    return float(np.sqrt(np.sum(cum**2)))


def emd3(p, q, prepared=False, scorer="l1"):
    """EMD between two probability volumes via unfolding.

    When ``prepared`` is False both inputs run through prepare_mass
    first; pass True if they already are unit-mass prepared volumes.
    """
    check_same_grid(p, q)
    if not prepared:
        p = prepare_mass(p)
        q = prepare_mass(q)
    return emd_unfolded(unfold(p), unfold(q), scorer)


@dataclass(frozen=True)
class TractUncertainty:
    """Disagreement summary for one tract channel."""

    channel: int
    u: float
    emds: tuple
    n: int


def _channel_volume(vol, channel):
    return Volume(vol.grid, vol.data[..., channel : channel + 1])


def uncertainty_u(tta, channel, scorer="l1"):
    """Mean EMD between each member prediction and the mean prediction.

    Any zero-mass member (or a zero-mass mean) yields the +infinity
    sentinel: an empty prediction is exactly the failure to flag.
    """
    mean_chan = _channel_volume(tta.mean, channel)
    try:
        mean_unfolded = unfold(prepare_mass(mean_chan))
    except ZeroMassError:
        emds = tuple(float("inf") for _ in tta.predictions)
        return TractUncertainty(channel, float("inf"), emds, tta.n)
    emds = []
    for y in tta.predictions:
        try:
            member = unfold(prepare_mass(_channel_volume(y, channel)))
            emds.append(emd_unfolded(member, mean_unfolded, scorer))
        except ZeroMassError:
            emds.append(float("inf"))
    u = float(np.mean(emds)) if all(np.isfinite(emds)) else float("inf")
    return TractUncertainty(channel, u, tuple(emds), tta.n)


def detect(u, tau=0.30):
    """Failure flag: strictly above threshold (the sentinel always flags)."""
    if u < 0:
        raise ValueError("u must be >= 0")
    return bool(u > tau)


def _family_std(vols, channel):
    if len(vols) < 2:
        raise ValueError("family needs at least 2 predictions")
    maps = np.stack([v.channel(channel).astype(np.float64) for v in vols])
    support = (maps >= 0.5).any(axis=0)
    if not support.any():
        return 0.0
    return float(np.std(maps[:, support], axis=0).mean())


def baseline_scores(tta, channel, dropout_preds=None, ensemble_preds=None):
    """Voxel-std baselines: (ensemble score, dropout score).

    Each score is the mean voxel-wise standard deviation across its
    family of probability maps, restricted to the union of the families'
    0.5-binarized supports.  A family defaults to the TTA members when
    not supplied.
    """
    ens = _family_std(
        tta.predictions if ensemble_preds is None else list(ensemble_preds), channel
    )
    drp = _family_std(
        tta.predictions if dropout_preds is None else list(dropout_preds), channel
    )
    return ens, drp


@dataclass(frozen=True)
class ReportEntry:
    tract: str
    u: float
    emds: tuple
    n: int
    flagged: bool
    ens_score: float
    drp_score: float


@dataclass(frozen=True)
class UncertaintyReport:
    """Per-tract disagreement scores and failure flags for one scan."""

    scan_id: str
    tau: float
    scorer: str
    entries: tuple

    def to_dict(self):
        return {
            "scan_id": self.scan_id,
            "tau": self.tau,
            "scorer": self.scorer,
            "tracts": [
                {
                    "tract": e.tract,
                    "u": _json_float(e.u),
                    "emds": [_json_float(x) for x in e.emds],
                    "n": e.n,
                    "flagged": e.flagged,
                    "ens_score": e.ens_score,
                    "drp_score": e.drp_score,
                }
                for e in self.entries
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self):
        lines = ["scan_id,tract,u,tau,flagged,ens_score,drp_score"]
        for e in self.entries:
            lines.append(
                "%s,%s,%s,%s,%s,%s,%s"
                % (
                    self.scan_id,
                    e.tract,
                    repr(e.u),
                    repr(self.tau),
                    "true" if e.flagged else "false",
                    repr(e.ens_score),
                    repr(e.drp_score),
                )
            )
        return "\n".join(lines) + "\n"


def _json_float(x):
    # JSON has no non-finite literals; keep reports strictly parseable
    if np.isfinite(x):
        return x
    if np.isnan(x):
        return "nan"
    return "inf" if x > 0 else "-inf"


def build_report(
    scan_id,
    tta,
    tau=0.30,
    scorer="l1",
    tract_names=None,
    dropout_preds=None,
    ensemble_preds=None,
):
    """Assemble the per-tract uncertainty report for one scan."""
    c = tta.mean.channels
    if tract_names is None:
        tract_names = [str(i) for i in range(c)]
    if len(tract_names) != c:
        raise ValueError("need one tract name per channel")
    entries = []
    for ch in range(c):
        tu = uncertainty_u(tta, ch, scorer)
        ens, drp = baseline_scores(tta, ch, dropout_preds, ensemble_preds)
        entries.append(
            ReportEntry(
                tract=str(tract_names[ch]),
                u=tu.u,
                emds=tu.emds,
                n=tu.n,
                flagged=detect(tu.u, tau),
                ens_score=ens,
                drp_score=drp,
            )
        )
    return UncertaintyReport(scan_id, tau, scorer, tuple(entries))
