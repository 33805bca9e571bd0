"""Gradient schemes and well-spread measurement subset selection.

A "good" subset of gradient directions spreads its members far apart in
q space.  We quantify spread with an antipodally symmetrized inverse-square
Coulomb energy (lower is better) and optimize it by greedy pairwise
exchange, which for subsets of 6-12 directions converges in milliseconds
and is fully deterministic given a seed.
"""

import math
from dataclasses import dataclass, field

import numpy as np


class DegeneratePairError(ValueError):
    """Two directions are identical or exactly antipodal."""


class InsufficientDirectionsError(ValueError):
    """The shell does not contain enough directions for the request."""


@dataclass(frozen=True)
class GradientTable:
    """Measurement geometry: unit directions, b-values, b0 flags.

    Non-b0 directions must be unit length within 1e-4; b0 entries keep their
    raw (typically zero) vector.
    """

    bvals: np.ndarray
    dirs: np.ndarray
    is_b0: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64)
        dirs = np.asarray(self.dirs, dtype=np.float64)
        is_b0 = np.asarray(self.is_b0, dtype=bool)
        if bvals.ndim != 1 or dirs.shape != (bvals.size, 3) or is_b0.shape != bvals.shape:
            raise ValueError("inconsistent gradient table array shapes")
        if bvals.size == 0:
            raise ValueError("gradient table must hold at least one measurement")
        if np.any(bvals < 0):
            raise ValueError("b-values must be >= 0")
        norms = np.linalg.norm(dirs[~is_b0], axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-4:
            raise ValueError("non-b0 directions must be unit length within 1e-4")
        for name, arr in (("bvals", bvals), ("dirs", dirs), ("is_b0", is_b0)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_bvals(cls, bvals, dirs, b0_tol=50.0):
        """Build a table, marking entries with b <= b0_tol as b0 scans."""
        bvals = np.asarray(bvals, dtype=np.float64)
        return cls(bvals, dirs, bvals <= b0_tol)

    @property
    def m(self):
        return self.bvals.size

    def shell_indices(self, b_target, b_tol=100.0):
        """Indices of non-b0 measurements with |b - b_target| <= b_tol."""
        sel = ~self.is_b0 & (np.abs(self.bvals - b_target) <= b_tol)
        return np.nonzero(sel)[0]

    @property
    def b0_indices(self):
        return np.nonzero(self.is_b0)[0]


@dataclass(frozen=True)
class SubsetSelection:
    """A chosen measurement subset with its quality numbers.

    ``indices`` are ascending positions into the owning gradient table;
    ``energy`` is the electrostatic spread energy and ``cond`` the condition
    number of the order-2 spherical-harmonics design matrix.
    """

    indices: tuple
    energy: float
    cond: float

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("subset indices must be distinct")
        object.__setattr__(self, "indices", idx)
        if self.energy < 0:
            raise ValueError("energy must be >= 0")
        if self.cond < 1:
            raise ValueError("condition number must be >= 1")

    def to_dict(self):
        return {
            "indices": list(self.indices),
            "energy": self.energy,
            "cond": self.cond,
        }


def _pair_energy_matrix(dirs):
    # M[i, j] = 1/|gi - gj|^2 + 1/|gi + gj|^2, +inf on degenerate pairs
    diff = dirs[:, np.newaxis, :] - dirs[np.newaxis, :, :]
    summ = dirs[:, np.newaxis, :] + dirs[np.newaxis, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    s2 = np.einsum("ijk,ijk->ij", summ, summ)
    with np.errstate(divide="ignore"):
        M = np.where(d2 > 0, 1.0 / np.where(d2 > 0, d2, 1.0), np.inf) + np.where(
            s2 > 0, 1.0 / np.where(s2 > 0, s2, 1.0), np.inf
        )
    np.fill_diagonal(M, 0.0)
    return M


_DEGENERATE_TOL = 1e-9


def electrostatic_energy(dirs):
    """Antipodally symmetric Coulomb spread energy of a direction set.

    E = sum over pairs i<j of 1/|gi-gj|^2 + 1/|gi+gj|^2.  Lower energy means
    better angular spread; the value is invariant under global rotations and
    under flipping the sign of any direction.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[1] != 3 or dirs.shape[0] < 2:
        raise ValueError("need at least two 3-vectors")
    diff = dirs[:, np.newaxis, :] - dirs[np.newaxis, :, :]
    summ = dirs[:, np.newaxis, :] + dirs[np.newaxis, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    s2 = np.einsum("ijk,ijk->ij", summ, summ)
    iu = np.triu_indices(dirs.shape[0], k=1)
    d2u, s2u = d2[iu], s2[iu]
    if np.any(d2u < _DEGENERATE_TOL) or np.any(s2u < _DEGENERATE_TOL):
        raise DegeneratePairError("coincident or antipodal direction pair")
    return float(np.sum(1.0 / d2u + 1.0 / s2u))


def sh_design_condition(dirs, l_max=2):
    """Condition number of the spherical-harmonics design matrix.

    Ratio of the largest to the smallest singular value; returns +inf for a
    rank-deficient design (e.g. coincident directions).
    """
    from .shfit import ShBasis, design_matrix

    basis = ShBasis(l_max)
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.shape[0] < basis.n_coeffs:
        raise InsufficientDirectionsError(
            "need at least %d directions for l_max=%d" % (basis.n_coeffs, l_max)
        )
    s = np.linalg.svd(design_matrix(dirs, basis), compute_uv=False)
    if s[-1] <= s[0] * 1e-12 or s[-1] == 0.0:
        return math.inf
    return float(s[0] / s[-1])


def _subset_energy(M, members):
    sub = M[np.ix_(members, members)]
    return float(np.sum(np.triu(sub, k=1)))


def _greedy_exchange(M, members, max_passes=None):
    # Swap one in-subset index for one out-of-subset index whenever that
    # lowers the energy; repeat until no improving swap (a local optimum)
    # or until max_passes sweeps have run.
    n = M.shape[0]
    members = list(members)
    in_set = np.zeros(n, dtype=bool)
    in_set[members] = True
    passes = 0
    while True:
        improved = False
        out = np.nonzero(~in_set)[0]
        if out.size == 0:
            break
        for slot, s in enumerate(list(members)):
            others = [m for m in members if m != s]
            cost_s = M[s, others].sum()
            cand_costs = M[np.ix_(out, others)].sum(axis=1)
            best = int(np.argmin(cand_costs))
            if cand_costs[best] < cost_s - 1e-12:
                t = int(out[best])
                in_set[s] = False
                in_set[t] = True
                members[slot] = t
                out = np.nonzero(~in_set)[0]
                improved = True
        passes += 1
        if not improved or (max_passes is not None and passes >= max_passes):
            break
    return members


def _select(table, k, b_target, b_tol, rng, max_passes=None):
    shell = table.shell_indices(b_target, b_tol)
    if shell.size < k:
        raise InsufficientDirectionsError(
            "shell b=%g+/-%g has %d directions, need %d"
            % (b_target, b_tol, shell.size, k)
        )
    M = _pair_energy_matrix(table.dirs[shell])
    init = sorted(rng.choice(shell.size, size=k, replace=False).tolist())
    init_energy = _subset_energy(M, init)
    members = _greedy_exchange(M, init, max_passes=max_passes)
    energy = _subset_energy(M, members)
    indices = tuple(sorted(int(shell[m]) for m in members))
    cond = sh_design_condition(table.dirs[list(indices)])
    return SubsetSelection(indices, energy, cond), init_energy


def select_subset(table, k, b_target=1000.0, b_tol=100.0, seed=0):
    """Pick k well-spread directions from one shell.

    Starts from a uniform random draw (without replacement) and greedily
    exchanges members against outsiders until the spread energy reaches a
    local optimum.  Deterministic given ``seed``; the result never has
    higher energy than the initial draw.
    """
    rng = np.random.default_rng(seed)
    selection, _ = _select(table, k, b_target, b_tol, rng)
    return selection


def random_subset(table, k_range=(6, 12), b_target=1000.0, b_tol=100.0, rng=None):
    """One cheap training-time subset draw.

    The subset size is uniform over ``k_range`` (inclusive); a single greedy
    exchange pass improves the spread without iterating to a local optimum.
    Advances the supplied generator state.
    """
    if rng is None:
        rng = np.random.default_rng()
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    selection, _ = _select(table, k, b_target, b_tol, rng, max_passes=1)
    return selection


def disjoint_subsets(table, k, count, b_target=1000.0, b_tol=100.0, seed=0):
    """Select ``count`` pairwise-disjoint k-subsets from one shell.

    Each subset is optimized as in :func:`select_subset`, restricted to the
    indices not taken by earlier subsets.
    """
    shell = table.shell_indices(b_target, b_tol)
    if shell.size < k * count:
        raise InsufficientDirectionsError(
            "shell has %d directions, need %d for %d disjoint %d-subsets"
            % (shell.size, k * count, count, k)
        )
    seeds = np.random.SeedSequence(seed).spawn(count)
    taken = set()
    out = []
    for c in range(count):
        remaining = np.array([i for i in shell if i not in taken])
        sub_table = GradientTable(
            bvals=table.bvals[remaining],
            dirs=table.dirs[remaining],
            is_b0=table.is_b0[remaining],
        )
        rng = np.random.default_rng(seeds[c])
        sel, _ = _select(sub_table, k, b_target, b_tol, rng)
        indices = tuple(sorted(int(remaining[i]) for i in sel.indices))
        taken.update(indices)
        out.append(SubsetSelection(indices, sel.energy, sel.cond))
    return out
