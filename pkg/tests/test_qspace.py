import numpy as np
import pytest
from scipy.stats import chisquare

from dmriseg import (
    DegeneratePairError,
    GradientTable,
    InsufficientDirectionsError,
    SubsetSelection,
    disjoint_subsets,
    electrostatic_energy,
    random_subset,
    select_subset,
    sh_design_condition,
)
from dmriseg.qspace import _select

from conftest import hemisphere_directions, single_shell_table


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class TestGradientTable:
    def test_non_unit_direction_rejected(self):
        with pytest.raises(ValueError):
            GradientTable.from_bvals(
                np.array([1000.0]), np.array([[0.5, 0.0, 0.0]])
            )

    def test_b0_direction_unconstrained(self):
        t = GradientTable.from_bvals(np.array([0.0]), np.zeros((1, 3)))
        assert t.b0_indices.tolist() == [0]

    def test_negative_bval_rejected(self):
        with pytest.raises(ValueError):
            GradientTable.from_bvals(np.array([-1.0]), np.zeros((1, 3)))

    def test_shell_indices(self, table90):
        shell = table90.shell_indices(1000.0, 100.0)
        assert shell.size == 90
        assert 0 not in shell  # the b0 entry
        assert table90.shell_indices(2000.0, 100.0).size == 0

    def test_arrays_frozen(self, table90):
        with pytest.raises(ValueError):
            table90.bvals[0] = 5.0


class TestSubsetSelection:
    def test_duplicate_indices_rejected(self):
        with pytest.raises(ValueError):
            SubsetSelection((1, 1, 2), 1.0, 1.0)

    def test_negative_energy_rejected(self):
        with pytest.raises(ValueError):
            SubsetSelection((1, 2), -0.5, 1.0)

    def test_cond_below_one_rejected(self):
        with pytest.raises(ValueError):
            SubsetSelection((1, 2), 1.0, 0.5)

    def test_to_dict(self):
        s = SubsetSelection((3, 1), 2.0, 1.5)
        assert s.to_dict() == {"indices": [3, 1], "energy": 2.0, "cond": 1.5}


class TestElectrostaticEnergy:
    def test_orthogonal_pair_is_one(self):
        # ||x-y||^2 = ||x+y||^2 = 2, so E = 1/2 + 1/2
        dirs = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        assert electrostatic_energy(dirs) == pytest.approx(1.0, abs=1e-12)

    def test_coincident_pair_degenerate(self):
        dirs = np.array([[1.0, 0, 0], [1.0, 0, 0]])
        with pytest.raises(DegeneratePairError):
            electrostatic_energy(dirs)

    def test_antipodal_pair_degenerate(self):
        dirs = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
        with pytest.raises(DegeneratePairError):
            electrostatic_energy(dirs)

    def test_single_direction_rejected(self):
        with pytest.raises(ValueError):
            electrostatic_energy(np.array([[1.0, 0, 0]]))

    def test_spread_beats_clustered(self):
        spread = hemisphere_directions(6)
        rng = np.random.default_rng(0)
        # 6 directions inside a 10 degree cone around z
        clustered = []
        while len(clustered) < 6:
            v = rng.standard_normal(3)
            v /= np.linalg.norm(v)
            if v[2] > np.cos(np.radians(10.0)):
                clustered.append(v)
        clustered = np.array(clustered)
        assert electrostatic_energy(spread) < electrostatic_energy(clustered)

    def test_rotation_invariance(self, dirs90):
        rng = np.random.default_rng(1)
        base = electrostatic_energy(dirs90[:12])
        for _ in range(5):
            rot = dirs90[:12] @ random_rotation(rng).T
            assert electrostatic_energy(rot) == pytest.approx(base, rel=1e-9)

    def test_antipodal_flip_invariance(self, dirs90):
        sub = dirs90[:8].copy()
        base = electrostatic_energy(sub)
        for i in range(8):
            flipped = sub.copy()
            flipped[i] = -flipped[i]
            assert electrostatic_energy(flipped) == pytest.approx(base, rel=1e-12)


class TestShDesignCondition:
    def test_identical_directions_infinite(self):
        dirs = np.tile([0.0, 0.0, 1.0], (6, 1))
        assert sh_design_condition(dirs) == np.inf

    def test_fixture_well_conditioned(self, dirs90):
        assert sh_design_condition(dirs90) < 2.0

    def test_cond_at_least_one(self, dirs90):
        rng = np.random.default_rng(2)
        for _ in range(5):
            pick = rng.choice(90, size=6, replace=False)
            assert sh_design_condition(dirs90[pick]) >= 1.0

    def test_too_few_directions(self, dirs90):
        with pytest.raises(InsufficientDirectionsError):
            sh_design_condition(dirs90[:5])

    def test_spreading_a_clustered_direction_helps(self, dirs90):
        # replace a near-duplicate of direction 0 by a well-spread one
        base = dirs90[:6].copy()
        nudged = base.copy()
        nudged[5] = base[0] + np.array([1e-3, 0, 0])
        nudged[5] /= np.linalg.norm(nudged[5])
        assert sh_design_condition(base) <= sh_design_condition(nudged)


class TestSelectSubset:
    def test_full_shell_is_identity(self):
        table = single_shell_table(8)
        sel = select_subset(table, 8, seed=0)
        shell = table.shell_indices(1000.0, 100.0)
        assert sorted(sel.indices) == shell.tolist()
        dirs = table.dirs[list(sel.indices)]
        assert sel.energy == pytest.approx(electrostatic_energy(dirs), rel=1e-12)

    def test_deterministic(self, table90):
        a = select_subset(table90, 6, seed=42)
        b = select_subset(table90, 6, seed=42)
        assert a.indices == b.indices
        assert a.energy == b.energy

    def test_energy_never_exceeds_initial_draw(self, table90):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            sel, init_energy = _select(table90, 6, 1000.0, 100.0, rng)
            assert sel.energy <= init_energy + 1e-12

    def test_too_few_shell_directions(self):
        table = single_shell_table(5)
        with pytest.raises(InsufficientDirectionsError):
            select_subset(table, 6, seed=0)

    def test_subset_indices_point_into_shell(self, table90):
        sel = select_subset(table90, 6, seed=3)
        shell = set(table90.shell_indices(1000.0, 100.0).tolist())
        assert set(sel.indices) <= shell

    def test_reports_energy_and_cond_consistently(self, table90):
        sel = select_subset(table90, 6, seed=9)
        dirs = table90.dirs[list(sel.indices)]
        assert sel.energy == pytest.approx(electrostatic_energy(dirs), rel=1e-12)
        assert sel.cond == pytest.approx(sh_design_condition(dirs), rel=1e-12)


class TestDisjointSubsets:
    def test_two_disjoint_sets(self, table90):
        subs = disjoint_subsets(table90, 6, 2, seed=0)
        assert len(subs) == 2
        a, b = (set(s.indices) for s in subs)
        assert not (a & b)
        assert len(a) == len(b) == 6

    def test_insufficient_directions(self):
        table = single_shell_table(10)
        with pytest.raises(InsufficientDirectionsError):
            disjoint_subsets(table, 6, 2, seed=0)

    def test_count_one_matches_select_subset(self, table90):
        single = disjoint_subsets(table90, 6, 1, seed=5)
        assert len(single) == 1
        assert set(single[0].indices) <= set(
            table90.shell_indices(1000.0, 100.0).tolist()
        )

    def test_deterministic(self, table90):
        a = disjoint_subsets(table90, 6, 3, seed=1)
        b = disjoint_subsets(table90, 6, 3, seed=1)
        assert [s.indices for s in a] == [s.indices for s in b]


class TestRandomSubset:
    def test_deterministic_given_rng_state(self, table90):
        a = random_subset(table90, rng=np.random.default_rng(7))
        b = random_subset(table90, rng=np.random.default_rng(7))
        assert a.indices == b.indices

    def test_advances_rng_state(self, table90):
        rng = np.random.default_rng(7)
        a = random_subset(table90, rng=rng)
        b = random_subset(table90, rng=rng)
        assert a.indices != b.indices

    def test_k_in_range_and_uniform(self, table90):
        rng = np.random.default_rng(123)
        counts = {k: 0 for k in range(6, 13)}
        for _ in range(10_000):
            sel = random_subset(table90, rng=rng)
            k = len(sel.indices)
            assert 6 <= k <= 12
            counts[k] += 1
        stat = chisquare(list(counts.values()))
        assert stat.pvalue > 0.01
