"""Pick well-spread direction subsets and compare them with random draws.

Subset quality is the pairwise repulsion energy over antipodally symmetric
directions; lower energy means better angular coverage, which shows up as a
lower condition number for the order-2 harmonic fit.
"""

import math

import numpy as np

from dmriseg import (
    GradientTable,
    disjoint_subsets,
    electrostatic_energy,
    random_subset,
    select_subset,
    sh_design_condition,
)


def acquisition(n_dirs=90, b=1000.0):
    i = np.arange(n_dirs)
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    z = (i + 0.5) / n_dirs
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    bvals = np.concatenate([[0.0], np.full(n_dirs, b)])
    alld = np.concatenate([[[0.0, 0.0, 0.0]], dirs], axis=0)
    return GradientTable.from_bvals(bvals, alld)


table = acquisition()

shell = np.nonzero(~table.is_b0)[0]
rng = np.random.default_rng(7)
for k in (6, 8, 10, 12):
    sel = select_subset(table, k, seed=0)
    rand_e = [electrostatic_energy(table.dirs[rng.choice(shell, k, replace=False)])
              for _ in range(200)]
    print("k=%-2d  selected energy %7.3f  cond %.3f   random min/median %7.3f / %7.3f"
          % (k, sel.energy, sel.cond, min(rand_e), float(np.median(rand_e))))

# training uses a cheaper draw: random size, one spread-improvement pass
cheap = random_subset(table, (6, 12), rng=np.random.default_rng(0))
print("cheap training draw: k=%d energy %.3f" % (len(cheap.indices), cheap.energy))

# energy and condition number can also be queried for any direction set
sel6 = select_subset(table, 6, seed=0)
dirs = table.dirs[list(sel6.indices)]
print("recomputed energy %.3f  cond %.3f"
      % (electrostatic_energy(dirs), sh_design_condition(dirs)))

# disjoint subsets support scan-rescan style comparisons on one acquisition
pair = disjoint_subsets(table, 6, 2, seed=0)
overlap = set(pair[0].indices) & set(pair[1].indices)
print("disjoint pair:", pair[0].indices, pair[1].indices, "overlap:", overlap)
