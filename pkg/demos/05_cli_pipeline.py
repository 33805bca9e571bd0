"""Drive the command line interface through a full study in a scratch dir.

Every artifact lands under demos/out/cli/: a simulated scan, a selected
direction file, a trained model, subset-averaged segmentations, the
uncertainty report, metric tables, and detection summaries.
"""

import json
import math
import os
import shutil
import subprocess
import sys

import numpy as np

from dmriseg import (
    DiffusionTensor,
    GradientTable,
    Grid3,
    PhantomSpec,
    TractComponent,
    Tube,
    write_gradients,
)

ROOT = os.path.join(os.path.dirname(__file__), "out", "cli")
shutil.rmtree(ROOT, ignore_errors=True)
os.makedirs(ROOT)


def run(*args):
    cmd = [sys.executable, "-m", "dmriseg"] + list(args)
    print("$ dmriseg " + " ".join(args))
    subprocess.run(cmd, check=True)


def acquisition(n_dirs=90, b=1000.0):
    i = np.arange(n_dirs)
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    z = (i + 0.5) / n_dirs
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    bvals = np.concatenate([[0.0], np.full(n_dirs, b)])
    alld = np.concatenate([[[0.0, 0.0, 0.0]], dirs], axis=0)
    return GradientTable.from_bvals(bvals, alld)


bvals = os.path.join(ROOT, "scheme.bval")
bvecs = os.path.join(ROOT, "scheme.bvec")
write_gradients(acquisition(), bvals, bvecs)

# a small phantom keeps the whole pipeline under a minute
ten_x = DiffusionTensor.from_eigenvalues((1.7e-3, 0.3e-3, 0.3e-3), (1.0, 0.0, 0.0))
ten_y = DiffusionTensor.from_eigenvalues((1.7e-3, 0.3e-3, 0.3e-3), (0.0, 1.0, 0.0))
spec = PhantomSpec(
    grid=Grid3((24, 24, 24)),
    components=(
        TractComponent(Tube("x", (12.0, 12.0), 4.0, (0.0, 23.0)), ten_x, 1),
        TractComponent(Tube("y", (12.0, 12.0), 4.0, (0.0, 23.0)), ten_y, 2),
    ),
    background=DiffusionTensor.isotropic(0.8e-3),
    noise_sigma=0.05,
    seed=0,
)
spec_path = os.path.join(ROOT, "phantom.json")
with open(spec_path, "w") as f:
    f.write(spec.to_json())

sim = os.path.join(ROOT, "sim")
run("simulate", "--spec", spec_path, "--seed", "7",
    "--bvals", bvals, "--bvecs", bvecs, "--out", sim)

run("select-dirs", "--bvals", bvals, "--bvecs", bvecs,
    "--k", "6", "--disjoint", "2", "--seed", "0",
    "--out", os.path.join(ROOT, "subsets.json"))

train_cfg = {
    "scans": [{
        "dwi": os.path.join(sim, "dwi.nii.gz"),
        "b0": os.path.join(sim, "b0.nii.gz"),
        "bvals": bvals,
        "bvecs": bvecs,
        "labels": [os.path.join(sim, "labels_1.nii.gz"),
                   os.path.join(sim, "labels_2.nii.gz")],
    }] * 2,
    "lr": 0.05, "epochs": 4, "iters_per_epoch": 40,
    "patch": 16, "val_fraction": 0.5,
}
cfg_path = os.path.join(ROOT, "train.json")
with open(cfg_path, "w") as f:
    json.dump(train_cfg, f, indent=1)
model_dir = os.path.join(ROOT, "model")
run("train", "--config", cfg_path, "--out", model_dir, "--seed", "0")

seg = os.path.join(ROOT, "seg")
run("segment", "--dwi", os.path.join(sim, "dwi.nii.gz"),
    "--b0", os.path.join(sim, "b0.nii.gz"),
    "--bvals", bvals, "--bvecs", bvecs,
    "--model", os.path.join(model_dir, "model.bin"),
    "--out", seg, "--n", "5", "--k", "6", "--patch", "16", "--seed", "0")

unc = os.path.join(ROOT, "unc")
run("uncertainty", "--tta-dir", seg, "--out", unc, "--tau", "0.30")

# ground truth tract masks double as the evaluation reference
truth = os.path.join(ROOT, "truth")
os.makedirs(truth)
for ch, name in enumerate(("labels_1.nii.gz", "labels_2.nii.gz")):
    shutil.copyfile(os.path.join(sim, name),
                    os.path.join(truth, "%d.nii.gz" % ch))
eval_csv = os.path.join(ROOT, "eval.csv")
run("evaluate",
    "--pred", os.path.join(seg, "mask_00.nii.gz"), os.path.join(seg, "mask_01.nii.gz"),
    "--truth", os.path.join(truth, "0.nii.gz"), os.path.join(truth, "1.nii.gz"),
    "--out", eval_csv)

run("detect", "--u-csv", os.path.join(unc, "uncertainty.csv"),
    "--dsc-csv", eval_csv, "--out", os.path.join(ROOT, "detect.json"))
run("plotdata", "--u-csv", os.path.join(unc, "uncertainty.csv"),
    "--dsc-csv", eval_csv, "--out", os.path.join(ROOT, "plot.csv"))

print()
for name in ("eval.csv", "plot.csv"):
    with open(os.path.join(ROOT, name)) as f:
        print("%s:\n%s" % (name, f.read()))
with open(os.path.join(ROOT, "unc", "uncertainty.json")) as f:
    print("uncertainty.json:", json.dumps(json.load(f), indent=1)[:400], "...")
print("all artifacts under", ROOT)
