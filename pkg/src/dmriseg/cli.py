"""Command-line pipeline front end.

Every command reads/writes NIfTI, FSL gradient text, CSV, or JSON; all
randomness sits behind --seed, and identical invocations produce
byte-identical outputs.  Options may come from a JSON config file
(--config); an explicit flag always wins over the config value.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .core import BinaryMask, Volume, argmax_threshold_binarize
from .dwi_io import read_gradients, read_nifti, write_nifti
from .model import (
    PatchSpec,
    TrainConfig,
    TtaResult,
    load_checkpoint,
    save_checkpoint,
    train_reference,
    tta_predict,
    write_train_log,
)
from .phantom import PhantomSpec, default_crossing_spec, simulate
from .qspace import SubsetSelection, disjoint_subsets, select_subset
from .segmetrics import UndefinedMetricError, detection_stats, dsc, assd, hd95
from .uncertainty import _json_float, build_report


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _opt(args, key, default=None):
    """Flag value if given, else config value, else default."""
    v = getattr(args, key, None)
    if v is not None:
        return v
    return args.config_data.get(key, default)


def _write_text(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def _read_mask(path):
    v = read_nifti(path)
    return BinaryMask(v.grid, v.channel(0) > 0.5)


def _mask_volume(mask):
    return Volume(mask.grid, mask.data.astype(np.float32))


def _tract_name(path):
    base = os.path.basename(path)
    for ext in (".nii.gz", ".nii"):
        if base.endswith(ext):
            return base[: -len(ext)]
    return os.path.splitext(base)[0]


def cmd_simulate(args):
    table = read_gradients(args.bvals, args.bvecs)
    if args.spec is not None:
        with open(args.spec) as f:
            spec = PhantomSpec.from_json(f.read())
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
        if args.sigma is not None:
            spec = dataclasses.replace(spec, noise_sigma=args.sigma)
    else:
        spec = default_crossing_spec(
            noise_sigma=args.sigma if args.sigma is not None else 0.05,
            seed=args.seed if args.seed is not None else 0,
            variant=args.variant,
        )
    out = simulate(spec, table)
    os.makedirs(args.out, exist_ok=True)
    write_nifti(out.dwi, os.path.join(args.out, "dwi.nii.gz"))
    write_nifti(out.b0, os.path.join(args.out, "b0.nii.gz"))
    for label, mask in zip(out.label_ids, out.labels):
        write_nifti(
            _mask_volume(mask),
            os.path.join(args.out, "labels_%d.nii.gz" % label),
            datatype="uint8",
        )
    with open(os.path.join(args.out, "spec.json"), "w") as f:
        f.write(spec.to_json())
    return 0


def cmd_select_dirs(args):
    table = read_gradients(args.bvals, args.bvecs)
    seed = args.seed if args.seed is not None else 0
    k = _opt(args, "k", 6)
    b_target = _opt(args, "b_target", 1000.0)
    b_tol = _opt(args, "b_tol", 100.0)
    if args.disjoint is not None:
        subsets = disjoint_subsets(
            table, k, args.disjoint, b_target, b_tol, seed=seed
        )
    else:
        subsets = [select_subset(table, k, b_target, b_tol, seed=seed)]
    payload = {"subsets": [s.to_dict() for s in subsets]}
    _write_text(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def _load_scan(entry):
    dwi = read_nifti(entry["dwi"])
    b0 = read_nifti(entry["b0"])
    table = read_gradients(entry["bvals"], entry["bvecs"])
    labels = tuple(_read_mask(p) for p in entry["labels"])
    return dwi, b0, table, labels


def cmd_train(args):
    scans = args.config_data.get("scans")
    if not scans:
        raise ValueError("training config must list scans")
    data = [_load_scan(e) for e in scans]
    k_range = tuple(_opt(args, "k_range", (6, 12)))
    if args.k is not None:
        k_range = (args.k, args.k)
    cfg = TrainConfig(
        lr=_opt(args, "lr", 1e-4),
        batch_patches=_opt(args, "batch_patches", 1),
        epochs=_opt(args, "epochs", 10),
        iters_per_epoch=_opt(args, "iters_per_epoch", 100),
        patch_size=_opt(args, "patch", 96),
        k_range=k_range,
        val_fraction=_opt(args, "val_fraction", 0.25),
        b_target=_opt(args, "b_target", 1000.0),
        b_tol=_opt(args, "b_tol", 100.0),
        seed=_opt(args, "seed", 0),
    )
    model, log = train_reference(data, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(model, os.path.join(args.out, "model.bin"))
    write_train_log(log, os.path.join(args.out, "train_log.csv"))
    return 0


def _read_subsets_file(path):
    with open(path) as f:
        payload = json.load(f)
    return tuple(
        SubsetSelection(tuple(s["indices"]), s["energy"], s["cond"])
        for s in payload["subsets"]
    )


def cmd_segment(args):
    dwi = read_nifti(_opt(args, "dwi"))
    table = read_gradients(_opt(args, "bvals"), _opt(args, "bvecs"))
    b0_path = _opt(args, "b0")
    if b0_path is not None:
        b0 = read_nifti(b0_path)
    else:
        idx = table.b0_indices
        if idx.size == 0:
            raise ValueError("gradient table has no b0 entry and no --b0 given")
        mean_b0 = dwi.data[..., idx].astype(np.float64).mean(axis=3)
        b0 = Volume(dwi.grid, mean_b0.astype(np.float32))
    model = load_checkpoint(_opt(args, "model"))
    spec = PatchSpec(
        size=_opt(args, "patch", 96),
        stride=_opt(args, "stride"),
        blend=_opt(args, "blend", "cosine"),
    )
    subsets = None
    n = _opt(args, "n", 5)
    if args.subsets is not None:
        subsets = _read_subsets_file(args.subsets)
        n = len(subsets)
    result = tta_predict(
        model,
        dwi,
        b0,
        table,
        n=n,
        k=_opt(args, "k", 6),
        seed=_opt(args, "seed", 0),
        spec=spec,
        b_target=_opt(args, "b_target", 1000.0),
        b_tol=_opt(args, "b_tol", 100.0),
        subsets=subsets,
        workers=_opt(args, "threads"),
    )
    os.makedirs(args.out, exist_ok=True)
    write_nifti(result.mean, os.path.join(args.out, "mean_prob.nii.gz"))
    for i, y in enumerate(result.predictions):
        write_nifti(y, os.path.join(args.out, "member_%02d.nii.gz" % i))
    for c, mask in enumerate(argmax_threshold_binarize(result.mean, 0.5)):
        write_nifti(
            _mask_volume(mask),
            os.path.join(args.out, "mask_%02d.nii.gz" % c),
            datatype="uint8",
        )
    payload = {"subsets": [s.to_dict() for s in result.subsets]}
    with open(os.path.join(args.out, "subsets.json"), "w") as f:
        f.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_uncertainty(args):
    tta_dir = args.tta_dir
    mean = read_nifti(os.path.join(tta_dir, "mean_prob.nii.gz"))
    members = []
    i = 0
    while True:
        path = os.path.join(tta_dir, "member_%02d.nii.gz" % i)
        if not os.path.exists(path):
            break
        members.append(read_nifti(path))
        i += 1
    if not members:
        raise ValueError("no member predictions found in %s" % tta_dir)
    subsets_path = os.path.join(tta_dir, "subsets.json")
    subsets = _read_subsets_file(subsets_path) if os.path.exists(subsets_path) else ()
    result = TtaResult(tuple(members), mean, subsets)
    report = build_report(
        scan_id=_opt(args, "scan_id", "scan"),
        tta=result,
        tau=_opt(args, "tau", 0.30),
        scorer=_opt(args, "scorer", "l1"),
    )
    out_dir = args.out if args.out is not None else tta_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "uncertainty.json"), "w") as f:
        f.write(report.to_json())
    with open(os.path.join(out_dir, "uncertainty.csv"), "w") as f:
        f.write(report.to_csv())
    return 0


def cmd_evaluate(args):
    if len(args.pred) != len(args.truth):
        raise ValueError("need as many --pred as --truth masks")
    scan_id = _opt(args, "scan_id", "scan")
    lines = ["scan_id,tract,dsc,hd95_mm,assd_mm"]
    for pred_path, truth_path in zip(args.pred, args.truth):
        pred = _read_mask(pred_path)
        truth = _read_mask(truth_path)
        d = dsc(pred, truth)
        try:
            h = repr(hd95(pred, truth))
            a = repr(assd(pred, truth))
        except UndefinedMetricError:
            h = a = "nan"
        lines.append(
            "%s,%s,%s,%s,%s" % (scan_id, _tract_name(truth_path), repr(d), h, a)
        )
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def _read_csv_column(path, key_cols, value_col):
    out = {}
    with open(path) as f:
        for row in csv.DictReader(f):
            key = tuple(row[c] for c in key_cols)
            out[key] = float(row[value_col])
    return out


def _joined_u_dsc(u_csv, dsc_csv):
    u = _read_csv_column(u_csv, ("scan_id", "tract"), "u")
    d = _read_csv_column(dsc_csv, ("scan_id", "tract"), "dsc")
    keys = sorted(set(u) & set(d))
    if not keys:
        raise ValueError("no (scan_id, tract) keys shared by the two files")
    return keys, [u[k] for k in keys], [d[k] for k in keys]


def cmd_detect(args):
    _keys, u, d = _joined_u_dsc(args.u_csv, args.dsc_csv)
    stats = detection_stats(
        u, d, tau=_opt(args, "tau", 0.30), dsc_cut=_opt(args, "dsc_cut", 0.70)
    )
    payload = {
        k: _json_float(v) if isinstance(v, float) else v
        for k, v in stats.to_dict().items()
    }
    payload["tau"] = _opt(args, "tau", 0.30)
    payload["dsc_cut"] = _opt(args, "dsc_cut", 0.70)
    _write_text(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_calibrate(args):
    _keys, u, d = _joined_u_dsc(args.u_csv, args.dsc_csv)
    dsc_cut = _opt(args, "dsc_cut", 0.70)
    positives = [x <= dsc_cut for x in d]
    if all(positives) or not any(positives):
        raise ValueError("calibration needs both accurate and inaccurate cases")
    candidates = sorted({0.0, *(x for x in u if np.isfinite(x))})
    best = None
    for tau in candidates:
        stats = detection_stats(u, d, tau=tau, dsc_cut=dsc_cut)
        balanced = 0.5 * (stats.sensitivity + stats.specificity)
        if best is None or balanced > best[0] + 1e-12:
            best = (balanced, tau, stats)
    balanced, tau, stats = best
    payload = dict(stats.to_dict())
    payload["tau"] = tau
    payload["dsc_cut"] = dsc_cut
    payload["balanced_accuracy"] = balanced
    _write_text(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_plotdata(args):
    keys, u, d = _joined_u_dsc(args.u_csv, args.dsc_csv)
    lines = ["scan_id,tract,u,dsc"]
    for (scan_id, tract), uu, dd in zip(keys, u, d):
        lines.append("%s,%s,%s,%s" % (scan_id, tract, repr(uu), repr(dd)))
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, help="random seed")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dmriseg",
        description="White-matter tract segmentation from diffusion MRI "
        "with subset-resampling uncertainty.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic phantom scan")
    _add_common(p)
    p.add_argument("--spec", help="phantom spec JSON (default: crossing tubes)")
    p.add_argument("--bvals", required=True)
    p.add_argument("--bvecs", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sigma", type=float, help="noise level override")
    p.add_argument("--variant", type=int, help="geometry jitter seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select-dirs", help="pick well-spread measurement subsets")
    _add_common(p)
    p.add_argument("--bvals", required=True)
    p.add_argument("--bvecs", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--b-target", dest="b_target", type=float)
    p.add_argument("--b-tol", dest="b_tol", type=float)
    p.add_argument("--disjoint", type=int, metavar="N", help="N disjoint subsets")
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.set_defaults(func=cmd_select_dirs)

    p = sub.add_parser("train", help="train the reference model")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters-per-epoch", dest="iters_per_epoch", type=int)
    p.add_argument("--batch-patches", dest="batch_patches", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--k", type=int, help="fix the subset size range to k..k")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--b-target", dest="b_target", type=float)
    p.add_argument("--b-tol", dest="b_tol", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment a scan with subset averaging")
    _add_common(p)
    p.add_argument("--dwi")
    p.add_argument("--b0")
    p.add_argument("--bvals")
    p.add_argument("--bvecs")
    p.add_argument("--model")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--blend", choices=["uniform", "cosine"])
    p.add_argument("--threads", type=int)
    p.add_argument("--b-target", dest="b_target", type=float)
    p.add_argument("--b-tol", dest="b_tol", type=float)
    p.add_argument("--subsets", help="JSON subsets file to use instead of drawing")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("uncertainty", help="score prediction disagreement")
    _add_common(p)
    p.add_argument("--tta-dir", dest="tta_dir", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--scorer", choices=["l1", "l2"])
    p.add_argument("--scan-id", dest="scan_id")
    p.add_argument("--out", help="output directory (default: --tta-dir)")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("evaluate", help="score predicted masks against truth")
    _add_common(p)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--scan-id", dest="scan_id")
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("detect", help="flag inaccurate segmentations")
    _add_common(p)
    p.add_argument("--u-csv", dest="u_csv", required=True)
    p.add_argument("--dsc-csv", dest="dsc_csv", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--dsc-cut", dest="dsc_cut", type=float)
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate", help="pick the threshold maximizing balanced accuracy")
    _add_common(p)
    p.add_argument("--u-csv", dest="u_csv", required=True)
    p.add_argument("--dsc-csv", dest="dsc_csv", required=True)
    p.add_argument("--dsc-cut", dest="dsc_cut", type=float)
    p.add_argument("--out", help="output JSON path (default stdout)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("plotdata", help="emit joined (u, dsc) pairs for plotting")
    _add_common(p)
    p.add_argument("--u-csv", dest="u_csv", required=True)
    p.add_argument("--dsc-csv", dest="dsc_csv", required=True)
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_plotdata)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.config_data = _load_config(getattr(args, "config", None))
        return args.func(args)
    except Exception as exc:
        msg = str(exc).replace("\n", " ") or exc.__class__.__name__
        print("error: %s" % msg, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
