#!/usr/bin/env python3
"""Run the complete adaptation study end to end.

Generates the paired dataset, trains the rectilinear baseline, measures
how distortion strength degrades it, computes the warped-prediction
upper bound, runs every adaptation mode x placement with the few-shot
curve, and optionally trains a from-scratch fisheye reference model.
All artifacts (CSVs, PNG plots, checkpoints, resolved configs) land
under one study directory:

    python scripts/run_full_study.py --out studies/default --seed 17

Pass --config to override dataset/engine hyperparameters; the defaults
take a few hours on one CPU.  --quick swaps in a small configuration
(minutes, for smoke-testing the pipeline).
"""

import argparse
import csv
import logging
import os
import sys

from warpadapt import config as C
from warpadapt import data as D
from warpadapt import engine as E
from warpadapt import model as Mo
from warpadapt.cli import main as cli

QUICK_OVERRIDES = {
    "dataset.n_train": 60, "dataset.n_val": 12, "dataset.n_test": 24,
    "dataset.height": 48, "dataset.width": 96,
    "baseline.epochs": 8, "adapt.epochs": 4,
    "sweep.seeds": (17,), "sweep.fewshot": (1, 20, "full"),
}

DEGRADATION_FS = (150.0, 125.0, 75.0)


def run(argv, step):
    print(f"== {step}: warpadapt {' '.join(argv)}", flush=True)
    rc = cli(argv)
    if rc != 0:
        print(f"step {step!r} failed with exit code {rc}", file=sys.stderr)
        sys.exit(rc)


def degradation_table(ckpt, rect_manifest, out_dir, cfg):
    """Evaluate the baseline on each distortion strength; returns rows."""
    model = Mo.load_checkpoint(ckpt)
    rect_miou, _ = E.evaluate_split(model, rect_manifest, "test",
                                    D.VARIANT_RECT)
    rows = [{"domain": "rect", "miou": rect_miou}]
    for f in DEGRADATION_FS:
        fish = D.derive_fisheye_dataset(rect_manifest,
                                        cfg.distortion_params(f=f),
                                        os.path.join(out_dir, f"f{f:g}"))
        miou, _ = E.evaluate_split(model, fish, "test", D.VARIANT_FISHEYE)
        rows.append({"domain": f"fisheye_f{f:g}", "miou": miou})
    with open(os.path.join(out_dir, "degradation.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "miou"])
        for row in rows:
            writer.writerow([row["domain"], f"{row['miou']:.6f}"])
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, help="study directory")
    parser.add_argument("--config", help="base config file (optional)")
    parser.add_argument("--seed", type=int, default=17)
    parser.add_argument("--quick", action="store_true",
                        help="tiny configuration for a fast pipeline check")
    parser.add_argument("--with-scratch", action="store_true",
                        help="also train a from-scratch fisheye reference")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(message)s")

    os.makedirs(args.out, exist_ok=True)
    data_dir = os.path.join(args.out, "data")
    cfg = C.load_config(args.config)
    if args.quick:
        for key, value in QUICK_OVERRIDES.items():
            cfg.set(key, value)
    cfg.set("run.seed", args.seed)
    cfg.set("run.data_dir", data_dir)
    cfg_path = os.path.join(args.out, "study.cfg")
    cfg.write_resolved(cfg_path)

    base_dir = os.path.join(args.out, "baseline")
    seed = ["--seed", str(args.seed)]
    run(["gen-data", "--config", cfg_path, "--out", data_dir] + seed,
        "generate data")
    run(["train", "--config", cfg_path, "--out", base_dir] + seed,
        "train baseline")

    ckpt = os.path.join(base_dir, "baseline.ckpt")
    rect_manifest_path = os.path.join(data_dir, "rect", "manifest.tsv")
    rect_manifest = D.load_manifest(rect_manifest_path)

    print("== degradation across distortion strengths", flush=True)
    degrade_dir = os.path.join(args.out, "degradation")
    os.makedirs(degrade_dir, exist_ok=True)
    for row in degradation_table(ckpt, rect_manifest, degrade_dir, cfg):
        print(f"   {row['domain']:>16}: mIoU {row['miou']:.4f}", flush=True)

    run(["bound", "--baseline", ckpt, "--manifest", rect_manifest_path,
         "--f", str(cfg["distortion.f"]), "--k1", str(cfg["distortion.k1"])],
        "upper bound")
    run(["sweep", "--baseline", ckpt, "--config", cfg_path,
         "--out", os.path.join(args.out, "sweep")] + seed,
        "mode/placement sweep + few-shot curve")

    if args.with_scratch:
        print("== from-scratch fisheye reference", flush=True)
        fish = D.load_manifest(os.path.join(data_dir, "fisheye",
                                            "manifest.tsv"))
        model, report = E.train_baseline(
            fish, cfg.baseline_config(args.seed), variant=D.VARIANT_FISHEYE)
        scratch_dir = os.path.join(args.out, "scratch_fisheye")
        os.makedirs(scratch_dir, exist_ok=True)
        Mo.save_checkpoint(model, os.path.join(scratch_dir, "scratch.ckpt"))
        report.write_history_csv(os.path.join(scratch_dir, "history.csv"))
        report.write_summary_json(os.path.join(scratch_dir, "summary.json"))
        print(f"   from-scratch fisheye test mIoU "
              f"{report.final_test_miou:.4f}", flush=True)

    print(f"study complete under {args.out}", flush=True)


if __name__ == "__main__":
    main()
