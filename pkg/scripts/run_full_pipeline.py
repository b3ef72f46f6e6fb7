#!/usr/bin/env python3
"""Seeded end-to-end demo: synthesize a corpus, train the ensemble with
the degradation mask on and off, evaluate, and emit the per-subject
saliency maps plus the uniqueness and masking-ablation reports.

    python3 scripts/run_full_pipeline.py --out /tmp/ovbm-demo --seed 1

Everything below drives the same entry points as the `ovbm` console
script, so the artifact tree matches what the CLI produces.
"""

import argparse
import json
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from ovbm.cli import main as ovbm


def step(label, argv):
    print(f"\n=== {label}: ovbm {' '.join(argv)}")
    start = time.monotonic()
    code = ovbm(argv)
    print(f"=== {label} done in {time.monotonic() - start:.1f}s")
    if code != 0:
        sys.exit(code)


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="demo", help="output directory")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-subjects", type=int, default=40)
    p.add_argument("--epochs", type=int, default=25, help="fusion epochs")
    p.add_argument("--skip-nomask", action="store_true",
                   help="train only the masked variant")
    return p.parse_args()


def main():
    args = parse_args()
    root = os.path.abspath(args.out)
    corpus = os.path.join(root, "corpus")
    manifest = os.path.join(corpus, "manifest.csv")
    masked = os.path.join(root, "run_mask")
    unmasked = os.path.join(root, "run_nomask")
    reports = os.path.join(root, "reports")

    step("synth", ["synth", "--out", corpus,
                   "--n-subjects", str(args.n_subjects),
                   "--seed", str(args.seed)])

    train_common = [
        "--manifest", manifest, "--seed", str(args.seed),
        "--chunk-size", "2.0", "--stride", "2.0",
        "--pretrain-epochs", "10", "--tune-epochs", "8",
        "--epochs", str(args.epochs),
    ]
    step("train (mask on)", ["train", *train_common, "--poisson-mask", "on",
                             "--label", "mask", "--out", masked])
    if not args.skip_nomask:
        step("train (mask off)", ["train", *train_common,
                                  "--poisson-mask", "off",
                                  "--label", "nomask", "--out", unmasked])

    step("eval", ["eval", "--run", masked, "--manifest", manifest,
                  "--out", os.path.join(root, "eval.json")])
    step("diagnose", ["diagnose", "--run", masked, "--manifest", manifest,
                      "--out", os.path.join(root, "diagnoses.json")])

    with open(os.path.join(masked, "metrics.json")) as fh:
        metrics = json.load(fh)
    test_ids = metrics["test_subjects"]
    pair = f"{test_ids[0]},{test_ids[-1]}"
    step("saliency", ["saliency", "--run", masked, "--manifest", manifest,
                      "--subjects", ",".join(test_ids), "--compare", pair,
                      "--out", reports])
    step("report uniqueness", ["report", "uniqueness", "--run", masked,
                               "--out", reports])
    if not args.skip_nomask:
        step("report ablation", ["report", "ablation",
                                 "--pairs", f"{unmasked}:{masked}",
                                 "--out", reports])

    print(f"\nartifacts under {root}:")
    for dirpath, _, filenames in sorted(os.walk(root)):
        for name in sorted(filenames):
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            if not rel.startswith(("corpus/wav", "run_")):
                print(f"  {rel}")


if __name__ == "__main__":
    main()
