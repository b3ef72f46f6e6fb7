"""Command-line front end.

    ovbm synth     --out data/ --n-subjects 40 --seed 7
    ovbm train     --manifest data/manifest.csv --out runs/a --seed 1
    ovbm eval      --run runs/a --manifest data/manifest.csv
    ovbm diagnose  --run runs/a --manifest data/manifest.csv --subjects s001
    ovbm saliency  --run runs/a --manifest data/manifest.csv \
                   --subjects s000,s001 --compare s000,s001 --out reports/
    ovbm report uniqueness --run runs/a --out reports/
    ovbm report ablation --pairs runs/nomask:runs/mask --out reports/

Exit codes: 0 ok, 2 bad inputs or config, 3 missing/unreadable files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .audio_io import parse_manifest
from .pipeline import (
    RunConfig,
    TrainedPipeline,
    evaluate_manifest,
    load_clip,
    load_pipeline,
    run_training,
    save_pipeline,
    subject_saliency,
)
from .saliency import (
    ablation_csv,
    ablation_json,
    ablation_report,
    comparison_csv,
    compare_maps,
    saliency_csv,
    saliency_json,
    saliency_svg,
    uniqueness_csv,
    uniqueness_json,
    uniqueness_report,
)
from .util import atomic_write_text

# train flags that shadow RunConfig fields (flag dest -> field)
_TRAIN_OVERRIDES = {
    "seed": "seed",
    "label": "label",
    "chunk_size": "chunk_size",
    "stride": "stride",
    "scheme": "scheme",
    "strategy": "strategy",
    "lr": "learning_rate",
    "epochs": "fusion_epochs",
    "pretrain_epochs": "pretrain_epochs",
    "tune_epochs": "tune_epochs",
    "surrogate_per_class": "surrogate_per_class",
    "threshold": "threshold",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovbm",
        description="voice-based disease screening: train, diagnose, explain",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a labeled synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--n-subjects", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=int, default=16000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the full ensemble on a manifest")
    p.add_argument("--manifest", help="subject manifest CSV")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--label")
    p.add_argument("--chunk-size", type=float)
    p.add_argument("--stride", type=float)
    p.add_argument("--poisson-mask", choices=("on", "off"))
    p.add_argument("--scheme", choices=("average", "linpos", "linneg"))
    p.add_argument("--strategy", help="frozen, last:N, or all")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int, help="joint fusion epochs")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--tune-epochs", type=int)
    p.add_argument("--surrogate-per-class", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved run against a manifest")
    p.add_argument("--run", required=True, help="training run directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="per-subject screening decisions")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subjects", help="comma-separated ids (default: all)")
    p.add_argument("--out", help="write diagnoses JSON here")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("saliency", help="per-subject biomarker maps")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--subjects", required=True,
                   help="comma-separated ids, or 'all'")
    p.add_argument("--compare", help="two ids to diff, e.g. s000,s001")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("report", help="roster-level statistical reports")
    rsub = p.add_subparsers(dest="report_kind", required=True)

    r = rsub.add_parser("uniqueness",
                        help="which members caught which positives")
    r.add_argument("--run", required=True)
    r.add_argument("--members",
                   help="comma-separated member ids (default: the four "
                        "word-recall members)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report_uniqueness)

    r = rsub.add_parser("ablation",
                        help="accuracy deltas between paired runs")
    r.add_argument("--pairs", required=True,
                   help="comma-separated without:with run directory pairs")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report_ablation)

    return parser


# ----------------------------------------------------------- commands

def cmd_synth(args) -> int:
    from .synthesis import write_corpus

    manifest = write_corpus(args.out, args.n_subjects, args.seed,
                            args.sample_rate)
    print(f"wrote {args.n_subjects} subjects to {manifest}")
    return 0


def _config_from_args(args) -> RunConfig:
    data = {}
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"missing config file {args.config}")
        with open(args.config) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    config = RunConfig.from_dict(data)
    if args.manifest:
        config.manifest = args.manifest
    if args.poisson_mask is not None:
        config.poisson_mask = args.poisson_mask == "on"
    for dest, fieldname in _TRAIN_OVERRIDES.items():
        value = getattr(args, dest)
        if value is not None:
            setattr(config, fieldname, value)
    if not config.manifest:
        raise ValueError("a manifest is required (--manifest or config file)")
    return config


def cmd_train(args) -> int:
    config = _config_from_args(args)
    config.validate()
    if not os.path.exists(config.manifest):
        raise FileNotFoundError(f"missing manifest {config.manifest}")
    pipe = run_training(config)
    save_pipeline(pipe, args.out)
    m = pipe.metrics
    print(f"run {config.label}: seed={config.seed} "
          f"digest={m['config_digest'][:12]}")
    print(f"train subjects={m['counts']['train_subjects']} "
          f"accuracy={m['train']['subject_accuracy']:.3f}")
    print(f"test  subjects={m['counts']['test_subjects']} "
          f"accuracy={m['test']['subject_accuracy']:.3f}")
    print(f"best member {m['best_member']['biomarker_id']} "
          f"accuracy={m['best_member']['test_subject_accuracy']:.3f}")
    print(f"saved to {args.out}")
    return 0


def _load_run(run_dir: str) -> TrainedPipeline:
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"missing run directory {run_dir}")
    return load_pipeline(run_dir)


def cmd_eval(args) -> int:
    pipe = _load_run(args.run)
    if not os.path.exists(args.manifest):
        raise FileNotFoundError(f"missing manifest {args.manifest}")
    result = evaluate_manifest(pipe, args.manifest)
    print(f"subjects={result['num_subjects']} "
          f"subject_accuracy={result['subject_accuracy']:.3f} "
          f"chunk_accuracy={result['chunk_accuracy']:.3f}")
    if args.out:
        atomic_write_text(args.out,
                          json.dumps(result, indent=2, sort_keys=True) + "\n")
        print(f"wrote {args.out}")
    return 0


def _select_records(manifest_path: str, spec: str | None) -> list:
    records = parse_manifest(manifest_path)
    if spec is None or spec == "all":
        return records
    wanted = [s for s in spec.split(",") if s]
    by_id = {r.subject_id: r for r in records}
    missing = [s for s in wanted if s not in by_id]
    if missing:
        raise ValueError(f"subjects not in manifest: {', '.join(missing)}")
    return [by_id[s] for s in wanted]


def cmd_diagnose(args) -> int:
    from .pipeline import diagnose_subject

    pipe = _load_run(args.run)
    if not os.path.exists(args.manifest):
        raise FileNotFoundError(f"missing manifest {args.manifest}")
    records = _select_records(args.manifest, args.subjects)
    results = {}
    for rec in records:
        clip = load_clip(args.manifest, rec, pipe.config.sample_rate)
        d = diagnose_subject(pipe, rec, clip)
        results[rec.subject_id] = d.to_dict()
        print(f"{rec.subject_id}: P(positive)={d.probability:.4f} -> {d.label}")
    if args.out:
        atomic_write_text(args.out,
                          json.dumps(results, indent=2, sort_keys=True) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_saliency(args) -> int:
    pipe = _load_run(args.run)
    if not os.path.exists(args.manifest):
        raise FileNotFoundError(f"missing manifest {args.manifest}")
    records = _select_records(args.manifest, args.subjects)
    if not records:
        raise ValueError("no subjects selected")
    os.makedirs(args.out, exist_ok=True)
    maps = {}
    for rec in records:
        clip = load_clip(args.manifest, rec, pipe.config.sample_rate)
        maps[rec.subject_id] = subject_saliency(pipe, rec, clip)
        families = sorted({e.family for e in maps[rec.subject_id].entries})
        means = " ".join(
            f"{fam}={maps[rec.subject_id].family_mean(fam):.3f}"
            for fam in families)
        print(f"{rec.subject_id}: {means}")

    ordered = [maps[r.subject_id] for r in records]
    atomic_write_text(os.path.join(args.out, "saliency.csv"),
                      saliency_csv(ordered))
    atomic_write_text(os.path.join(args.out, "saliency.json"),
                      saliency_json(ordered))
    atomic_write_text(os.path.join(args.out, "saliency.svg"),
                      saliency_svg(ordered))
    if args.compare:
        pair = [s for s in args.compare.split(",") if s]
        if len(pair) != 2:
            raise ValueError("--compare takes exactly two subject ids")
        missing = [s for s in pair if s not in maps]
        if missing:
            raise ValueError(
                f"--compare ids must be in --subjects: {', '.join(missing)}")
        cmp = compare_maps(maps[pair[0]], maps[pair[1]])
        atomic_write_text(os.path.join(args.out, "comparison.csv"),
                          comparison_csv(cmp))
    print(f"wrote reports to {args.out}")
    return 0


_DEFAULT_UNIQUENESS_MEMBERS = [
    "ww_context_kitchen", "ww_unique_tipping",
    "ww_inferred_jar", "ww_salient_overflow",
]


def cmd_report_uniqueness(args) -> int:
    pipe = _load_run(args.run)
    detections = pipe.metrics.get("detections")
    positives = pipe.metrics.get("test_positives")
    if not detections or positives is None:
        raise ValueError("run has no stored detection metrics; retrain first")
    members = (args.members.split(",") if args.members
               else _DEFAULT_UNIQUENESS_MEMBERS)
    missing = [m for m in members if m not in detections]
    if missing:
        raise ValueError(f"no detections for members: {', '.join(missing)}")
    report = uniqueness_report({m: detections[m] for m in members}, positives)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "uniqueness.csv"),
                      uniqueness_csv(report))
    atomic_write_text(os.path.join(args.out, "uniqueness.json"),
                      uniqueness_json(report))
    for row in report.rows:
        print(f"{row.label}: {row.count} ({row.percent:.1f}%)")
    print(f"wrote reports to {args.out}")
    return 0


def cmd_report_ablation(args) -> int:
    rows = []
    for pair in args.pairs.split(","):
        parts = pair.split(":")
        if len(parts) != 2:
            raise ValueError(f"bad pair {pair!r}; expected without:with")
        without_pipe = _load_run(parts[0])
        with_pipe = _load_run(parts[1])
        label = with_pipe.config.label
        rows.append((
            label,
            100.0 * without_pipe.metrics["test"]["subject_accuracy"],
            100.0 * with_pipe.metrics["test"]["subject_accuracy"],
        ))
    report = ablation_report(rows)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "ablation.csv"),
                      ablation_csv(report))
    atomic_write_text(os.path.join(args.out, "ablation.json"),
                      ablation_json(report))
    for row in report.rows:
        print(f"{row.label}: {row.without_mask:.1f} -> {row.with_mask:.1f} "
              f"({row.improvement:+.1f})")
    print(f"avg improvement: {report.avg_improvement_display}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
