#!/usr/bin/env python3
"""Plot an exported analysis directory and, optionally, RL metrics logs.

    python3 tools/plot_analysis.py runs/main/analysis --runs runs/main/rl --out plots

Every table is checked against the column list in manifest.json before use.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

SUPPORTED_VERSION = 1


def read_table(root, entry):
    path = root / entry["path"]
    with path.open(newline="") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    if not rows or rows[0] != entry["columns"]:
        raise SystemExit(f"{path}: header {rows[:1]} does not match manifest columns {entry['columns']}")
    body = rows[1:]
    if len(body) != entry["rows"]:
        raise SystemExit(f"{path}: {len(body)} rows, manifest says {entry['rows']}")
    return [dict(zip(entry["columns"], r)) for r in body]


def plot_curves(root, entries, out):
    fig, ax = plt.subplots(figsize=(6, 4))
    logged = None
    for entry in entries:
        rows = read_table(root, entry)
        label = Path(entry["path"]).stem.removeprefix("bon-")
        ax.plot([int(r["k"]) for r in rows], [float(r["expected_rfs"]) for r in rows], marker="o", label=label)
        logged = float(rows[0]["logged_rfs"])
    if logged is not None:
        ax.axhline(logged, color="gray", linestyle="--", label="logged")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("K")
    ax.set_ylabel("expected best-of-K RFS")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "best_of_k.png", dpi=120)
    plt.close(fig)


def plot_summary(root, entry, out, name, fields):
    rows = read_table(root, entry)
    fig, axes = plt.subplots(1, len(fields), figsize=(3 * len(fields), 3), squeeze=False)
    for ax, field in zip(axes[0], fields):
        ax.bar([r["label"] for r in rows], [float(r[field]) for r in rows])
        ax.set_title(field)
        ax.tick_params(axis="x", labelrotation=45)
    fig.tight_layout()
    fig.savefig(out / f"{name}.png", dpi=120)
    plt.close(fig)


def plot_runs(run_dirs, out):
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    for run in run_dirs:
        path = Path(run) / "metrics.jsonl"
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        evals = [(r["iteration"], r["heldout_rfs"]) for r in records if r.get("heldout_rfs") is not None]
        gaps = [(r["iteration"], r["diversity"]["gap"]) for r in records if r.get("diversity")]
        name = Path(run).name
        if evals:
            top.plot(*zip(*evals), marker=".", label=name)
        if gaps:
            bottom.plot(*zip(*gaps), marker=".", label=name)
    top.set_ylabel("held-out RFS")
    bottom.set_ylabel("diversity gap")
    bottom.set_xlabel("iteration")
    top.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "training.png", dpi=120)
    plt.close(fig)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("analysis", type=Path, help="directory written by `intentflow eval`")
    parser.add_argument("--runs", nargs="*", default=[], help="RL run directories holding metrics.jsonl")
    parser.add_argument("--out", type=Path, default=Path("plots"))
    args = parser.parse_args(argv)

    manifest = json.loads((args.analysis / "manifest.json").read_text())
    if manifest.get("format_version") != SUPPORTED_VERSION:
        raise SystemExit(f"unsupported export format {manifest.get('format_version')}")
    args.out.mkdir(parents=True, exist_ok=True)
    by_kind = {}
    for entry in manifest["files"]:
        by_kind.setdefault(entry["kind"], []).append(entry)
        read_table(args.analysis, entry)

    if by_kind.get("bon_curve"):
        plot_curves(args.analysis, by_kind["bon_curve"], args.out)
    for entry in by_kind.get("diversity_summary", []):
        plot_summary(args.analysis, entry, args.out, "diversity", ["d1", "d2", "gap"])
    for entry in by_kind.get("heldout_summary", []):
        plot_summary(args.analysis, entry, args.out, "heldout", ["rfs_mean", "trust_region_rate"])
    if args.runs:
        plot_runs(args.runs, args.out)
    written = sorted(p.name for p in args.out.glob("*.png"))
    print(f"wrote {', '.join(written) or 'nothing'} to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
