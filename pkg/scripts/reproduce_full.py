#!/usr/bin/env python3
"""Full-scale reproduction driver.

This is the long-running counterpart to the desk-scale test suite: it
fine-tunes a pretrained biomedical encoder on three concept
normalization corpora and one pairwise matching corpus, then checks the
resulting metrics against the expected numbers below.  Budget hours on
a GPU machine, not minutes; nothing here belongs in the merge gate.

Expected results (percent), tolerance +/- 1.0 point:

    ncbi-disease      top-1 accuracy   91.7
    bc5cdr-disease    top-1 accuracy   93.4
    bc5cdr-chemical   top-1 accuracy   96.7
    pairwise          pair accuracy    88.13

Data layout under --data-dir (files in the package's TSV formats; the
corpora are licensed, so fetching and converting them is on you):

    <data-dir>/ncbi-disease/{train.tsv,dev.tsv,test.tsv,dictionary.tsv}
    <data-dir>/bc5cdr-disease/...      same four files
    <data-dir>/bc5cdr-chemical/...    same four files
    <data-dir>/pairwise/{pairs_train.tsv,pairs_test.tsv}

Normalization corpora are two-column mention TSVs; run them through
``edgenorm prepare --filter`` first so unlinkable mentions are dropped.
The pair corpus uses the three-column ``a<TAB>b<TAB>label`` format.

Usage:

    python3 scripts/reproduce_full.py --data-dir /data/nen --out runs/full
    python3 scripts/reproduce_full.py --dry-run        # print the commands only

Each dataset is one `edgenorm train` call with the default
hyperparameters (K=30, batch 16, 50 epochs, lr 1e-5, weight decay
0.01) followed by `edgenorm evaluate` on the best checkpoint.  The
pairwise run calibrates its decision threshold on the training pairs.
"""

from __future__ import annotations

import argparse
import re
import shlex
import subprocess
import sys
from pathlib import Path

DEFAULT_MODEL = "dmis-lab/biobert-base-cased-v1.1"
TOLERANCE = 1.0  # accuracy points

CONCEPT_DATASETS = [
    ("ncbi-disease", 91.7),
    ("bc5cdr-disease", 93.4),
    ("bc5cdr-chemical", 96.7),
]
PAIR_DATASET = ("pairwise", 88.13)


def train_command(data: Path, out: Path, name: str, model: str) -> list[str]:
    d = data / name
    return [
        "edgenorm", "train",
        "--train", str(d / "train.tsv"),
        "--train", str(d / "dev.tsv"),
        "--eval", str(d / "test.tsv"),
        "--dict", str(d / "dictionary.tsv"),
        "--encoder", "contextual",
        "--model-name", model,
        "--out", str(out / name),
    ]


def evaluate_command(data: Path, out: Path, name: str) -> list[str]:
    d = data / name
    return [
        "edgenorm", "evaluate",
        "--checkpoint", str(out / name),
        "--dict", str(d / "dictionary.tsv"),
        "--queries", str(d / "test.tsv"),
        "--out", str(out / name / "report"),
    ]


def pair_commands(data: Path, out: Path, name: str) -> list[list[str]]:
    d = data / name
    ncbi = out / CONCEPT_DATASETS[0][0]
    return [
        [
            "edgenorm", "pairs",
            # reuse the first fine-tuned encoder; pair surfaces are
            # scored directly, no dictionary involved
            "--checkpoint", str(ncbi),
            "--pairs", str(d / "pairs_test.tsv"),
            "--calibrate", str(d / "pairs_train.tsv"),
            "--out", str(out / name / "decisions.tsv"),
        ]
    ]


def run(cmd: list[str], dry: bool) -> str:
    print("$", " ".join(shlex.quote(c) for c in cmd), flush=True)
    if dry:
        return ""
    proc = subprocess.run(cmd, capture_output=True, text=True)
    sys.stdout.write(proc.stdout)
    sys.stderr.write(proc.stderr)
    if proc.returncode != 0:
        raise SystemExit(f"command failed with exit code {proc.returncode}")
    return proc.stdout


def extract(pattern: str, text: str) -> float:
    match = re.search(pattern, text)
    if match is None:
        raise SystemExit(f"could not find {pattern!r} in command output")
    return float(match.group(1))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data-dir", type=Path, default=Path("data/full"),
                        help="root of the prepared corpora (see module docstring)")
    parser.add_argument("--out", type=Path, default=Path("runs/full"),
                        help="run directories and reports land here")
    parser.add_argument("--model-name", default=DEFAULT_MODEL,
                        help=f"pretrained encoder (default: {DEFAULT_MODEL})")
    parser.add_argument("--only", action="append", default=None,
                        metavar="DATASET", help="restrict to the named dataset(s)")
    parser.add_argument("--dry-run", action="store_true",
                        help="print the commands without running anything")
    args = parser.parse_args()

    wanted = set(args.only) if args.only else None
    results: list[tuple[str, float, float]] = []

    for name, target in CONCEPT_DATASETS:
        if wanted and name not in wanted:
            continue
        run(train_command(args.data_dir, args.out, name, args.model_name), args.dry_run)
        output = run(evaluate_command(args.data_dir, args.out, name), args.dry_run)
        if not args.dry_run:
            accuracy = extract(r"top-1 accuracy: ([0-9.]+)", output) * 100.0
            results.append((name, accuracy, target))

    name, target = PAIR_DATASET
    if not wanted or name in wanted:
        for cmd in pair_commands(args.data_dir, args.out, name):
            output = run(cmd, args.dry_run)
        if not args.dry_run:
            accuracy = extract(r"accuracy: ([0-9.]+)\s*$", output) * 100.0
            results.append((name, accuracy, target))

    if args.dry_run:
        print("\ndry run: commands above were not executed")
        print(f"expected results, tolerance +/- {TOLERANCE} point:")
        for name, target in CONCEPT_DATASETS + [PAIR_DATASET]:
            print(f"  {name:<16} {target}")
        return 0

    print()
    failed = False
    for name, got, target in results:
        off = abs(got - target)
        status = "ok" if off <= TOLERANCE else "MISS"
        if status == "MISS":
            failed = True
        print(f"{name:<16} got {got:6.2f}  expected {target:6.2f}  ({status})")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
