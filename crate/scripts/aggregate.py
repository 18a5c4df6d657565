#!/usr/bin/env python3
"""Recompute a training run's aggregate.csv from its per-seed metrics files.

This is an independent check on the trainer's own aggregation: it reads
seed_<n>/metrics.csv under a run directory, recomputes the per-episode
across-seed median and quartiles of episode returns, and either writes the
result or verifies it against the aggregate.csv the run produced.

Usage:
    aggregate.py RUN_DIR                  # print recomputed aggregate CSV
    aggregate.py RUN_DIR --out FILE       # write it to FILE
    aggregate.py RUN_DIR --check          # compare with RUN_DIR/aggregate.csv
"""

import argparse
import csv
import re
import sys
from pathlib import Path


def quantile(sorted_values, p):
    """Linear interpolation between order statistics at p * (n - 1)."""
    n = len(sorted_values)
    if n == 1:
        return sorted_values[0]
    pos = p * (n - 1)
    i = int(pos)
    frac = pos - i
    if i + 1 < n:
        return sorted_values[i] * (1.0 - frac) + sorted_values[i + 1] * frac
    return sorted_values[-1]


def read_metrics(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [(int(r["env_steps"]), float(r["episode_return"])) for r in rows]


def seed_dirs(run_dir):
    found = []
    for child in run_dir.iterdir():
        m = re.fullmatch(r"seed_(\d+)", child.name)
        if m and (child / "metrics.csv").is_file():
            found.append((int(m.group(1)), child))
    return [d for _, d in sorted(found)]


def recompute(run_dir):
    dirs = seed_dirs(run_dir)
    if not dirs:
        sys.exit(f"error: no seed_<n>/metrics.csv under {run_dir}")
    per_seed = [read_metrics(d / "metrics.csv") for d in dirs]
    rows = min(len(m) for m in per_seed)
    out = []
    for i in range(rows):
        steps = sorted(m[i][0] for m in per_seed)
        returns = sorted(m[i][1] for m in per_seed)
        out.append(
            (
                steps[len(steps) // 2],
                quantile(returns, 0.5),
                quantile(returns, 0.25),
                quantile(returns, 0.75),
            )
        )
    return out


def emit(rows, stream):
    stream.write("env_steps,return_median,return_q25,return_q75\n")
    for steps, med, q25, q75 in rows:
        stream.write(f"{steps},{med},{q25},{q75}\n")


def check(run_dir, rows, tolerance):
    path = run_dir / "aggregate.csv"
    if not path.is_file():
        sys.exit(f"error: {path} not found")
    with open(path, newline="") as f:
        published = list(csv.DictReader(f))
    if len(published) != len(rows):
        sys.exit(
            f"MISMATCH: {path} has {len(published)} rows, recomputed {len(rows)}"
        )
    worst = 0.0
    for i, (r, p) in enumerate(zip(rows, published)):
        if int(p["env_steps"]) != r[0]:
            sys.exit(f"MISMATCH at row {i}: env_steps {p['env_steps']} != {r[0]}")
        for key, val in zip(("return_median", "return_q25", "return_q75"), r[1:]):
            diff = abs(float(p[key]) - val)
            worst = max(worst, diff)
            if diff > tolerance:
                sys.exit(f"MISMATCH at row {i}, {key}: {p[key]} != {val}")
    print(f"OK: {len(rows)} rows match {path} (max abs diff {worst:.3e})")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--out", type=Path, help="write the recomputed CSV here")
    ap.add_argument(
        "--check",
        action="store_true",
        help="verify RUN_DIR/aggregate.csv instead of printing",
    )
    ap.add_argument("--tolerance", type=float, default=1e-9)
    args = ap.parse_args()

    rows = recompute(args.run_dir)
    if args.check:
        check(args.run_dir, rows, args.tolerance)
    elif args.out:
        with open(args.out, "w") as f:
            emit(rows, f)
        print(f"wrote {args.out} ({len(rows)} rows)")
    else:
        emit(rows, sys.stdout)


if __name__ == "__main__":
    main()
