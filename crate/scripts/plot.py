#!/usr/bin/env python3
"""Render training curves and ablation tables from run output CSVs.

Reads the CSV files written by the `gcdt` command-line tool and produces
either PNG figures (when matplotlib is available) or plain-text renderings
(always). Nothing here recomputes statistics; it only displays what the run
recorded.

Usage:
    plot.py curve RUN_DIR [RUN_DIR ...] [--out FIG.png] [--window N]
    plot.py ablation RUN_DIR [--out FIG.png]
    plot.py bench RUN_DIR
"""

import argparse
import csv
import sys
from pathlib import Path

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    HAVE_MPL = True
except ImportError:
    HAVE_MPL = False


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def moving_average(values, window):
    if window <= 1:
        return list(values)
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def text_curve(steps, med, width=72, height=16):
    lo, hi = min(med), max(med)
    span = (hi - lo) or 1.0
    grid = [[" "] * width for _ in range(height)]
    for s, m in zip(steps, med):
        x = int((s - steps[0]) / max(steps[-1] - steps[0], 1) * (width - 1))
        y = int((m - lo) / span * (height - 1))
        grid[height - 1 - y][x] = "*"
    lines = ["".join(row) for row in grid]
    lines.insert(0, f"return  {hi:.3f}")
    lines.append(f"        {lo:.3f}   env steps {steps[0]} .. {steps[-1]}")
    return "\n".join(lines)


def cmd_curve(args):
    curves = []
    for run_dir in args.run_dirs:
        path = run_dir / "aggregate.csv"
        if not path.is_file():
            sys.exit(f"error: {path} not found (run the train subcommand first)")
        rows = read_csv(path)
        steps = [int(r["env_steps"]) for r in rows]
        med = moving_average([float(r["return_median"]) for r in rows], args.window)
        q25 = moving_average([float(r["return_q25"]) for r in rows], args.window)
        q75 = moving_average([float(r["return_q75"]) for r in rows], args.window)
        curves.append((run_dir.name, steps, med, q25, q75))

    if HAVE_MPL:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for name, steps, med, q25, q75 in curves:
            (line,) = ax.plot(steps, med, label=name)
            ax.fill_between(steps, q25, q75, alpha=0.2, color=line.get_color())
        ax.set_xlabel("environment steps")
        ax.set_ylabel("episode return (median, IQR band)")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        out = args.out or Path("training_curve.png")
        fig.savefig(out, dpi=150)
        print(f"wrote {out}")
    else:
        for name, steps, med, _, _ in curves:
            print(f"== {name} (median episode return, window {args.window}) ==")
            print(text_curve(steps, med))


def resolve_csv(arg, name, hint):
    """Accept either the CSV itself or the run directory that holds it."""
    path = arg if arg.is_file() else arg / name
    if not path.is_file():
        sys.exit(f"error: {path} not found (run the {hint} subcommand first)")
    return path


def cmd_ablation(args):
    path = resolve_csv(args.run_dirs[0], "ablation.csv", "ablate")
    rows = read_csv(path)
    cols = ["return_at_20pct", "return_at_40pct", "return_at_60pct", "return_at_80pct"]

    header = ["planner", "sims"] + [c.replace("return_at_", "") for c in cols]
    widths = [max(len(h), 10) for h in header]
    print(" | ".join(h.ljust(w) for h, w in zip(header, widths)))
    print("-+-".join("-" * w for w in widths))
    for r in rows:
        cells = [r["planner"], r["n_simulations"]] + [
            f"{float(r[c]):.3f}" for c in cols
        ]
        print(" | ".join(c.ljust(w) for c, w in zip(cells, widths)))

    if HAVE_MPL:
        budgets = sorted({int(r["n_simulations"]) for r in rows})
        fig, ax = plt.subplots(figsize=(6, 4))
        for planner in ("gcdt", "dt"):
            ys = []
            for n in budgets:
                match = [
                    float(r[cols[-1]])
                    for r in rows
                    if r["planner"] == planner and int(r["n_simulations"]) == n
                ]
                ys.append(match[0] if match else float("nan"))
            ax.plot(budgets, ys, marker="o", label=planner)
        ax.set_xscale("log", base=2)
        ax.set_xticks(budgets, [str(b) for b in budgets])
        ax.set_xlabel("simulations per decision")
        ax.set_ylabel("median return at 80% of budget")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        out = args.out or Path("ablation.png")
        fig.savefig(out, dpi=150)
        print(f"wrote {out}")


def cmd_bench(args):
    path = resolve_csv(args.run_dirs[0], "bench.csv", "bench")
    rows = read_csv(path)
    print("planner | sims | TS mean (us) | TS sd (us) | TE mean (ms) | TE sd (ms)")
    print("--------+------+--------------+------------+--------------+-----------")
    for r in rows:
        print(
            f"{r['planner']:<7} | {r['n_simulations']:>4} |"
            f" {1e6 * float(r['ts_mean_seconds']):>12.1f} |"
            f" {1e6 * float(r['ts_std_seconds']):>10.1f} |"
            f" {1e3 * float(r['te_mean_seconds']):>12.3f} |"
            f" {1e3 * float(r['te_std_seconds']):>9.3f}"
        )


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("mode", choices=["curve", "ablation", "bench"])
    ap.add_argument("run_dirs", nargs="+", type=Path)
    ap.add_argument("--out", type=Path, help="output figure path (PNG)")
    ap.add_argument(
        "--window", type=int, default=10, help="moving-average window in episodes"
    )
    args = ap.parse_args()
    {"curve": cmd_curve, "ablation": cmd_ablation, "bench": cmd_bench}[args.mode](args)


if __name__ == "__main__":
    main()
