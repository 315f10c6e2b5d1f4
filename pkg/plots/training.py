#!/usr/bin/env python3
"""Sample-efficiency curves from one or more training run directories.

Each run directory must hold the trainer's `metrics.csv` and
`resolved-config.ini`. Runs sharing a configuration (everything except
the seed) form one curve: the mean return against environment steps,
with a 95% seed-stratified bootstrap band once three seeds are present.

Usage: plots/training.py --runs RUN_DIR [RUN_DIR ...] --out fig.png
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
from bootstrap import bootstrap_ci  # noqa: E402

N_RESAMPLES = 1000


class PlotInputError(ValueError):
    pass


def read_metrics(run_dir: str):
    """(env_steps, mean_return) columns of one run's metrics.csv."""
    path = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(path):
        raise PlotInputError(f"{run_dir} has no metrics.csv")
    steps, returns = [], []
    with open(path) as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "mean_return" not in reader.fieldnames:
            raise PlotInputError(f"{path}: missing metrics header")
        for i, row in enumerate(reader, start=2):
            try:
                steps.append(float(row["env_steps"]))
                returns.append(float(row["mean_return"]))
            except (KeyError, TypeError, ValueError):
                raise PlotInputError(f"{path}: malformed row {i}") from None
    if not steps:
        raise PlotInputError(f"{path}: no data rows")
    return np.array(steps), np.array(returns)


def run_label(run_dir: str) -> tuple[str, str]:
    """(configuration label, seed) for grouping runs into curves."""
    path = os.path.join(run_dir, "resolved-config.ini")
    parser = configparser.ConfigParser()
    if not parser.read(path):
        return os.path.basename(os.path.normpath(run_dir)), run_dir
    env = parser.get("env", "name", fallback="?")
    model = parser.get("model", "model", fallback="?")
    seed = parser.get("train", "seed", fallback=run_dir)
    return f"{model} on {env}", seed


def group_runs(run_dirs):
    groups: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for d in run_dirs:
        label, _ = run_label(d)
        groups.setdefault(label, []).append(read_metrics(d))
    return groups


def plot_training(run_dirs, out_path: str):
    """Render the figure; returns (figure, curves, bands) for inspection."""
    groups = group_runs(run_dirs)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    n_bands = 0
    for label, runs in sorted(groups.items()):
        base_steps = runs[0][0]
        for steps, _ in runs[1:]:
            if len(steps) != len(base_steps) or not np.array_equal(steps, base_steps):
                raise PlotInputError(f"runs for {label!r} disagree on evaluation points")
        curves = np.stack([r[1] for r in runs])
        mean = curves.mean(axis=0)
        ax.plot(base_steps, mean, label=f"{label} ({len(runs)} seed{'s' if len(runs) > 1 else ''})")
        if len(runs) >= 3:
            lo, hi = bootstrap_ci(curves, n_resamples=N_RESAMPLES)
            ax.fill_between(base_steps, lo, hi, alpha=0.25)
            n_bands += 1
    ax.set_xlabel("environment steps")
    ax.set_ylabel("mean episode return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    return fig, len(groups), n_bands


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--runs", nargs="+", required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        _, n_curves, n_bands = plot_training(args.runs, args.out)
    except PlotInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {args.out} ({n_curves} curve(s), {n_bands} band(s))")
    return 0


if __name__ == "__main__":
    sys.exit(main())
