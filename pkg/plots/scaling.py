#!/usr/bin/env python3
"""Scaling figures from benchmark sweep CSVs.

Agent sweeps (`model,agents_or_chunk,steps_per_sec,peak_bytes`) plot
peak memory per model on a log axis; rows whose measurements are NaN
mark saturation and truncate their series with a marker. Chunk sweeps
(same columns plus `loss`) add the loss series, which chunk invariance
keeps flat.

Usage: plots/scaling.py --csv sweep.csv --out fig.png
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


class PlotInputError(ValueError):
    pass


def read_sweep(path: str):
    if not os.path.exists(path):
        raise PlotInputError(f"sweep file not found: {path}")
    with open(path) as f:
        reader = csv.DictReader(f)
        required = {"model", "agents_or_chunk", "peak_bytes"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise PlotInputError(f"{path}: missing columns {sorted(required)}")
        has_loss = "loss" in reader.fieldnames
        rows = []
        for i, row in enumerate(reader, start=2):
            try:
                rows.append(
                    {
                        "model": row["model"],
                        "x": float(row["agents_or_chunk"]),
                        "peak_bytes": float(row["peak_bytes"]),
                        "loss": float(row["loss"]) if has_loss else None,
                    }
                )
            except (KeyError, TypeError, ValueError):
                raise PlotInputError(f"{path}: malformed row {i}") from None
    if not rows:
        raise PlotInputError(f"{path}: no data rows")
    return rows, has_loss


def plot_scaling(csv_path: str, out_path: str):
    """Render the figure; returns (figure, series count, saturation count)."""
    rows, has_loss = read_sweep(csv_path)
    models = sorted({r["model"] for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    n_saturated = 0
    for model in models:
        mrows = sorted((r for r in rows if r["model"] == model), key=lambda r: r["x"])
        xs = np.array([r["x"] for r in mrows])
        ys = np.array([r["peak_bytes"] for r in mrows])
        finite = np.isfinite(ys)
        ax.plot(xs[finite], ys[finite], marker="o", label=model)
        if (~finite).any():
            n_saturated += int((~finite).sum())
            first_bad = xs[~finite][0]
            last_y = ys[finite][-1] if finite.any() else 1.0
            ax.plot([first_bad], [last_y], marker="x", markersize=10, linestyle="none",
                    color=ax.lines[-1].get_color())
    ax.set_yscale("log")
    ax.set_xlabel("agents or chunk size")
    ax.set_ylabel("peak model bytes")
    ax.legend(loc="upper left")
    if has_loss:
        ax2 = ax.twinx()
        for model in models:
            mrows = sorted((r for r in rows if r["model"] == model), key=lambda r: r["x"])
            ax2.plot(
                [r["x"] for r in mrows],
                [r["loss"] for r in mrows],
                linestyle="--",
                marker="s",
                color="tab:gray",
                label=f"{model} loss",
            )
        ax2.set_ylabel("training loss")
        ax2.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    return fig, len(models), n_saturated


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--csv", required=True)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        _, n_series, n_sat = plot_scaling(args.csv, args.out)
    except PlotInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"wrote {args.out} ({n_series} series, {n_sat} saturation marker(s))")
    return 0


if __name__ == "__main__":
    sys.exit(main())
