"""CSV + SVG emission for benchmark and tracking curves."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_csv(path, header, rows) -> None:
    """Write rows with ``repr`` floats so values round-trip exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "metface"  # stable element ids
    return plt


def plot_cumulative(curves: dict, out, title="Cumulative error") -> None:
    """``curves`` maps a label to ``(thresholds_mm, fraction)``; writes
    ``<out>.csv`` (one column per label) and ``<out>.svg``."""
    out = Path(out)
    labels = sorted(curves)
    if not labels:
        raise ValueError("nothing to plot")
    thr = np.asarray(curves[labels[0]][0], float)
    for k in labels:
        if not np.array_equal(np.asarray(curves[k][0], float), thr):
            raise ValueError("curves use different thresholds")
    write_csv(out.with_suffix(".csv"), ["threshold_mm"] + labels,
              zip(thr, *[np.asarray(curves[k][1], float) for k in labels]))
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 4))
    for k in labels:
        ax.plot(thr, curves[k][1], label=k)
    ax.set_xlabel("error [mm]")
    ax.set_ylabel("fraction of points")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out.with_suffix(".svg"), metadata={"Date": None})
    plt.close(fig)


def plot_tracking(photo, depth, out) -> None:
    """Per-frame photometric (0-255) and depth (mm) RMSE curves."""
    out = Path(out)
    photo = np.asarray(photo, float)
    depth_mm = np.asarray(depth, float) * 1000.0
    write_csv(out.with_suffix(".csv"), ["frame", "photometric_rmse", "depth_rmse_mm"],
              zip(range(len(photo)), photo, depth_mm))
    plt = _figure()
    fig, (a0, a1) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    a0.plot(photo, marker=".")
    a0.set_ylabel("photometric RMSE")
    a1.plot(depth_mm, marker=".", color="C1")
    a1.set_ylabel("depth RMSE [mm]")
    a1.set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(out.with_suffix(".svg"), metadata={"Date": None})
    plt.close(fig)
