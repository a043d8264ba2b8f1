"""Metric tables and diagnostic figures.

Every evaluation product funnels through one delimited table with the
columns (metric, threshold, lead_time, member, value); fields that do not
apply to a given metric are left empty, and undefined scores are written
as nan so a row is never silently dropped. Figures are rendered headless
to files next to the table.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError

CSV_COLUMNS = ("metric", "threshold", "lead_time", "member", "value")


@dataclass(frozen=True)
class MetricRow:
    metric: str
    value: float | None
    threshold: float | None = None
    lead_time: int | None = None
    member: str | None = None

    def as_record(self) -> dict:
        def cell(x):
            return "" if x is None else x

        value = "nan" if self.value is None or (
            isinstance(self.value, float) and math.isnan(self.value)
        ) else f"{self.value:.12g}"
        return {
            "metric": self.metric,
            "threshold": "" if self.threshold is None else f"{self.threshold:g}",
            "lead_time": cell(self.lead_time),
            "member": cell(self.member),
            "value": value,
        }


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.as_record())


def read_metrics_csv(path) -> list:
    """Rows back as dicts; numeric fields parsed, blanks back to None."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(CSV_COLUMNS):
            raise ValidationError(f"unexpected metric table header: {reader.fieldnames}")
        for rec in reader:
            out.append(
                {
                    "metric": rec["metric"],
                    "threshold": float(rec["threshold"]) if rec["threshold"] else None,
                    "lead_time": int(rec["lead_time"]) if rec["lead_time"] else None,
                    "member": rec["member"] or None,
                    "value": float(rec["value"]),
                }
            )
    return out


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_rank_histogram(histogram, path) -> None:
    """Bar chart of rank frequencies with the uniform reference line."""
    freq = histogram.frequencies()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(freq.size), freq, color="#4878cf", edgecolor="black", linewidth=0.5)
    ax.axhline(1.0 / freq.size, color="crimson", linestyle="--", linewidth=1.2,
               label="uniform")
    ax.set_xlabel("observation rank")
    ax.set_ylabel("frequency")
    ax.set_title(f"Rank histogram ({histogram.n_members} members, n={histogram.total})")
    ax.legend()
    _finish(fig, path)


def plot_cdf_curves(curves: dict, bins, path) -> None:
    """Overlaid cumulative frequency curves on shared precipitation bins."""
    if not curves:
        raise ValidationError("no curves to plot")
    edges = np.asarray(bins, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, curve in curves.items():
        ax.plot(edges, np.asarray(curve), marker="o", markersize=3, label=label)
    if np.all(edges > 0):
        ax.set_xscale("log")
    ax.set_xlabel("precipitation (mm)")
    ax.set_ylabel("cumulative frequency")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Precipitation CDF")
    ax.legend()
    _finish(fig, path)


def plot_scores_by_threshold(score_rows, path) -> None:
    """CSI / POD / FAR against threshold; undefined scores leave gaps."""
    series = {}
    for row in score_rows:
        if row.threshold is None:
            continue
        series.setdefault(row.metric, []).append((row.threshold, row.value))
    if not series:
        raise ValidationError("no threshold scores to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric in sorted(series):
        pts = sorted(series[metric])
        xs = [p[0] for p in pts]
        ys = [math.nan if p[1] is None else p[1] for p in pts]
        ax.plot(xs, ys, marker="o", markersize=4, label=metric)
    ax.set_xlabel("threshold (mm)")
    ax.set_ylabel("score")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("Scores by threshold")
    ax.legend()
    _finish(fig, path)


def plot_member_panels(stack: np.ndarray, path, labels=None, vmax=None) -> None:
    """Small-multiple maps of member rain fields on one color scale."""
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ValidationError("member panel input must be (N, H, W)")
    n = stack.shape[0]
    if labels is None:
        labels = [f"member {i}" for i in range(n)]
    if len(labels) != n:
        raise ValidationError("one label per panel required")
    ncols = min(4, n)
    nrows = (n + ncols - 1) // ncols
    if vmax is None:
        vmax = float(np.percentile(stack, 99.5)) or 1.0
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(3.2 * ncols, 2.6 * nrows), squeeze=False
    )
    im = None
    for i in range(nrows * ncols):
        ax = axes[i // ncols][i % ncols]
        if i < n:
            im = ax.imshow(stack[i], origin="lower", cmap="viridis", vmin=0.0, vmax=vmax)
            ax.set_title(labels[i], fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    if im is not None:
        fig.colorbar(im, ax=axes, shrink=0.85, label="mm")
    fig.savefig(path, dpi=110)
    plt.close(fig)
