"""Report aggregation: metrics tables as CSV plus rendered figures.

Takes per-subset metrics JSON files (as written by the evaluation
command), tabulates them into one CSV with a row per subset, and
renders bar charts of AUPRC / FPR95 alongside. PR-curve CSVs can be
overlaid into a single precision-recall figure. All outputs are
deterministic for identical inputs.
"""

from __future__ import annotations

import csv
import json
import os
from typing import IO, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

REPORT_COLUMNS = (
    "subset",
    "auprc",
    "fpr95",
    "num_pos",
    "num_neg",
    "num_void",
    "clamped",
)

# step interpolation is used for every AP figure in these reports
AP_CONVENTION = "step"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def load_metrics_rows(paths: Sequence[str]) -> List[dict]:
    """One row per metrics JSON; subset tag = file stem; sorted by tag."""
    rows = []
    for path in paths:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        row = {"subset": os.path.splitext(os.path.basename(path))[0]}
        for key in REPORT_COLUMNS[1:]:
            row[key] = data.get(key)
        rows.append(row)
    rows.sort(key=lambda r: r["subset"])
    return rows


def write_report_csv(rows: Sequence[dict], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(col)) for col in REPORT_COLUMNS])


def render_metric_bars(rows: Sequence[dict], out_path: str) -> None:
    """Two-panel bar chart: AUPRC (higher better) and FPR95 (lower better)."""
    subsets = [r["subset"] for r in rows]
    auprcs = [r["auprc"] if r["auprc"] is not None else 0.0 for r in rows]
    fprs = [r["fpr95"] if r["fpr95"] is not None else 0.0 for r in rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(rows) + 4), 3.2))
    x = range(len(subsets))
    ax1.bar(x, auprcs, color="#3b6ea5")
    ax1.set_xticks(list(x))
    ax1.set_xticklabels(subsets, rotation=30, ha="right", fontsize=8)
    ax1.set_ylim(0, 1)
    ax1.set_ylabel("AUPRC")
    ax1.set_title("AUPRC by subset (higher is better)", fontsize=9)

    ax2.bar(x, fprs, color="#a5543b")
    ax2.set_xticks(list(x))
    ax2.set_xticklabels(subsets, rotation=30, ha="right", fontsize=8)
    ax2.set_ylim(0, 1)
    ax2.set_ylabel("FPR at 95% TPR")
    ax2.set_title("FPR95 by subset (lower is better)", fontsize=9)

    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_pr_overlay(
    curves: Sequence[Tuple[str, Sequence[float], Sequence[float]]],
    out_path: str,
) -> None:
    """Overlay (label, recall, precision) curves into one figure."""
    fig, ax = plt.subplots(figsize=(4.8, 4.0))
    for label, recall, precision in curves:
        ax.plot(recall, precision, drawstyle="steps-post", linewidth=1.2, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(f"precision-recall ({AP_CONVENTION} interpolation)", fontsize=9)
    ax.legend(fontsize=7, loc="lower left")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def read_pr_curve_csv(path: str) -> Tuple[List[float], List[float]]:
    """(recall, precision) columns from a PR-curve CSV export."""
    recall, precision = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            recall.append(float(row["recall"]))
            precision.append(float(row["precision"]))
    return recall, precision


def render_loss_traces(
    traces: Sequence[Tuple[str, Sequence[float]]], out_path: str
) -> None:
    """Training loss curves for the toy experiment variants."""
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    for label, trace in traces:
        ax.plot(range(len(trace)), trace, linewidth=1.0, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
