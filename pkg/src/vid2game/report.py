"""Report serialization: JSON, delimited CSV, and rendered figures.

Every evaluation report is written three ways side by side: a JSON document
matching REPORT_SCHEMA, a CSV with one row per frame, and a PNG chart of the
per-frame curves.  Training loops reuse the curve renderer for loss logs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from vid2game.metrics import MetricReport  # noqa: E402

REPORT_SCHEMA = {
    "type": "object",
    "required": ["metadata", "metrics"],
    "properties": {
        "metadata": {"type": "object"},
        "metrics": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["per_frame", "mean", "std"],
                "properties": {
                    "per_frame": {"type": "array", "items": {"type": "number"}},
                    "mean": {"type": "number"},
                    "std": {"type": "number"},
                },
            },
        },
    },
}


def save_report_json(report: MetricReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2))
    return path


def save_report_csv(report: MetricReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(report.metrics)
    rows = zip(*(report.metrics[name].per_frame for name in names))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame"] + names)
        for i, row in enumerate(rows):
            writer.writerow([i] + [f"{v:.8g}" for v in row])
    return path


def render_report_figure(report: MetricReport, path) -> Path:
    """Per-frame metric curves with mean lines, one subplot per metric."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(report.metrics)
    fig, axes = plt.subplots(len(names), 1, figsize=(7, 2.4 * len(names)), squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        series = report.metrics[name]
        ax.plot(series.per_frame, lw=1.0)
        ax.axhline(series.mean, color="tab:red", ls="--", lw=0.8,
                   label=f"mean {series.mean:.4g} ± {series.std:.3g}")
        ax.set_ylabel(name)
        ax.legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_loss_curves(step_losses: list[dict], path, keys=("loss_g", "loss_d")) -> Path | None:
    """Training-loss curves over steps; skips silently on an empty log."""
    if not step_losses:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    steps = [e["step"] for e in step_losses]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for key in keys:
        if any(key in e for e in step_losses):
            ax.plot(steps, [e.get(key, float("nan")) for e in step_losses], lw=0.9, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_trajectory_figure(commanded, realized, path) -> Path:
    """Commanded vs realized 2D center-of-mass paths for a rollout."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([p[0] for p in commanded], [p[1] for p in commanded], label="commanded", lw=1.2)
    ax.plot([p[0] for p in realized], [p[1] for p in realized], label="realized", lw=1.2)
    ax.invert_yaxis()  # image coordinates: y grows downward
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
