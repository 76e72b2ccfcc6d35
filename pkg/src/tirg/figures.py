"""Figure and CSV rendering for training logs and retrieval reports.

Everything here is presentation: the functions take in-memory run artifacts
(JSON-lines training logs, EvalReports) and write PNG figures plus flat CSV
files next to the machine-readable outputs. The Agg backend is forced so
rendering works headless.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .retrieval_eval import EvalReport  # noqa: E402

LogRecord = Mapping[str, object]
PathLike = Union[str, Path]

_DPI = 120


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def _series(log: Sequence[LogRecord], key: str):
    """(iterations, values) for records where ``key`` is present and not None."""
    pairs = [(r["iter"], r[key]) for r in log if r.get(key) is not None]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def write_log_csv(log: Sequence[LogRecord], path: PathLike) -> Path:
    """Training log as CSV: iter, loss, r1, identity_contribution."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iter", "loss", "r1", "identity_contribution"])
        for record in log:
            contribution = record.get("identity_contribution")
            writer.writerow([record["iter"], record["loss"], record["r1"],
                             "" if contribution is None else contribution])
    return path


def plot_training_curves(logs: Mapping[str, Sequence[LogRecord]],
                         path: PathLike) -> Path:
    """Loss and held-out R@1 against iteration, one line per labeled run."""
    if not logs:
        raise ValueError("no logs to plot")
    fig, (ax_loss, ax_r1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for label, log in logs.items():
        iters, losses = _series(log, "loss")
        ax_loss.plot(iters, losses, marker=".", label=label)
        iters, r1s = _series(log, "r1")
        ax_r1.plot(iters, r1s, marker=".", label=label)
    ax_loss.set_ylabel("training loss")
    ax_r1.set_ylabel("held-out R@1 (%)")
    ax_r1.set_xlabel("iteration")
    for ax in (ax_loss, ax_r1):
        ax.grid(True, alpha=0.3)
    if len(logs) > 1:
        ax_loss.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_identity_trajectory(logs: Mapping[str, Sequence[LogRecord]],
                             path: PathLike) -> Path:
    """Gated-path share of the composed feature against iteration.

    Raises ValueError when no log carries identity-contribution values (the
    diagnostic exists for the tirg strategy only).
    """
    series = {}
    for label, log in logs.items():
        iters, values = _series(log, "identity_contribution")
        if iters:
            series[label] = (iters, values)
    if not series:
        raise ValueError("no identity-contribution values in the logs; "
                         "the diagnostic applies to the tirg strategy only")
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, (iters, values) in series.items():
        ax.plot(iters, values, marker=".", label=label)
    ax.axhline(0.5, color="gray", linestyle="--", linewidth=1, alpha=0.6)
    ax.set_xlabel("iteration")
    ax.set_ylabel("gated-path share")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def write_report_csv(reports: Mapping[str, EvalReport], path: PathLike) -> Path:
    """Reports in long form: label, metric, value (R@K rows then per-kind R@1)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["label", "metric", "value"])
        for label, report in reports.items():
            for k in sorted(report.recall):
                writer.writerow([label, f"R@{k}", report.recall[k]])
            for kind in sorted(report.by_kind):
                writer.writerow([label, f"{kind} R@1", report.by_kind[kind]])
    return path


def plot_recall_bars(reports: Mapping[str, EvalReport], path: PathLike) -> Path:
    """Grouped R@K bars, one group per cutoff, one bar per labeled report."""
    if not reports:
        raise ValueError("no reports to plot")
    ks = sorted({k for report in reports.values() for k in report.recall})
    labels = list(reports)
    width = 0.8 / len(labels)
    fig, ax = plt.subplots(figsize=(7, 4))
    for offset, label in enumerate(labels):
        recall = reports[label].recall
        xs = [i + offset * width for i in range(len(ks))]
        heights = [recall.get(k, 0.0) for k in ks]
        ax.bar(xs, heights, width=width, label=label)
    ax.set_xticks([i + width * (len(labels) - 1) / 2 for i in range(len(ks))])
    ax.set_xticklabels([f"R@{k}" for k in ks])
    ax.set_ylabel("recall (%)")
    ax.set_ylim(0, 100)
    ax.grid(True, axis="y", alpha=0.3)
    if len(labels) > 1:
        ax.legend(fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def write_sweep_csv(finals: Mapping[str, Optional[float]], path: PathLike) -> Path:
    """Per-seed final held-out R@1 values from a multi-seed sweep."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["run", "final_r1"])
        for label, value in finals.items():
            writer.writerow([label, "" if value is None else value])
    return path
