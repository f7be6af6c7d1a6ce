"""Run reports on disk: an append-style CSV plus rendered training curves.

The CSV column set is fixed (see RunReport.COLUMNS); absent quantities are
written as empty fields. Figures land next to the delimited output so a run
directory is self-describing.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .trainer import EpochRecord, RunReport


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_report(report: RunReport, path) -> None:
    """Write one CSV row per epoch with the fixed column set."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RunReport.COLUMNS)
        for record in report.records:
            writer.writerow([_format(getattr(record, col)) for col in RunReport.COLUMNS])


def read_run_report(path) -> RunReport:
    """Parse a run-report CSV back into records."""
    report = RunReport()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            report.append(
                EpochRecord(
                    epoch=int(row["epoch"]),
                    stage=row["stage"],
                    **{
                        key: (float(row[key]) if row[key] else None)
                        for key in (
                            "total_loss",
                            "ce_loss",
                            "contrastive_loss",
                            "recon_loss",
                            "train_acc",
                            "eval_acc",
                            "wall_time_s",
                        )
                    },
                    skipped_anchors=int(row["skipped_anchors"]) if row["skipped_anchors"] else None,
                )
            )
    return report


def render_run_curves(report: RunReport, path) -> None:
    """Loss and accuracy curves for one run, saved as a PNG."""
    epochs = [r.epoch for r in report.records]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))

    for name, label in (
        ("total_loss", "total"),
        ("ce_loss", "cross-entropy"),
        ("contrastive_loss", "contrastive"),
        ("recon_loss", "reconstruction"),
    ):
        series = [(r.epoch, getattr(r, name)) for r in report.records if getattr(r, name) is not None]
        if series:
            ax_loss.plot([e for e, _ in series], [v for _, v in series], label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)

    plotted = False
    for name, label in (("train_acc", "train"), ("eval_acc", "eval")):
        series = [(r.epoch, getattr(r, name)) for r in report.records if getattr(r, name) is not None]
        if series:
            ax_acc.plot([e for e, _ in series], [v for _, v in series], marker=".", label=label)
            plotted = True
    if plotted:
        ax_acc.set_ylim(0, 1)
        ax_acc.legend(fontsize=8)
    else:
        ax_acc.set_visible(False)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")

    fig.suptitle(f"{report.records[0].stage if report.records else 'run'} over {len(epochs)} epochs")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_run_outputs(report: RunReport, out_dir) -> tuple[Path, Path]:
    """Standard run artifacts: run_report.csv and run_curves.png."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "run_report.csv"
    png_path = out_dir / "run_curves.png"
    write_run_report(report, csv_path)
    render_run_curves(report, png_path)
    return csv_path, png_path


def write_sweep_summary(rows: list[dict], path) -> None:
    """Sweep results, one row per grid cell: parameter, value, final accuracy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["parameter", "value", "eval_acc", "train_acc", "total_loss"])
        for row in rows:
            writer.writerow(
                [
                    row["parameter"],
                    _format(row["value"]),
                    _format(row.get("eval_acc")),
                    _format(row.get("train_acc")),
                    _format(row.get("total_loss")),
                ]
            )


def render_sweep_figures(rows: list[dict], out_dir) -> list[Path]:
    """One sensitivity figure per swept parameter (accuracy vs value)."""
    out_dir = Path(out_dir)
    paths = []
    parameters = sorted({row["parameter"] for row in rows})
    for parameter in parameters:
        cells = [r for r in rows if r["parameter"] == parameter and r.get("eval_acc") is not None]
        if not cells:
            continue
        cells.sort(key=lambda r: r["value"])
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.plot([c["value"] for c in cells], [c["eval_acc"] for c in cells], marker="o")
        if parameter in ("temperature", "loss_weight"):
            ax.set_xscale("log")
        ax.set_xlabel(parameter)
        ax.set_ylabel("eval accuracy")
        fig.tight_layout()
        path = out_dir / f"sweep_{parameter}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
