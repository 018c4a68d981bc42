"""Render run summaries: accuracy tables (text + CSV) and loss-curve figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import GROUP_ORDER, EvalReport, format_accuracy_table


def load_metrics(path):
    """Parse a JSON-lines metrics log into a list of row dicts."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            rows.append(json.loads(line))
    return rows


def epoch_rows(rows):
    return [r for r in rows if r.get("kind") == "epoch"]


def write_accuracy_csv(path, named_reports):
    """Delimited form of the accuracy table; absent groups stay empty-dashed."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "all", *GROUP_ORDER])
        for name, rep in named_reports:
            row = [name, f"{rep.overall_acc:.2f}"]
            for g in GROUP_ORDER:
                v = rep.group_acc.get(g)
                row.append("-" if v is None else f"{v:.2f}")
            writer.writerow(row)
    return Path(path)


def plot_loss_curves(metrics_rows, out_png, title=""):
    """Per-epoch loss components and test accuracy rendered to one figure."""
    rows = epoch_rows(metrics_rows)
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    if rows:
        epochs = [r["epoch"] for r in rows]
        ax_loss.plot(epochs, [r["total"] for r in rows], label="total")
        ax_loss.plot(epochs, [r["mce"] for r in rows], label="mce", alpha=0.8)
        ax_loss.plot(epochs, [r["msc"] for r in rows], label="msc", alpha=0.8)
        ax_loss.legend()
        accs = [(r["epoch"], r["test_accuracy"]) for r in rows if r.get("test_accuracy") is not None]
        if accs:
            ax_acc.plot([a[0] for a in accs], [a[1] for a in accs], color="tab:green")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("test accuracy (%)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
    return Path(out_png)


def render_report(runs, out_dir):
    """Write the comparison table (text + CSV) and one loss figure per run.

    runs is a list of dicts with keys: name, metrics_rows, report (EvalReport
    or None). Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    named = [(r["name"], r["report"]) for r in runs if r.get("report") is not None]
    table_path = out / "report.txt"
    if named:
        table_path.write_text(format_accuracy_table(named))
    else:
        table_path.write_text("no evaluation results recorded\n")
    written.append(table_path)
    if named:
        written.append(write_accuracy_csv(out / "report.csv", named))

    for r in runs:
        png = out / f"loss_{r['name']}.png"
        plot_loss_curves(r.get("metrics_rows", []), png, title=r["name"])
        written.append(png)
    return written
