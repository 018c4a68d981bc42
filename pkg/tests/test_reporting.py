import csv
import json

import numpy as np

from smcl.evaluation import report_from_confusion
from smcl.reporting import (
    epoch_rows,
    load_metrics,
    plot_loss_curves,
    render_report,
    write_accuracy_csv,
)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def sample_rows():
    rows = []
    for e in range(3):
        rows.append({"kind": "step", "epoch": e, "step": 0,
                     "mce": 1.0 - 0.1 * e, "msc": 0.5, "total": 1.15 - 0.1 * e,
                     "mean_area": 0.0})
        rows.append({"kind": "epoch", "epoch": e, "lr": 0.1,
                     "mce": 1.0 - 0.1 * e, "msc": 0.5, "total": 1.15 - 0.1 * e,
                     "mean_area": 0.0, "drw_active": False, "masking_phase": False,
                     "test_accuracy": 30.0 + e, "group_accuracy": {"many": 40.0}})
    return rows


def test_load_metrics_skips_blank_lines(tmp_path):
    p = tmp_path / "m.jsonl"
    rows = sample_rows()
    p.write_text("\n".join(json.dumps(r) for r in rows) + "\n\n")
    back = load_metrics(p)
    assert back == rows
    assert [r["epoch"] for r in epoch_rows(back)] == [0, 1, 2]


def test_write_accuracy_csv_round_trip(tmp_path):
    rep_full = report_from_confusion(np.array([[4, 1], [2, 3]]), [150, 10])
    rep_many = report_from_confusion(np.array([[4, 1], [2, 3]]), [150, 120])
    out = write_accuracy_csv(tmp_path / "t.csv", [("a", rep_full), ("b", rep_many)])
    with open(out) as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["run", "all", "many", "med", "few"]
    assert got[1][0] == "a"
    assert got[1][1] == "70.00"
    assert got[2] == ["b", "70.00", f"{rep_many.group_acc['many']:.2f}", "-", "-"]


def test_plot_loss_curves_writes_png(tmp_path):
    p = plot_loss_curves(sample_rows(), tmp_path / "loss.png", title="demo")
    data = p.read_bytes()
    assert data.startswith(PNG_MAGIC)
    assert len(data) > 1000
    # an empty log still renders an (empty) figure rather than crashing
    p2 = plot_loss_curves([], tmp_path / "empty.png")
    assert p2.read_bytes().startswith(PNG_MAGIC)


def test_render_report_full(tmp_path):
    rep = report_from_confusion(np.array([[4, 1], [2, 3]]), [150, 10])
    runs = [
        {"name": "smcl", "metrics_rows": sample_rows(), "report": rep},
        {"name": "erm", "metrics_rows": sample_rows(), "report": None},
    ]
    written = render_report(runs, tmp_path / "out")
    names = {p.name for p in written}
    assert names == {"report.txt", "report.csv", "loss_smcl.png", "loss_erm.png"}
    text = (tmp_path / "out/report.txt").read_text()
    assert "smcl" in text and "erm" not in text  # only evaluated runs tabled
    for p in written:
        assert p.exists()


def test_render_report_without_any_eval(tmp_path):
    runs = [{"name": "x", "metrics_rows": [], "report": None}]
    written = render_report(runs, tmp_path / "out")
    text = (tmp_path / "out/report.txt").read_text()
    assert "no evaluation results" in text
    assert not (tmp_path / "out/report.csv").exists()
    assert (tmp_path / "out/loss_x.png").exists()
