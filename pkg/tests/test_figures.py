"""Figure/CSV rendering: files appear, contents are flat and deterministic."""

import csv

import pytest

from tirg.figures import (plot_identity_trajectory, plot_recall_bars,
                          plot_training_curves, write_log_csv,
                          write_report_csv, write_sweep_csv)
from tirg.retrieval_eval import EvalReport

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def fake_log(with_contribution=True):
    records = []
    for i, (loss_value, r1) in enumerate([(0.9, 1.0), (0.7, 3.0), (0.5, 6.0)]):
        records.append({
            "iter": i * 100,
            "loss": loss_value,
            "r1": r1,
            "identity_contribution": (0.95 - 0.1 * i) if with_contribution else None,
        })
    return records


def fake_report():
    return EvalReport(recall={1: 6.0, 5: 19.0, 10: 31.0}, query_count=100,
                      by_kind={"add": 7.0, "remove": 5.0}, fingerprint="x")


def read_rows(path):
    with path.open(newline="") as handle:
        return list(csv.reader(handle))


def test_log_csv_contents(tmp_path):
    path = write_log_csv(fake_log(), tmp_path / "log.csv")
    rows = read_rows(path)
    assert rows[0] == ["iter", "loss", "r1", "identity_contribution"]
    assert rows[1] == ["0", "0.9", "1.0", "0.95"]
    assert len(rows) == 4


def test_log_csv_blank_for_missing_contribution(tmp_path):
    path = write_log_csv(fake_log(with_contribution=False), tmp_path / "log.csv")
    assert read_rows(path)[1][3] == ""


def test_training_curves_png(tmp_path):
    path = plot_training_curves({"run": fake_log()}, tmp_path / "curves.png")
    assert path.read_bytes().startswith(PNG_MAGIC)


def test_training_curves_rejects_empty():
    with pytest.raises(ValueError, match="no logs"):
        plot_training_curves({}, "nowhere.png")


def test_training_curves_deterministic(tmp_path):
    logs = {"a": fake_log(), "b": fake_log(with_contribution=False)}
    first = plot_training_curves(logs, tmp_path / "one.png").read_bytes()
    second = plot_training_curves(logs, tmp_path / "two.png").read_bytes()
    assert first == second


def test_identity_trajectory_png(tmp_path):
    path = plot_identity_trajectory({"run": fake_log()}, tmp_path / "id.png")
    assert path.read_bytes().startswith(PNG_MAGIC)


def test_identity_trajectory_requires_values(tmp_path):
    with pytest.raises(ValueError, match="tirg strategy only"):
        plot_identity_trajectory({"run": fake_log(with_contribution=False)},
                                 tmp_path / "id.png")


def test_report_csv_long_form(tmp_path):
    path = write_report_csv({"tirg": fake_report()}, tmp_path / "report.csv")
    rows = read_rows(path)
    assert rows[0] == ["label", "metric", "value"]
    assert ["tirg", "R@1", "6.0"] in rows
    assert ["tirg", "add R@1", "7.0"] in rows
    assert len(rows) == 1 + 3 + 2


def test_recall_bars_png(tmp_path):
    reports = {"tirg": fake_report(), "concat": fake_report()}
    path = plot_recall_bars(reports, tmp_path / "recall.png")
    assert path.read_bytes().startswith(PNG_MAGIC)


def test_recall_bars_rejects_empty():
    with pytest.raises(ValueError, match="no reports"):
        plot_recall_bars({}, "nowhere.png")


def test_sweep_csv(tmp_path):
    path = write_sweep_csv({"seed 0": 6.0, "seed 1": None}, tmp_path / "s.csv")
    rows = read_rows(path)
    assert rows == [["run", "final_r1"], ["seed 0", "6.0"], ["seed 1", ""]]
