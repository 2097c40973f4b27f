from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowcal.config import RunConfig, parse_run_config
from lowcal.experiments import CSV_HEADER, EXPERIMENTS, ReportRow, parse_csv, read_csv, run_experiment, write_csv
from lowcal.pipeline import CalibrationMetrics
from lowcal.plotting import plot_report

TINY = parse_run_config(
    """
    epochs = 1
    steps_per_epoch = 1
    train_scenes = 2
    val_scenes = 1
    eval_per_scene = 1
    """
)

finite = st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.text("abc+@/0123456789,\" ", max_size=8), st.lists(finite, min_size=6, max_size=6)), max_size=5))
def test_csv_round_trip_is_exact(entries):
    rows = [ReportRow("k", p, CalibrationMetrics(*v)) for p, v in entries]
    text = write_csv(rows)
    back = parse_csv(text)
    assert [(r.param, r.metrics) for r in back] == [(r.param, r.metrics) for r in rows]
    assert write_csv(back) == text


def test_csv_layout(tmp_path):
    row = ReportRow("eval", "10/1", CalibrationMetrics(0.23, 0.45, 0.30, 0.14, 0.13, 0.17))
    text = write_csv([row], tmp_path / "r.csv")
    lines = text.split("\n")
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1].startswith("eval,10/1,0.23,0.45,0.3,0.14,0.13,0.17,")
    assert text.endswith("\n") and "\r" not in text
    assert (tmp_path / "r.csv").read_bytes() == text.encode()
    assert read_csv(tmp_path / "r.csv")[0].metrics == row.metrics


def test_csv_rejects_foreign_header():
    with pytest.raises(ValueError, match="header"):
        parse_csv("a,b\n1,2\n")


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown experiment kind"):
        run_experiment("bogus", TINY)


@pytest.mark.parametrize(
    "kind, grid, params",
    [
        ("degradation", "", ["64", "32"]),
        ("interp_compare", "", ["none", "linear", "avg", "max", "nearest"]),
        ("scl_ablation", "10/1", ["max@10/1", "max+scl@10/1"]),
        ("subsample", "2,8", ["2", "8"]),
    ],
)
def test_grid_cells(kind, grid, params):
    seen = []
    rows = run_experiment(kind, replace(TINY, grid=grid), on_row=seen.append)
    assert [r.param for r in rows] == params
    assert seen == rows
    assert all(r.kind == kind for r in rows)
    assert all(np.all(np.isfinite(r.metrics.as_row())) for r in rows)


def test_default_scl_grid_has_two_ranges():
    cells = [name for name, _ in EXPERIMENTS["scl_ablation"](RunConfig())]
    assert cells == ["max@20/2", "max+scl@20/2", "max@10/1", "max+scl@10/1"]


def test_plot_written_next_to_csv(tmp_path):
    rows = [ReportRow("x", str(i), CalibrationMetrics(*np.arange(6.0) + i)) for i in range(3)]
    out = plot_report(rows, tmp_path / "r.png", title="x")
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
