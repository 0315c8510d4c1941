import hashlib
import warnings
from pathlib import Path

import pytest

from specpv.harness.bench import RunConfig, RunReport, load_report
import matplotlib.pyplot as plt

from specpv.harness.plots import _series, chart_figure, emit_plots

DATA = Path(__file__).parent / "data"
NAMES = ["speedup_measured_vs_context.svg", "speedup_modeled_vs_context.svg", "tau_vs_context.svg"]


def _sha(p):
    return hashlib.sha256(Path(p).read_bytes()).hexdigest()


def test_golden_files(tmp_path):
    rep = load_report(DATA / "fixture_report.json")
    files = emit_plots(rep, tmp_path)
    assert [f.name for f in files] == NAMES
    for name in NAMES:
        assert _sha(tmp_path / name) == _sha(DATA / "golden" / name), name


def test_repeat_runs_identical(tmp_path):
    rep = load_report(DATA / "fixture_report.json")
    emit_plots(rep, tmp_path / "a")
    emit_plots(rep, tmp_path / "b")
    for name in NAMES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        text = (tmp_path / "a" / name).read_text()
        assert text.startswith("<?xml") and "<dc:date>" not in text


def test_empty_sweep_warns(tmp_path):
    rep = RunReport(config=RunConfig(), cells=[])
    with pytest.warns(UserWarning, match="no plots"):
        assert emit_plots(rep, tmp_path / "out") == []
    assert not (tmp_path / "out").exists()


def test_single_point_sweep(tmp_path):
    rep = load_report(DATA / "fixture_report.json")
    one = rep.model_copy(update={"cells": [c for c in rep.cells if c.context_len == 100]})
    assert len(emit_plots(one, tmp_path)) == 3
    fig = chart_figure(_series(one, "tau"), "tau", "t")
    try:
        lines = fig.axes[0].lines
        assert len(lines) == 2
        for line in lines:
            assert len(line.get_xdata()) == 1 and line.get_marker() == "o"
    finally:
        plt.close(fig)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(OSError):
            emit_plots(load_report(DATA / "fixture_report.json"), blocker / "sub")
