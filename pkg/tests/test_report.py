import json
import os

import numpy as np
import pytest

from calderon_lab.report import (
    Plot,
    Report,
    Table,
    UnsupportedFormatError,
    emit_report,
    file_hash,
    format_cell,
    load_report,
)


def _report():
    t = Table(["tau", "ratio", "ok"], [[32, 0.25, True], [16, 0.5, False], [8, np.float64(1.0) / 3, True]])
    return Report("cgo-decay", {"decay": t}, {"slope": -1.25, "z": 1 + 2j}, [Plot("decay", "tau", ["ratio"], logx=True)])


def test_format_cell():
    assert format_cell(1.0 / 3) == "3.333333333333e-01"
    assert format_cell(np.int64(7)) == "7"
    assert format_cell(True) == "1"
    assert format_cell("a") == "a"


def test_csv_rows_are_sorted_and_fixed_format(tmp_path):
    paths = emit_report(_report(), ("csv",), str(tmp_path))
    lines = open(paths[0]).read().splitlines()
    assert lines[0] == "tau,ratio,ok"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["8", "16", "32"]
    assert lines[1] == "8,3.333333333333e-01,1"


def test_json_round_trip(tmp_path):
    rep = _report()
    emit_report(rep, ("json",), str(tmp_path))
    back = load_report(os.path.join(tmp_path, "report.json"))
    assert back.kind == rep.kind
    assert back.tables["decay"].rows[0] == [8, 3.333333333333e-01, True]
    assert back.scalars["z"] == [1.0, 2.0]
    assert back.plots[0].logx


def test_empty_report(tmp_path):
    paths = emit_report(Report("forward"), ("csv", "json", "svg"), str(tmp_path))
    assert [os.path.basename(p) for p in paths] == ["report.json"]
    assert json.load(open(paths[0]))["tables"] == {}


def test_unsupported_format(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        emit_report(_report(), ("pdf",), str(tmp_path))


def test_emission_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    pa = emit_report(_report(), ("csv", "json", "svg"), str(a))
    pb = emit_report(_report(), ("csv", "json", "svg"), str(b))
    assert [file_hash(p) for p in pa] == [file_hash(p) for p in pb]
