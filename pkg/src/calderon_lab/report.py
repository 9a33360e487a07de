"""Experiment reports and their canonical CSV / JSON / SVG emission."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

FLOAT_FMT = "{:.12e}"
FORMATS = ("csv", "json", "svg")


class UnsupportedFormatError(ValueError):
    pass


@dataclass
class Table:
    columns: list
    rows: list = field(default_factory=list)

    def sorted_rows(self) -> list:
        """Rows ordered by their sweep key (the leading numeric columns)."""

        def key(r):
            return tuple((0, v) if isinstance(v, (int, float)) and not isinstance(v, bool) else (1, str(v)) for v in r)

        return sorted(self.rows, key=key)


@dataclass
class Plot:
    table: str
    x: str
    y: list
    logx: bool = False
    logy: bool = False
    title: str = ""
    kind: str = "line"  # "line" or "scatter"


@dataclass
class Report:
    kind: str
    tables: dict = field(default_factory=dict)  # name -> Table
    scalars: dict = field(default_factory=dict)
    plots: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)  # extra files written by the pipeline

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "scalars": _canonical(self.scalars),
            "tables": {k: {"columns": list(t.columns), "rows": _canonical(t.sorted_rows())} for k, t in sorted(self.tables.items())},
            "plots": [vars(p) for p in self.plots],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        tables = {k: Table(list(v["columns"]), [list(r) for r in v["rows"]]) for k, v in d.get("tables", {}).items()}
        plots = [Plot(**p) for p in d.get("plots", [])]
        return cls(d["kind"], tables, dict(d.get("scalars", {})), plots)


def _canonical(obj):
    """Plain JSON types with floats rounded through the fixed CSV format."""
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return str(v)
        return float(FLOAT_FMT.format(v))
    if isinstance(obj, (complex, np.complexfloating)):
        return [_canonical(obj.real), _canonical(obj.imag)]
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    return obj


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT.format(float(v))
    return str(v)


def write_csv(table: Table, path: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(table.columns) + "\n")
        for r in table.sorted_rows():
            fh.write(",".join(format_cell(v) for v in r) + "\n")


def write_json(obj, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(_canonical(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_svg(report: Report, plot: Plot, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "calderon-lab"
    t = report.tables[plot.table]
    rows = t.sorted_rows()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if rows:
        ix = t.columns.index(plot.x)
        xs = np.array([r[ix] for r in rows], dtype=float)
        for name in plot.y:
            ys = np.array([r[t.columns.index(name)] for r in rows], dtype=float)
            if plot.kind == "scatter":
                ax.scatter(xs, ys, s=6, label=name)
            else:
                ax.plot(xs, ys, marker="o", label=name)
        ax.legend()
    if plot.logx:
        ax.set_xscale("log")
    if plot.logy:
        ax.set_yscale("log")
    ax.set_xlabel(plot.x)
    ax.set_title(plot.title or plot.table)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def file_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def emit_report(report: Report, formats=("csv", "json"), out_dir: str = ".") -> list[str]:
    """Write the report in each requested format; returns the written paths.

    CSV gives one file per table, JSON one file for the whole report, and
    SVG one file per plot.
    """
    for f in formats:
        if f not in FORMATS:
            raise UnsupportedFormatError(f"unsupported format {f!r}; choose from {FORMATS}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        for name, t in sorted(report.tables.items()):
            p = os.path.join(out_dir, f"{name}.csv")
            write_csv(t, p)
            written.append(p)
    if "json" in formats:
        p = os.path.join(out_dir, "report.json")
        write_json(report.to_dict(), p)
        written.append(p)
    if "svg" in formats:
        for i, plot in enumerate(report.plots):
            p = os.path.join(out_dir, f"{plot.table}_{i}.svg")
            write_svg(report, plot, p)
            written.append(p)
    return written


def load_report(path: str) -> Report:
    with open(path) as fh:
        return Report.from_dict(json.load(fh))
