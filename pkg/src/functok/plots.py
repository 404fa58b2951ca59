"""Deterministic SVG plots of report CSVs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DomainError  # noqa: E402
from .reports import csv_columns, read_csv  # noqa: E402

KINDS = ("loglog_degree", "loss_curves", "coverage", "burstiness", "feature_growth")

_REQUIRED = {
    "loglog_degree": ("rank",),
    "loss_curves": ("step", "loss_FF", "loss_FC", "loss_CF", "loss_CC"),
    "coverage": ("k", "fraction"),
    "burstiness": ("bin", "count"),
    "feature_growth": ("checkpoint_step", "unique_features"),
}


@dataclass
class PlotResult:
    path: Path
    series: dict[str, list[tuple[float, float]]] = field(default_factory=dict)


def _num(s: str) -> float:
    return float(s) if s not in ("", None) else math.nan


def _check_schema(kind: str, columns: list[str]) -> None:
    if kind not in KINDS:
        raise DomainError(f"unknown plot kind {kind!r}; expected one of {', '.join(KINDS)}")
    if not columns:
        return
    missing = [c for c in _REQUIRED[kind] if c not in columns]
    if kind == "loglog_degree" and not any(c.startswith(("degree", "count")) for c in columns):
        missing.append("degree*|count")
    if missing:
        raise DomainError(f"{kind} plot needs columns {missing}; file has {columns}")


def _series(kind: str, rows: list[dict], columns: list[str]) -> tuple[dict, dict]:
    """(series, axis settings) for one plot kind."""
    s: dict[str, list[tuple[float, float]]] = {}
    if kind == "loglog_degree":
        for col in [c for c in columns if c.startswith(("degree", "count"))]:
            pts = [(_num(r["rank"]), _num(r[col])) for r in rows]
            s[col] = [(x, y) for x, y in pts if x > 0 and y > 0]
        return s, {"xscale": "log", "yscale": "log", "xlabel": "frequency rank", "ylabel": "degree"}
    if kind == "loss_curves":
        for g in ("FF", "FC", "CF", "CC"):
            s[g] = [(_num(r["step"]), _num(r[f"loss_{g}"])) for r in rows if r[f"loss_{g}"] != ""]
        return s, {"xlabel": "step", "ylabel": "next-token loss"}
    if kind == "coverage":
        s["coverage"] = [(_num(r["k"]), _num(r["fraction"])) for r in rows]
        return s, {"xscale": "log", "xlabel": "top-k tokens", "ylabel": "cumulative feature coverage"}
    if kind == "burstiness":
        s["count"] = [(_num(r["bin"]), _num(r["count"])) for r in rows]
        return s, {"xlabel": "document bin", "ylabel": "occurrences", "bar": True}
    s["unique_features"] = [(_num(r["checkpoint_step"]), _num(r["unique_features"])) for r in rows]
    return s, {"xlabel": "checkpoint step", "ylabel": "unique features"}


def emit_plot(csv_path: str | Path, kind: str, out_path: str | Path, title: str | None = None) -> PlotResult:
    csv_path, out_path = Path(csv_path), Path(out_path)
    if not csv_path.exists():
        raise DomainError(f"report not found: {csv_path}")
    columns = csv_columns(csv_path)
    _check_schema(kind, columns)
    rows = read_csv(csv_path)[1] if columns else []
    series, axis = _series(kind, rows, columns) if columns else ({}, {})
    with plt.rc_context({"svg.hashsalt": "functok", "svg.fonttype": "none", "path.simplify": False}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, pts in series.items():
            if not pts:
                continue
            xs, ys = zip(*pts)
            if axis.get("bar"):
                ax.bar(xs, ys, label=name)
            else:
                ax.plot(xs, ys, label=name, marker="." if kind == "loglog_degree" else None,
                        linestyle="none" if kind == "loglog_degree" else "-")
        if any(series.values()):
            ax.set_xscale(axis.get("xscale", "linear"))
            ax.set_yscale(axis.get("yscale", "linear"))
            if len(series) > 1:
                ax.legend()
        ax.set_xlabel(axis.get("xlabel", ""))
        ax.set_ylabel(axis.get("ylabel", ""))
        ax.set_title(title or kind.replace("_", " "))
        fig.tight_layout()
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return PlotResult(out_path, series)
