"""CSV emission of per-fold results and summary tables in the ablation-table layout."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import METRIC_NAMES

ROW_FIELDS = ("config_id", "repeat", "fold", *METRIC_NAMES, "tp", "fp", "tn", "fn", "seed")

# summary column -> per-fold metric; "Accuracy" is balanced accuracy
TABLE_COLUMNS = (
    ("AUROC", "auroc"),
    ("Accuracy", "balanced_accuracy"),
    ("F1 Score", "f1"),
    ("Sensitivity", "sensitivity"),
    ("Specificity", "specificity"),
    ("Precision", "precision"),
)
TABLE_HEADER = ("Experiment", *(c for c, _ in TABLE_COLUMNS))

LEDGER_FIELDS = ("round", "site", "phase", "upstream_params", "downstream_params", "features_sent")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: str | Path, rows: list[dict], fields) -> Path:
    """Deterministic CSV: fixed column order, full float precision, LF line endings."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def write_rows(path: str | Path, rows: list[dict]) -> Path:
    return write_csv(path, rows, ROW_FIELDS)


def read_rows(path: str | Path) -> list[dict]:
    ints = {"repeat", "fold", "tp", "fp", "tn", "fn", "seed"}
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({k: (v if k == "config_id" else int(v) if k in ints else float(v))
                        for k, v in r.items()})
    return out


@dataclass
class SummaryRow:
    experiment: str
    stats: dict[str, tuple[float, float]]
    n: int


def _mean_std(vals: list[float]) -> tuple[float, float]:
    a = np.array([v for v in vals if math.isfinite(v)], dtype=np.float64)
    if len(a) == 0:
        return math.nan, math.nan
    if len(a) == 1:
        return float(a[0]), math.nan
    return float(a.mean()), float(a.std(ddof=1))


def summarize(rows: list[dict]) -> list[SummaryRow]:
    """One row per config_id, sorted by mean AUROC descending (ties by name)."""
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r["config_id"], []).append(r)
    out = [SummaryRow(cid, {m: _mean_std([float(r[m]) for r in rs]) for m in METRIC_NAMES}, len(rs))
           for cid, rs in groups.items()]

    def key(s):
        m = s.stats["auroc"][0]
        return (-m if math.isfinite(m) else math.inf, s.experiment)
    return sorted(out, key=key)


def _cell(m: float, s: float) -> str:
    return f"{m:.3f} ± {s:.3f}"


def emit_table(summary: list[SummaryRow], fmt: str = "markdown") -> str:
    """Render the summary as a markdown table (column maxima in bold) or as CSV."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Experiment"] + [f"{c} {part}" for c, _ in TABLE_COLUMNS for part in ("mean", "std")])
        for s in summary:
            w.writerow([s.experiment] + [f"{v:.3f}" for _, m in TABLE_COLUMNS for v in s.stats[m]])
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    best = {}
    for _, m in TABLE_COLUMNS:
        means = [round(s.stats[m][0], 3) for s in summary if math.isfinite(s.stats[m][0])]
        best[m] = max(means) if means else None
    lines = ["| " + " | ".join(TABLE_HEADER) + " |",
             "|" + "|".join(["---"] + [":---:"] * len(TABLE_COLUMNS)) + "|"]
    for s in summary:
        cells = [s.experiment]
        for _, m in TABLE_COLUMNS:
            mean, sd = s.stats[m]
            c = _cell(mean, sd)
            if best[m] is not None and math.isfinite(mean) and round(mean, 3) == best[m]:
                c = f"**{c}**"
            cells.append(c)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def parse_markdown_table(text: str) -> list[list[str]]:
    """Split a rendered markdown table back into rows of cells (header included, rule dropped)."""
    rows = []
    for line in text.strip().splitlines():
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if all(set(c) <= set(":-") for c in cells):
            continue
        rows.append(cells)
    return rows


def matrix_rows(matrix, metric: str = "auroc") -> list[dict]:
    return [{"model_site": i, "test_site": j, metric: getattr(rep, metric)}
            for i, row in enumerate(matrix) for j, rep in enumerate(row)]
