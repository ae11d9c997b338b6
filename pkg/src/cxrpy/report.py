"""
    cxrpy.report
    ~~~~~~~~~~~~

    Shots-vs-AUC curves, comparison tables against reference baselines
    and the bundled reference data.

    :copyright: 2024 by cxrpy Authors, see AUTHORS for more details.
    :license: BSD, see LICENSE for more details.
"""
from __future__ import annotations

import json
import logging
import pathlib
from collections import Counter
from importlib import resources
from typing import Any, Mapping, Sequence

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from .common import provenance_line
from .constants import DISEASE_NAMES
from .error import EvaluationError, ReportError
from .metrics import EvalReport, mean_defined

logger = logging.getLogger(__name__)

AVERAGE_ROW = "Average"
BEST = "best"
TIE = "tie"

_DATA = resources.files("cxrpy") / "data"


def shots_curve(reports: Sequence[EvalReport]) -> pd.DataFrame:
    """Table of (shots, mean_auc), one row per report, sorted by shots.

    >>> from cxrpy.metrics import EvalReport
    >>> reps = [EvalReport.from_per_class([0.7] * 14, n_shots=n, timestamp="")
    ...         for n in (4, 0)]
    >>> shots_curve(reps)["shots"].tolist()
    [0, 4]
    """
    if not reports:
        raise EvaluationError("No reports to build a curve from")
    dups = sorted(k for k, v in Counter(r.n_shots for r in reports).items() if v > 1)
    if dups:
        raise EvaluationError(f"Duplicate n_shots values: {dups}")

    df = pd.DataFrame(
        {
            "shots": [r.n_shots for r in reports],
            "mean_auc": [r.mean_auc for r in reports],
        }
    )
    df = df.sort_values("shots", kind="stable").reset_index(drop=True)
    df.attrs["seed"] = reports[0].seed
    df.attrs["config_digest"] = reports[0].config_digest
    return df


def _provenance(attrs: Mapping[str, Any]) -> str | None:
    """Comment line naming the run behind a table, from its attrs."""
    if not attrs.get("config_digest"):
        return None
    return provenance_line(attrs["config_digest"], attrs.get("seed"))


def write_csv(
    df: pd.DataFrame, path: str | pathlib.Path, index: bool = True
) -> pathlib.Path:
    """df as CSV, below a provenance comment line when its attrs name a run."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _provenance(df.attrs)
    with path.open("w", encoding="utf-8", newline="") as fo:
        if header:
            fo.write(header + "\n")
        df.to_csv(fo, index=index, lineterminator="\n")
    return path


def write_curve(
    curve: pd.DataFrame, out_dir: str | pathlib.Path, stem: str = "curve"
) -> tuple[pathlib.Path, pathlib.Path]:
    """Write <stem>.csv (header "shots,mean_auc") and a <stem>.svg plot.

    The run digest and seed found in ``curve.attrs`` go into a comment line
    of the CSV and into the SVG description.
    """
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    svg_path = out_dir / f"{stem}.svg"

    table = curve[["shots", "mean_auc"]].copy()
    table.attrs = dict(curve.attrs)
    write_csv(table, csv_path, index=False)

    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    ax.plot(curve["shots"], curve["mean_auc"], marker="o", linewidth=2.0)
    ax.set_xlabel("Shots per class")
    ax.set_ylabel("Mean AUC")
    ax.set_title("Mean AUC by number of labelled shots")
    ax.set_xticks(list(curve["shots"]))
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "cxrpy"}):
        header = _provenance(curve.attrs)
        metadata = {"Date": None, "Description": header and header.lstrip("# ")}
        fig.savefig(svg_path, format="svg", metadata=metadata)

    logger.info("Curve written to %s and %s", csv_path, svg_path)
    return csv_path, svg_path


def _column_values(values: Mapping[str, float | None] | Sequence[float | None]):
    if isinstance(values, Mapping):
        missing = [n for n in DISEASE_NAMES if n not in values]
        if missing:
            raise EvaluationError(f"Column lacks {', '.join(missing)}")
        values = [values[n] for n in DISEASE_NAMES]
    values = list(values)
    if len(values) != len(DISEASE_NAMES):
        raise EvaluationError(f"Expected {len(DISEASE_NAMES)} per-class values")
    return [np.nan if v is None or pd.isna(v) else float(v) for v in values]


def _mark_best(row: pd.Series) -> tuple[str, bool]:
    defined = row.dropna()
    if defined.empty:
        return "", False
    top = defined.max()
    winners = [name for name, v in defined.items() if np.isclose(v, top, rtol=0, atol=1e-12)]
    if len(winners) == 1:
        return str(winners[0]), False
    return "", True


def comparison_table(
    columns: Mapping[str, Mapping[str, float | None] | Sequence[float | None]],
) -> pd.DataFrame:
    """Side by side per-class AUC table.

    One row per disease plus an average row (mean of defined values per
    column). The ``best`` column names the unique highest column of each
    row and ``tie`` is set when several columns share the maximum.
    """
    if not columns:
        raise EvaluationError("At least one column is required")
    df = pd.DataFrame(
        {name: _column_values(values) for name, values in columns.items()},
        index=pd.Index(DISEASE_NAMES, name="disease"),
    )
    average = {
        name: mean_defined([None if pd.isna(v) else v for v in df[name]])
        for name in df.columns
    }
    df.loc[AVERAGE_ROW] = pd.Series(average)

    marks = [_mark_best(row) for _, row in df.iterrows()]
    df[BEST] = [m[0] for m in marks]
    df[TIE] = [m[1] for m in marks]
    return df


def compare_with_baselines(
    report: EvalReport, baseline_table: pd.DataFrame, label: str = "This run"
) -> pd.DataFrame:
    """Comparison of report against every column of baseline_table.

    baseline_table is indexed by disease name (``load_baselines``).
    """
    missing = [n for n in DISEASE_NAMES if n not in baseline_table.index]
    if missing:
        raise EvaluationError(f"Baseline table lacks {', '.join(missing)}")
    if label in baseline_table.columns:
        raise EvaluationError(f"Column {label!r} already present in the baselines")
    columns: dict[str, Sequence[float | None]] = {
        str(name): [baseline_table.at[d, name] for d in DISEASE_NAMES]
        for name in baseline_table.columns
    }
    columns[label] = list(report.per_class_auc)
    return comparison_table(columns)


def render_text(table: pd.DataFrame) -> str:
    """Aligned plain text with three decimals; the best value of a row is starred."""
    value_cols = [c for c in table.columns if c not in (BEST, TIE)]
    rows = []
    for disease, row in table.iterrows():
        cells = [str(disease)]
        for col in value_cols:
            v = row[col]
            text = "-" if pd.isna(v) else f"{v:.3f}"
            cells.append(text + ("*" if row[BEST] == col else " "))
        cells.append("tie" if row[TIE] else "")
        rows.append(cells)

    header = ["disease", *value_cols, ""]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]

    def fmt(cells: list[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:-1], widths[1:-1])]
        return "  ".join([first, *rest, cells[-1]]).rstrip()

    rule = "-" * len(fmt(header))
    body = [fmt(r) for r in rows]
    return "\n".join([fmt(header), rule, *body[:-1], rule, body[-1]]) + "\n"


def per_class_gains(baseline: EvalReport, other: EvalReport) -> pd.DataFrame:
    """Per-disease AUC change from baseline to other, largest gain first."""
    df = pd.DataFrame(
        {
            "baseline": _column_values(baseline.per_class_auc),
            "other": _column_values(other.per_class_auc),
        },
        index=pd.Index(DISEASE_NAMES, name="disease"),
    )
    df["gain"] = df["other"] - df["baseline"]
    df = df.sort_values("gain", ascending=False, kind="stable", na_position="last")
    df.attrs["baseline_shots"] = baseline.n_shots
    df.attrs["other_shots"] = other.n_shots
    df.attrs["seed"] = other.seed
    df.attrs["config_digest"] = other.config_digest
    return df


def load_baselines(path: str | pathlib.Path | None = None) -> pd.DataFrame:
    """Per-class baseline AUC columns indexed by disease.

    Without a path, the transcribed reference values bundled with the
    package are returned. Lines starting with ``#`` are comments.
    """
    name = str(path) if path is not None else "cxrpy/data/baselines.csv"
    try:
        if path is None:
            with (_DATA / "baselines.csv").open("r", encoding="utf-8") as fi:
                df = pd.read_csv(fi, comment="#")
        else:
            df = pd.read_csv(path, comment="#")
    except FileNotFoundError:
        raise ReportError(name, "file not found") from None
    except pd.errors.EmptyDataError:
        raise ReportError(name, "no baseline data") from None

    if "disease" not in df.columns:
        raise ReportError(name, "missing 'disease' column")
    df = df.set_index("disease")
    if df.empty or len(df.columns) == 0:
        raise ReportError(name, "no baseline data")
    missing = [n for n in DISEASE_NAMES if n not in df.index]
    if missing:
        raise ReportError(name, f"missing classes {', '.join(missing)}")
    return df.loc[list(DISEASE_NAMES)].astype(float)


def load_reference_report() -> EvalReport:
    """The reported per-class zero-shot AUC of the adapted model."""
    payload = json.loads((_DATA / "reference_report.json").read_text(encoding="utf-8"))
    return EvalReport.from_dict(payload)


def load_reference_curve() -> pd.DataFrame:
    with (_DATA / "reference_curve.csv").open("r", encoding="utf-8") as fi:
        return pd.read_csv(fi, comment="#")
