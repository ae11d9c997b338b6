from __future__ import annotations

import pandas as pd
import pytest

from cxrpy.constants import DISEASE_NAMES
from cxrpy.error import EvaluationError, ReportError
from cxrpy.metrics import EvalReport
from cxrpy.report import (
    AVERAGE_ROW,
    BEST,
    TIE,
    compare_with_baselines,
    comparison_table,
    load_baselines,
    load_reference_curve,
    load_reference_report,
    per_class_gains,
    render_text,
    shots_curve,
    write_csv,
    write_curve,
)


def _report(value: float, n_shots: int = 0) -> EvalReport:
    return EvalReport.from_per_class([value] * 14, n_shots=n_shots, timestamp="")


def test_curve_is_sorted():
    curve = shots_curve([_report(0.8, 16), _report(0.7, 0), _report(0.75, 4)])
    assert curve["shots"].tolist() == [0, 4, 16]
    assert curve["mean_auc"].tolist() == pytest.approx([0.7, 0.75, 0.8])


def test_curve_single_row():
    curve = shots_curve([_report(0.7, 0)])
    assert len(curve) == 1


def test_curve_rejects_duplicates_and_empty():
    with pytest.raises(EvaluationError):
        shots_curve([_report(0.7, 2), _report(0.8, 2)])
    with pytest.raises(EvaluationError):
        shots_curve([])


def test_write_curve(tmp_path):
    curve = shots_curve([_report(0.7, 0), _report(0.72, 1), _report(0.75, 4)])
    csv_path, svg_path = write_curve(curve, tmp_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "shots,mean_auc"
    assert len(lines) == 4
    assert svg_path.read_text().lstrip().startswith("<?xml")

    _, again = write_curve(curve, tmp_path / "again")
    assert again.read_bytes() == svg_path.read_bytes()


def test_bundled_baseline_averages():
    table = compare_with_baselines(load_reference_report(), load_baselines())
    averages = table.loc[AVERAGE_ROW]
    assert round(averages["CheXZero"], 3) == 0.706
    assert round(averages["ImCLIP"], 3) == 0.564
    assert round(averages["CXRCCLIP"], 3) == 0.719
    assert round(averages["MoCoCLIP"], 3) == 0.749
    assert round(averages["This run"], 3) == 0.750
    assert averages[BEST] == "This run"


def test_best_column_per_row():
    table = compare_with_baselines(load_reference_report(), load_baselines())
    assert table.at["Hernia", BEST] == "This run"
    assert table.at["Emphysema", BEST] == "This run"
    assert table.at["Consolidation", BEST] == "CheXZero"
    assert table.at["Cardiomegaly", BEST] == "MoCoCLIP"
    assert not table[TIE].any()


def test_ties_are_flagged():
    table = comparison_table({"a": [0.7] * 14, "b": [0.7] * 14})
    assert table[TIE].all()
    assert (table[BEST] == "").all()


def test_undefined_values_are_skipped():
    values = [0.6] * 14
    values[0] = None
    table = comparison_table({"a": values, "b": [0.5] * 14})
    assert pd.isna(table.at[DISEASE_NAMES[0], "a"])
    assert table.at[DISEASE_NAMES[0], BEST] == "b"
    assert table.at[AVERAGE_ROW, "a"] == pytest.approx(0.6)


def test_missing_class():
    with pytest.raises(EvaluationError):
        comparison_table({"a": {"Mass": 0.7}})
    baselines = load_baselines().drop(index="Hernia")
    with pytest.raises(EvaluationError):
        compare_with_baselines(load_reference_report(), baselines)


def test_render_text():
    table = compare_with_baselines(load_reference_report(), load_baselines())
    text = render_text(table)
    lines = text.splitlines()
    assert lines[0].split()[:2] == ["disease", "CheXZero"]
    hernia = next(line for line in lines if line.startswith("Hernia"))
    assert "0.855*" in hernia
    assert lines[-1].startswith(AVERAGE_ROW)
    assert "0.750*" in lines[-1]


def test_load_baselines_order():
    table = load_baselines()
    assert list(table.index) == list(DISEASE_NAMES)
    assert list(table.columns) == ["CheXZero", "ImCLIP", "CXRCCLIP", "MoCoCLIP"]
    assert table.at["Hernia", "CXRCCLIP"] == 0.83


@pytest.mark.parametrize(
    "text",
    ["", "# only a comment\n", "disease\n" + "\n".join(DISEASE_NAMES) + "\n", "a,b\n1,2\n"],
)
def test_load_baselines_unusable(tmp_path, text):
    path = tmp_path / "baselines.csv"
    path.write_text(text)
    with pytest.raises(ReportError):
        load_baselines(path)


def test_load_baselines_missing_file(tmp_path):
    with pytest.raises(ReportError):
        load_baselines(tmp_path / "nope.csv")


def test_reference_curve():
    curve = load_reference_curve()
    assert curve["shots"].tolist() == [0, 1, 2, 4, 8, 16]
    assert curve["mean_auc"].iloc[0] == pytest.approx(0.7502)
    assert curve["mean_auc"].iloc[-1] == pytest.approx(0.7542)


def test_per_class_gains():
    base = _report(0.7)
    values = [0.7] * 14
    values[DISEASE_NAMES.index("Mass")] = 0.9
    values[DISEASE_NAMES.index("Edema")] = 0.6
    other = EvalReport.from_per_class(values, n_shots=8, timestamp="")
    gains = per_class_gains(base, other)
    assert gains.index[0] == "Mass"
    assert gains.index[-1] == "Edema"
    assert gains.at["Mass", "gain"] == pytest.approx(0.2)
    assert gains.attrs["other_shots"] == 8


def test_curve_names_its_run(tmp_path):
    reports = [
        EvalReport.from_per_class(
            [v] * 14, n_shots=n, seed=11, config_digest="5eed5eed5eed5eed", timestamp=""
        )
        for n, v in ((0, 0.7), (2, 0.74))
    ]
    csv_path, svg_path = write_curve(shots_curve(reports), tmp_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "# config_digest=5eed5eed5eed5eed seed=11"
    assert lines[1] == "shots,mean_auc"
    assert pd.read_csv(csv_path, comment="#")["shots"].tolist() == [0, 2]
    assert "config_digest=5eed5eed5eed5eed seed=11" in svg_path.read_text()


def test_write_csv_without_run_attrs(tmp_path):
    df = pd.DataFrame({"a": [1, 2]})
    path = write_csv(df, tmp_path / "nested" / "plain.csv", index=False)
    assert path.read_text() == "a\n1\n2\n"
    df.attrs.update(config_digest="abcd", seed=3)
    text = write_csv(df, path, index=False).read_text()
    assert text == "# config_digest=abcd seed=3\na\n1\n2\n"
