from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cxrpy.constants import DISEASE_NAMES, NUM_CLASSES, ScoreSource
from cxrpy.error import EvaluationError, ReportError
from cxrpy.metrics import (
    EvalReport,
    ScoreMatrix,
    evaluate,
    mean_defined,
    roc_auc,
    roc_auc_pairwise,
)
from cxrpy.report import load_reference_report


def test_small_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_degenerate_is_undefined():
    assert roc_auc([0.1, 0.2], [0, 0]) is None
    assert roc_auc([0.1, 0.2], [1, 1]) is None


@pytest.mark.parametrize(
    "scores, labels",
    [
        ([], []),
        ([0.1, 0.2], [1]),
        ([0.1, float("nan")], [1, 0]),
        ([0.1, 0.2], [1, 2]),
    ],
)
def test_invalid_inputs(scores, labels):
    with pytest.raises(EvaluationError):
        roc_auc(scores, labels)


def test_matches_pairwise_with_ties():
    rng = np.random.default_rng(1234)
    for _ in range(1000):
        n = int(rng.integers(2, 1001))
        # coarse integer scores force plenty of ties
        scores = rng.integers(0, int(rng.integers(2, 10)), n).astype(float)
        labels = rng.integers(0, 2, n)
        fast, slow = roc_auc(scores, labels), roc_auc_pairwise(scores, labels)
        if slow is None:
            assert fast is None
        else:
            assert fast == pytest.approx(slow, abs=1e-12)


problems = st.integers(min_value=2, max_value=40).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(-5, 5), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(
            lambda y: 0 < sum(y) < len(y)
        ),
    )
)


@given(problems)
def test_label_complement(problem):
    scores, labels = problem
    flipped = [1 - y for y in labels]
    assert roc_auc(scores, flipped) == pytest.approx(1.0 - roc_auc(scores, labels), abs=1e-12)


@given(problems)
def test_score_negation(problem):
    scores, labels = problem
    negated = [-s for s in scores]
    assert roc_auc(negated, labels) == pytest.approx(1.0 - roc_auc(scores, labels), abs=1e-12)


@given(problems)
def test_monotone_transform_invariance(problem):
    scores, labels = problem
    assert roc_auc(np.exp(scores), labels) == roc_auc(scores, labels)
    assert roc_auc([3 * s + 1 for s in scores], labels) == roc_auc(scores, labels)


def test_mean_defined():
    assert mean_defined([0.5, None, 1.0]) == 0.75
    with pytest.raises(EvaluationError):
        mean_defined([None, None])


def test_reference_mean():
    report = load_reference_report()
    assert report.mean_auc == pytest.approx(0.7500714, abs=1e-7)
    assert round(report.mean_auc, 3) == 0.750
    assert report.source is ScoreSource.ZERO_SHOT_PROMPTS


def _matrix(n: int = 40, seed: int = 0) -> ScoreMatrix:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, (n, NUM_CLASSES))
    labels[0], labels[1] = 0, 1
    scores = labels + rng.normal(0.0, 1.0, labels.shape)
    return ScoreMatrix(scores, labels, ScoreSource.HEAD_LOGITS)


def test_evaluate_per_class():
    m = _matrix()
    report = evaluate(m, n_shots=4, seed=3, timestamp="t")
    assert len(report.per_class_auc) == NUM_CLASSES
    for c in range(NUM_CLASSES):
        assert report.per_class_auc[c] == roc_auc(m.scores[:, c], m.labels[:, c])
    assert report.mean_auc == pytest.approx(np.mean(report.per_class_auc), abs=1e-12)
    assert report.n_shots == 4
    assert report.seed == 3
    assert report.undefined_classes == ()


def test_evaluate_invariant_under_monotone_scores():
    m = _matrix(seed=5)
    squashed = ScoreMatrix(1.0 / (1.0 + np.exp(-m.scores)), m.labels, m.source)
    a = evaluate(m, timestamp="t")
    b = evaluate(squashed, timestamp="t")
    assert a.per_class_auc == b.per_class_auc


def test_undefined_class_excluded(caplog):
    m = _matrix(seed=2)
    labels = m.labels.copy()
    hernia = DISEASE_NAMES.index("Hernia")
    labels[:, hernia] = 0
    with caplog.at_level("WARNING", logger="cxrpy.metrics"):
        report = evaluate(ScoreMatrix(m.scores, labels, m.source))
    assert report.per_class_auc[hernia] is None
    assert report.undefined_classes == ("Hernia",)
    defined = [v for v in report.per_class_auc if v is not None]
    assert report.mean_auc == pytest.approx(sum(defined) / 13, abs=1e-12)
    assert "Hernia" in caplog.text


def test_all_undefined():
    labels = np.zeros((5, NUM_CLASSES), dtype=int)
    with pytest.raises(EvaluationError):
        evaluate(ScoreMatrix(np.zeros((5, NUM_CLASSES)), labels, ScoreSource.HEAD_LOGITS))


def test_score_matrix_validation():
    with pytest.raises(EvaluationError):
        ScoreMatrix(np.zeros((3, 13)), np.zeros((3, 13)), ScoreSource.HEAD_LOGITS)
    with pytest.raises(EvaluationError):
        ScoreMatrix(np.zeros((3, 14)), np.zeros((4, 14)), ScoreSource.HEAD_LOGITS)
    scores = np.zeros((3, 14))
    scores[1, 1] = np.inf
    with pytest.raises(EvaluationError):
        ScoreMatrix(scores, np.zeros((3, 14)), ScoreSource.HEAD_LOGITS)


def test_report_save_and_load(tmp_path):
    report = evaluate(_matrix(), n_shots=2, metadata={"label": "x"}, timestamp="t")
    path = report.save(tmp_path / "r" / "report.json")
    payload = json.loads(path.read_text())
    assert list(payload["per_class_auc"]) == list(DISEASE_NAMES)
    assert EvalReport.load(path) == report


def test_report_dataframe():
    report = evaluate(_matrix(), timestamp="t", metadata={"label": "x"})
    df = report.as_dataframe()
    assert list(df.index) == list(DISEASE_NAMES)
    assert df.attrs["mean_auc"] == report.mean_auc
    assert df.attrs["label"] == "x"


@pytest.mark.parametrize("text", ["{not json", '{"mean_auc": 0.5}', '{"per_class_auc": {}}'])
def test_malformed_report(tmp_path, text):
    path = tmp_path / "bad.json"
    path.write_text(text)
    with pytest.raises(ReportError):
        EvalReport.load(path)


def test_missing_report(tmp_path):
    with pytest.raises(ReportError):
        EvalReport.load(tmp_path / "nope.json")
