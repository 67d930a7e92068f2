import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from oracles import auc_all_pairs, f1_enumerate
from mitovl.eval import (
    EvalError,
    MetricsReport,
    PredictionSet,
    auc,
    build_report,
    exact_match_accuracy,
    f1_score,
    metrics_for,
    paired_t_test,
    read_predictions,
    t_sf_two_sided,
    write_predictions,
)
from mitovl.ingest import Label


def ps(true, pred=None, scores=None, **kw):
    pred = true if pred is None else pred
    scores = np.zeros(len(true)) if scores is None else scores
    return PredictionSet(true, pred, scores, np.ones(len(true), bool), **kw)


def test_f1_examples():
    assert f1_score(ps([1, 0, 1, 0])) == 1.0
    true = [1] * 10 + [0] * 2
    pred = [1] * 8 + [0] * 2 + [1] * 2
    assert f1_score(ps(true, pred)) == pytest.approx(0.8)
    assert f1_score(ps([1, 1, 0], [0, 0, 0])) == 0.0
    assert f1_score(ps([0, 0], [1, 0])) == 0.0
    with pytest.raises(EvalError):
        f1_score(ps([]))


def test_auc_examples():
    assert auc(ps([1, 1, 0, 0], scores=[0.9, 0.8, 0.2, 0.1])) == 1.0
    assert auc(ps([1, 0, 1, 0], scores=[0.4] * 4)) == 0.5
    assert auc(ps([1, 1, 0, 0], scores=[0.8, 0.3, 0.5, 0.1])) == pytest.approx(0.75)
    with pytest.raises(EvalError):
        auc(ps([1, 1], scores=[0.1, 0.2]))


def test_prediction_set_validation():
    with pytest.raises(EvalError):
        PredictionSet([1, 0], [1], [0.1, 0.2], [1, 1])
    with pytest.raises(EvalError):
        ps([1, 0], scores=[0.1, float("nan")])
    p = PredictionSet.from_labels([Label.MITOTIC, "HARD_NEGATIVE"], [Label.MITOTIC, Label.MITOTIC], [0.9, 0.6])
    assert p.true_labels.tolist() == [True, False] and p.pred_labels.tolist() == [True, True]


prediction_sets = st.integers(2, 1000).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(0, 2**32 - 1), st.integers(1, 50))
)


@given(prediction_sets)
def test_metrics_match_brute_force(args):
    n, seed, grid = args
    rng = np.random.default_rng(seed)
    true = rng.random(n) < 0.4
    true[0], true[1] = True, False
    pred = rng.random(n) < 0.5
    scores = np.round(rng.random(n) * grid) / grid
    p = ps(true, pred, scores)
    assert f1_score(p) == pytest.approx(f1_enumerate(true, pred), abs=1e-12)
    assert auc(p) == pytest.approx(auc_all_pairs(scores, true), abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["exp", "cube", "logit", "affine", "tanh"]))
def test_auc_invariant_under_monotone_maps(seed, kind):
    rng = np.random.default_rng(seed)
    n = 200
    true = rng.random(n) < 0.5
    true[:2] = [True, False]
    scores = np.round(rng.random(n), 2) * 0.98 + 0.01
    fn = {
        "exp": np.exp,
        "cube": lambda x: x**3,
        "logit": lambda x: np.log(x / (1 - x)),
        "affine": lambda x: 3.0 * x - 7.0,
        "tanh": lambda x: np.tanh(4 * x - 2),
    }[kind]
    assert auc(ps(true, scores=fn(scores))) == pytest.approx(auc(ps(true, scores=scores)), abs=1e-12)


def test_t_test_examples():
    res = paired_t_test([1, 2, 3], [0, 0, 0])
    assert res.t == pytest.approx(2 / (1 / math.sqrt(3)), abs=1e-9)
    assert res.t == pytest.approx(3.4641, abs=1e-4)
    assert res.df == 2 and res.p == pytest.approx(0.0742, abs=1e-3)
    assert res.degenerate is None
    same = paired_t_test([0.8, 0.9], [0.8, 0.9])
    assert same.p == 1.0 and same.degenerate
    const = paired_t_test([2, 3, 4], [1, 2, 3])
    assert const.p == 0.0 and const.degenerate
    with pytest.raises(EvalError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(EvalError):
        paired_t_test([1.0, 2.0], [2.0])


@pytest.mark.parametrize("df,critical", [(2, 4.303), (4, 2.776), (10, 2.228), (30, 2.042)])
def test_t_cdf_against_published_critical_values(df, critical):
    # two-sided 5% critical values from standard t tables
    assert t_sf_two_sided(critical, df) == pytest.approx(0.05, abs=2e-4)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=10))
def test_t_test_antisymmetry_and_scipy_agreement(pairs):
    a = [x for x, _ in pairs]
    b = [y for _, y in pairs]
    ab, ba = paired_t_test(a, b), paired_t_test(b, a)
    assert ab.p == ba.p and ab.df == ba.df
    if ab.degenerate is None:
        assert ab.t == -ba.t
        ref = stats.ttest_rel(a, b)
        assert ab.t == pytest.approx(ref.statistic, rel=1e-9)
        assert ab.p == pytest.approx(ref.pvalue, rel=1e-6, abs=1e-12)


def _report(name, f1, auc_values=None):
    return MetricsReport(name, "None", name, list(range(len(f1))), list(f1), list(auc_values or f1))


def test_report_example_mean_sd():
    rep = build_report([_report("fam", [0.85, 0.86, 0.87, 0.85, 0.87])])
    (row,) = rep.rows
    assert row["f1_mean"] == pytest.approx(0.86) and row["f1_sd"] == pytest.approx(0.01)
    assert row["f1_cell"] == "0.860 (0.01)"
    assert len(rep.per_seed) == 5


def test_report_layout_and_stars():
    a = _report("a", [0.9, 0.91, 0.92, 0.9, 0.93])
    b = _report("b", [0.5, 0.52, 0.49, 0.51, 0.5])
    rep = build_report([a, b])
    cells = {r["family"]: r["f1_cell"] for r in rep.rows}
    assert cells["a"].endswith("*") and not cells["b"].endswith("*")
    header = rep.table_text().splitlines()[0]
    assert [h.strip() for h in header.strip("|").split("|")] == ["Pre-training", "Finetuning", "F1 score (SD)",
                                                                "AUC (SD)"]
    assert {(r["family_a"], r["metric"]) for r in rep.pairwise} == {("a", "f1"), ("a", "auc")}


def test_identical_families_get_no_stars():
    rep = build_report([_report("a", [0.8, 0.9, 0.7]), _report("b", [0.8, 0.9, 0.7])])
    assert not any(r["f1_cell"].endswith("*") or r["auc_cell"].endswith("*") for r in rep.rows)


def test_mismatched_seed_sets():
    b = _report("b", [0.1, 0.2, 0.3])
    b.seeds = [0, 1, 7]
    with pytest.raises(EvalError):
        build_report([_report("a", [0.1, 0.2, 0.3]), b])


@given(st.lists(st.floats(0, 1), min_size=2, max_size=8))
def test_summary_recomputes_from_per_seed_rows(values):
    rep = build_report([_report("x", values)])
    rows = list(csv.DictReader(io.StringIO(rep.per_seed_csv())))
    f1 = [float(r["f1"]) for r in rows]
    (summary,) = list(csv.DictReader(io.StringIO(rep.table_csv())))
    assert float(summary["f1_mean"]) == pytest.approx(float(np.mean(f1)), abs=1e-11)
    assert float(summary["f1_sd"]) == pytest.approx(float(np.std(f1, ddof=1)), abs=1e-11)


def test_predictions_round_trip(tmp_path):
    p = PredictionSet([1, 0, 1], [1, 1, 0], [0.9, 0.6, 0.2], [1, 0, 1], seed=3, family="f",
                      tile_ids=["a_0", "b_0", "c_0"], slide_ids=["1", "1", "2"], exact_match=[1, 0, 0],
                      generated=["mitotic, x", "???", "nonmitotic, y"])
    write_predictions(p, tmp_path / "p.csv")
    q = read_predictions(tmp_path / "p.csv", seed=3, family="f")
    for field in ("true_labels", "pred_labels", "scores", "parse_ok", "exact_match"):
        np.testing.assert_array_equal(getattr(p, field), getattr(q, field))
    assert q.tile_ids == p.tile_ids and q.generated == p.generated
    assert exact_match_accuracy(q) == pytest.approx(1 / 3)


def test_metrics_for_counts_parse_failures():
    a = PredictionSet([1, 0], [0, 0], [0.7, 0.2], [False, True], seed=1)
    b = PredictionSet([1, 0], [1, 0], [0.7, 0.2], [True, True], seed=0)
    m = metrics_for("f", "pre", "fine", [a, b])
    assert m.seeds == [0, 1] and m.parse_failures == [0, 1]
    assert m.f1 == [1.0, 0.0] and m.exact_match is None


def test_single_seed_report_has_no_tests():
    rep = build_report([_report("a", [0.9]), _report("b", [0.5])])
    assert rep.pairwise == []
    assert [r["f1_cell"] for r in rep.rows] == ["0.900 (0)", "0.500 (0)"]
