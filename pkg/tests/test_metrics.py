import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from chronocon.metrics import (ScoreTable, aggregate_total, betainc, bootstrap_ci, error_correlation,
                               evaluate_tables, icc, load_tables, mae, paired_mse_ttest, pearson, progression,
                               rmse, save_pred_table, save_truth_table, student_t_cdf, student_t_sf2)
from oracles import icc_anova


def _table(rows):
    return ScoreTable(*map(list, zip(*rows)))


def test_totals_interpolate_missing_subscore():
    rows = [("p", 0.0, "a", 1.0, 1.0), ("p", 0.0, "b", 2.0, 2.0), ("p", 0.0, "c", 0.0, 0.0), ("p", 0.0, "d", 0.0, 0.0),
            ("p", 2.0, "a", 3.0, 3.0), ("p", 2.0, "b", 2.0, 2.0), ("p", 2.0, "c", 0.0, 0.0), ("p", 2.0, "d", 0.0, 0.0),
            ("p", 1.0, "a", np.nan, 2.0), ("p", 1.0, "b", 2.0, 2.0), ("p", 1.0, "c", 0.0, 0.0), ("p", 1.0, "d", 0.0, 0.0)]
    tot = aggregate_total(_table(rows))
    assert tot.timestamp.tolist() == [0.0, 1.0, 2.0]
    assert tot.true.tolist() == [3.0, 4.0, 5.0]  # a interpolated to 2 at t=1


def test_visits_with_too_many_missing_are_dropped():
    rows = [("p", 0.0, "a", np.nan, 1.0), ("p", 0.0, "b", np.nan, 2.0), ("p", 0.0, "c", 1.0, 0.0), ("p", 0.0, "d", 1.0, 0.0),
            ("p", 1.0, "a", 1.0, 1.0), ("p", 1.0, "b", 1.0, 2.0), ("p", 1.0, "c", 1.0, 0.0), ("p", 1.0, "d", 1.0, 0.0)]
    tot = aggregate_total(_table(rows))
    assert tot.timestamp.tolist() == [1.0]


def test_predictions_clipped_to_score_range():
    rows = [("p", 0.0, "a", 1.0, -2.0), ("p", 0.0, "b", 1.0, 9.0)]
    assert aggregate_total(_table(rows), {"a": 4, "b": 4}).pred.tolist() == [4.0]


def test_duplicate_rows_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        _table([("p", 0.0, "a", 1.0, 1.0), ("p", 0.0, "a", 2.0, 1.0)])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_totals_commute_with_row_order(seed):
    rng = np.random.default_rng(seed)
    rows = [(f"p{p}", float(t), f"s{s}", float(rng.integers(0, 5)), float(rng.random()))
            for p in range(3) for t in range(3) for s in range(2)]
    perm = rng.permutation(len(rows))
    a = aggregate_total(_table(rows))
    b = aggregate_total(_table([rows[i] for i in perm]))
    for k in ("patient", "timestamp", "true", "pred"):
        assert np.array_equal(getattr(a, k), getattr(b, k))


def test_progression_antisymmetry():
    rng = np.random.default_rng(1)
    rows = [(f"p{p}", float(t), "a", float(rng.integers(0, 5)), float(rng.random())) for p in range(3) for t in range(4)]
    fwd = progression(aggregate_total(_table(rows)))
    rev = progression(aggregate_total(_table([(p, -t, s, y, yh) for p, t, s, y, yh in rows])))
    # reversed time visits the same consecutive pairs in the opposite order
    assert np.allclose(sorted(-fwd.true), sorted(rev.true))
    assert np.allclose(sorted(-fwd.pred), sorted(rev.pred))


@settings(max_examples=100, deadline=None)
@given(st.integers(3, 50), st.integers(0, 2 ** 31))
def test_icc_matches_anova_oracle(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(n) * 3
    yh = y + rng.standard_normal(n) + rng.normal()
    r = icc(y, yh)
    o3, o2 = icc_anova([[a, b] for a, b in zip(y, yh)])
    assert r.icc31 == pytest.approx(o3, rel=1e-10, abs=1e-12)
    assert r.icc21 == pytest.approx(o2, rel=1e-10, abs=1e-12)


def test_icc_known_cases():
    y = np.arange(10.0)
    assert icc(y, y).icc31 == pytest.approx(1.0) and icc(y, y).icc21 == pytest.approx(1.0)
    # a constant prediction offset keeps consistency but costs absolute agreement
    shifted = icc(y, y + 3.0)
    assert shifted.icc31 == pytest.approx(1.0)
    assert shifted.icc21 < 0.9
    # a common shift of both columns changes neither
    a, b = icc(y, y + np.sin(y)), icc(y + 7.0, y + np.sin(y) + 7.0)
    assert a.icc31 == pytest.approx(b.icc31, rel=1e-12) and a.icc21 == pytest.approx(b.icc21, rel=1e-12)
    assert icc(np.ones(5), np.ones(5)).degenerate
    with pytest.raises(ValueError):
        icc([1, 2], [1, 2])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2 ** 31))
def test_point_metrics_match_naive_formulas(n, seed):
    rng = np.random.default_rng(seed)
    y, yh = rng.standard_normal(n), rng.standard_normal(n)
    assert rmse(y, yh) == pytest.approx(math.sqrt(sum((a - b) ** 2 for a, b in zip(y, yh)) / n), rel=1e-10)
    assert mae(y, yh) == pytest.approx(sum(abs(a - b) for a, b in zip(y, yh)) / n, rel=1e-10)
    assert pearson(y, yh) == pytest.approx(stats.pearsonr(y, yh)[0], rel=1e-10, abs=1e-12)


def test_pearson_degenerate():
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (4.5, 0.5, 0.9), (30, 2, 0.99), (2, 30, 0.01), (1, 1, 0.5),
                                   (100, 0.5, 0.97), (0.5, 100, 0.003)])
def test_betainc_matches_scipy(a, b, x):
    assert betainc(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-12, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30), st.integers(1, 200))
def test_t_distribution_matches_scipy(t, df):
    assert student_t_sf2(t, df) == pytest.approx(2 * stats.t.sf(abs(t), df), rel=1e-10, abs=1e-14)
    assert student_t_cdf(t, df) == pytest.approx(stats.t.cdf(t, df), rel=1e-9, abs=1e-14)


def test_t_table_value():
    assert abs(student_t_sf2(2.262, 9) - 0.05) < 1e-3


def test_paired_ttest():
    rng = np.random.default_rng(2)
    a, b = rng.random(20), rng.random(20)
    r = paired_mse_ttest(a, b)
    ref = stats.ttest_rel(a, b)
    assert r.t == pytest.approx(ref.statistic, rel=1e-12)
    assert r.p == pytest.approx(ref.pvalue, rel=1e-9)
    same = paired_mse_ttest(a, a)
    assert (same.t, same.p, same.degenerate) == (0.0, 1.0, True)
    shifted = paired_mse_ttest(a + 1.0, a)
    assert shifted.degenerate and shifted.p == 0.0
    with pytest.raises(ValueError):
        paired_mse_ttest([1.0], [2.0])


def test_bootstrap_coverage_gaussian_mean():
    rng = np.random.default_rng(3)
    hits = 0
    for trial in range(200):
        x = rng.standard_normal(60)
        ci = bootstrap_ci((x,), np.mean, B=400, seed=trial)
        hits += ci.low <= 0.0 <= ci.high
    assert 0.90 <= hits / 200 <= 0.99


def test_bootstrap_is_seeded_and_clustered():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(30)
    a = bootstrap_ci((x,), np.mean, B=200, seed=1)
    assert a == bootstrap_ci((x,), np.mean, B=200, seed=1)
    # two identical copies per cluster: the clustered interval reflects 15 units, not 30
    dup = np.repeat(x[:15], 2)
    wide = bootstrap_ci((dup,), np.mean, B=2000, seed=0, clusters=np.repeat(np.arange(15), 2))
    narrow = bootstrap_ci((dup,), np.mean, B=2000, seed=0)
    assert wide.high - wide.low > 1.2 * (narrow.high - narrow.low)
    with pytest.raises(ValueError):
        bootstrap_ci((x,), np.mean, B=10)
    with pytest.raises(RuntimeError):
        bootstrap_ci((x,), lambda v: float("nan"), B=100)


def _correlated_errors(rng, n_patients, visits, c, sigma=1.0):
    shared = rng.standard_normal(n_patients) * sigma * math.sqrt(c)
    patients, errors = [], []
    for p in range(n_patients):
        e = shared[p] + rng.standard_normal(visits) * sigma * math.sqrt(1 - c)
        patients += [p] * visits
        errors += list(e)
    return patients, errors


@pytest.mark.parametrize("c", [0.0, 0.5, 0.9])
def test_error_correlation_identity(c):
    rng = np.random.default_rng(5)
    ec = error_correlation(*_correlated_errors(rng, 1000, 4, c))
    assert abs(ec.c - c) < 0.05
    assert abs(ec.mse_delta_empirical - ec.mse_delta_model) / ec.mse_delta_model < 0.05
    if c == 0.0:
        assert abs(ec.rmse_delta / ec.rmse - math.sqrt(2)) < 0.03 * math.sqrt(2)


def test_error_correlation_limits():
    ec = error_correlation([0, 0, 0, 1, 1], [2.0, 2.0, 2.0, -1.0, -1.0])
    assert ec.c == pytest.approx(1.0) and ec.mse_delta_empirical == 0.0
    with pytest.raises(ValueError):
        error_correlation([0, 1, 2], [1.0, 2.0, 3.0])


def test_evaluate_report_schema_and_csv(tmp_path):
    rng = np.random.default_rng(6)
    rows = [(f"p{p}", float(t), f"s{s}", float(rng.integers(0, 5)), float(rng.random() * 4))
            for p in range(8) for t in range(3) for s in range(2)]
    table = _table(rows)
    rep = evaluate_tables(table, {"s0": 4, "s1": 4}, B=200, seed=0, baseline=table)
    for block in ("cross_sectional", "longitudinal"):
        for k in ("icc31", "icc21", "rmse", "mae", "pearson"):
            assert set(rep[block][k]) == {"value", "ci_low", "ci_high"}
            assert rep[block][k]["ci_low"] <= rep[block][k]["value"] <= rep[block][k]["ci_high"]
    assert {"c", "mse_delta_empirical", "mse_delta_model", "ttest"} <= set(rep)
    assert rep["ttest"]["degenerate"]
    save_pred_table(tmp_path / "pred.csv", table)
    save_truth_table(tmp_path / "truth.csv", table, {"s0": 4, "s1": 4})
    back, smax = load_tables(tmp_path / "pred.csv", tmp_path / "truth.csv")
    assert smax == {"s0": 4.0, "s1": 4.0}
    assert evaluate_tables(back, smax, B=200, seed=0) == evaluate_tables(table, {"s0": 4, "s1": 4}, B=200, seed=0)
