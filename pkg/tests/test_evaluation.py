import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progsel.estimators import CANDIDATES, EstimatorId as E
from progsel.evaluation import (
    ORACLE,
    SELECTION,
    EvaluationError,
    PipelineResult,
    lp_error,
    near_optimality_table,
    oracle_policy,
    percent_optimal,
    ratio_table,
)
from progsel.experiment import (
    ExperimentConfig,
    FAMILIES,
    _cv_mse,
    greedy_feature_selection,
    run_experiment,
    simulate_families,
)
from progsel.mart import MartParams, TrainingError


def result(errors: dict, chosen=None, qid="q") -> PipelineResult:
    return PipelineResult(qid, 0, "f", errors, dict(errors), {SELECTION: chosen} if chosen else {})


def test_lp_error_examples():
    t = np.array([0.2, 0.5, 0.9])
    assert lp_error(t, t, 1) == 0.0
    assert lp_error(t + 0.05, t, 1) == pytest.approx(0.05, abs=1e-12)
    assert lp_error(t + 0.05, t, 2) == pytest.approx(0.05, abs=1e-12)
    est = t + np.array([0.0, 0.1, 0.0])
    assert lp_error(est, t, 1) == pytest.approx(0.1 / 3, abs=1e-9)
    assert lp_error(est, t, 2) == pytest.approx(math.sqrt(0.01 / 3), abs=1e-9)
    assert lp_error(est, t, 1, normalize="sum") == pytest.approx(0.1, abs=1e-9)


def test_lp_error_rejects_bad_input():
    with pytest.raises(EvaluationError):
        lp_error([], [])
    with pytest.raises(EvaluationError):
        lp_error([0.1], [0.1, 0.2])
    with pytest.raises(EvaluationError):
        lp_error([0.1], [0.1], p=3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=40))
def test_l1_matches_plain_summation(pairs):
    total = 0.0
    for a, b in pairs:
        total += abs(a - b)
    est, tru = zip(*pairs)
    assert lp_error(est, tru, 1) == pytest.approx(total / len(pairs), rel=1e-12, abs=1e-15)


def test_oracle_policy_examples():
    assert oracle_policy({E.DNE: 0.1, E.TGN: 0.05, E.LUO: 0.2}) == (0.05, E.TGN)
    assert oracle_policy({E.LUO: 0.3}) == (0.3, E.LUO)
    assert oracle_policy({E.LUO: 0.1, E.TGN: 0.1, E.DNE: 0.1}) == (0.1, E.DNE)
    with pytest.raises(EvaluationError):
        oracle_policy({E.DNE: float("nan")})


def test_percent_optimal_examples():
    rs = [result({E.DNE: 0.1, E.TGN: 0.2}, E.DNE), result({E.DNE: 0.3, E.TGN: 0.2}, E.DNE),
          result({E.DNE: 0.1, E.TGN: 0.1}, E.TGN)]
    assert percent_optimal(rs, ORACLE) == 1.0
    assert percent_optimal(rs, SELECTION) == pytest.approx(2 / 3, abs=1e-12)
    never = [result({E.DNE: 0.1, E.TGN: 0.2}), result({E.DNE: 0.05, E.TGN: 0.5})]
    assert percent_optimal(never, E.TGN.value) == 0.0


def test_ratio_table_examples():
    r = result({E.DNE: 0.05, E.TGN: 0.3}, E.TGN)
    table, excluded = ratio_table([r], [ORACLE, SELECTION])
    assert excluded == 0
    assert table[ORACLE] == {2.0: 0.0, 5.0: 0.0, 10.0: 0.0}
    assert table[SELECTION] == {2.0: 1.0, 5.0: 1.0, 10.0: 0.0}
    with pytest.raises(EvaluationError):
        ratio_table([r], [ORACLE], thresholds=(10, 5, 2))


def test_ratio_table_excludes_tiny_minimum():
    rs = [result({E.DNE: 0.0, E.TGN: 0.3}), result({E.DNE: 0.1, E.TGN: 0.3})]
    table, excluded = ratio_table(rs, [E.TGN.value])
    assert excluded == 1
    assert table[E.TGN.value][2.0] == 1.0


def test_near_optimality_examples():
    t = near_optimality_table([result({E.DNE: 0.100, E.TGN: 0.105})], (E.DNE, E.TGN))
    assert t[E.TGN][0] == 1.0 and t[E.DNE][1] == 0.0
    t = near_optimality_table([result({E.DNE: 0.10, E.TGN: 0.30})], (E.DNE, E.TGN))
    assert t[E.DNE] == (1.0, 1.0)
    assert t[E.TGN] == (0.0, 0.0)
    t = near_optimality_table([result({c: 0.2 for c in CANDIDATES})])
    assert all(v == (1.0, 0.0) for v in t.values())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(0, 2), min_size=6, max_size=6), min_size=1, max_size=20),
       st.lists(st.integers(0, 5), min_size=20, max_size=20))
def test_oracle_sandwich_and_ratio_monotone(rows, picks):
    rs = [result(dict(zip(CANDIDATES, r)), CANDIDATES[k]) for r, k in zip(rows, picks)]
    for r in rs:
        assert r.policy_error(ORACLE) <= r.policy_error(SELECTION) <= max(r.errors.values())
    table, excluded = ratio_table(rs, [ORACLE, SELECTION])
    if excluded == len(rs):
        assert all(np.isnan(v) for v in table[ORACLE].values())
        return
    assert all(v == 0.0 for v in table[ORACLE].values())
    vals = list(table[SELECTION].values())
    assert all(a >= b for a, b in zip(vals, vals[1:]) )
    assert percent_optimal(rs, ORACLE) == 1.0


def greedy_data(seed=0, n=200):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 4))
    return X, rng


def test_greedy_picks_informative_feature_first():
    X, rng = greedy_data()
    y = np.sin(6 * X[:, 2]) + rng.normal(scale=0.05, size=len(X))
    steps = greedy_feature_selection(X, y, 1, iterations=20)
    params = MartParams(iterations=20, seed=0)
    folds = np.arange(len(y)) % 2
    np.random.default_rng(0).shuffle(folds)
    brute = [_cv_mse(X[:, [j]], y, folds, params) for j in range(4)]
    assert steps[0].index == int(np.argmin(brute)) == 2
    assert steps[0].mse == brute[2]


def test_greedy_duplicate_adds_nothing():
    X, rng = greedy_data(1)
    X[:, 1] = X[:, 0]
    y = 2 * X[:, 0] + rng.normal(scale=0.05, size=len(X))
    steps = greedy_feature_selection(X[:, :2], y, 2, names=["a", "a_copy"], iterations=20)
    assert steps[0].feature == "a"
    assert abs(steps[1].mse - steps[0].mse) <= 1e-12 * steps[0].mse


def test_greedy_two_rounds_order_by_gain():
    X, rng = greedy_data(2)
    X = X[:, :2]
    y = 3 * X[:, 1] + 0.5 * X[:, 0] + rng.normal(scale=0.05, size=len(X))
    steps = greedy_feature_selection(X, y, 2, iterations=20)
    assert sorted(s.index for s in steps) == [0, 1]
    params = MartParams(iterations=20, seed=0)
    folds = np.arange(len(y)) % 2
    np.random.default_rng(0).shuffle(folds)
    single = [_cv_mse(X[:, [j]], y, folds, params) for j in range(2)]
    assert steps[0].index == int(np.argmin(single)) == 1
    assert steps[1].mse <= steps[0].mse


def test_greedy_rejects_too_many_rounds():
    with pytest.raises(TrainingError):
        greedy_feature_selection(np.zeros((10, 2)), np.zeros(10), 3)
    with pytest.raises(TrainingError):
        greedy_feature_selection(np.zeros((10, 2)), np.zeros(10), 0)


@pytest.fixture(scope="module")
def small_lofo():
    cfg = ExperimentConfig(params=MartParams(iterations=8), query_count=6)
    traces = simulate_families(cfg.family_configs())
    return cfg, traces, run_experiment(cfg, traces)


def test_lofo_fold_count_and_oracle_bound(small_lofo):
    _, traces, report = small_lofo
    assert [f.family_id for f in report.folds] == [f.family_id for f in FAMILIES]
    for f in report.folds:
        n = sum(len(t.pipelines) for t in traces[f.family_id])
        assert len(f.results) + f.excluded == n
        assert all(r.policy_error(ORACLE) <= r.policy_error(SELECTION) for r in f.results)
    for row in report.fold_summary():
        assert row["oracle_l1"] <= row["selection_l1"]


def test_report_tables_counts(small_lofo):
    _, _, report = small_lofo
    tables = report.tables()
    n = len(report.results)
    pol = report.policies()
    assert len(tables["pipelines.csv"].splitlines()) == 1 + n * len(pol)
    summary = [l.split(",") for l in tables["summary.csv"].splitlines()]
    col = summary[0].index("pipelines")
    all_rows = [r for r in summary[1:] if r[0] == "ALL"]
    assert len(all_rows) == len(pol) and all(int(r[col]) == n for r in all_rows)
    assert len(tables["series.csv"].splitlines()) == 1 + len(report.series)


def test_lofo_deterministic(small_lofo):
    cfg, traces, report = small_lofo
    again = run_experiment(cfg, traces)
    assert again.tables() == report.tables()


def test_missing_held_out_family(small_lofo):
    cfg, traces, _ = small_lofo
    with pytest.raises(EvaluationError):
        run_experiment(ExperimentConfig(held_out=("nope",), params=cfg.params, query_count=6), traces)
