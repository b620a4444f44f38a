import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progsel.estimators import (
    CANDIDATES,
    DegenerateInputError,
    EstimatorId,
    InvariantViolation,
    LUO_WINDOW,
    PipelineSnapshot,
    UnsupportedEstimatorError,
    alpha,
    batchdne,
    canonical_rank,
    dne,
    dne_query,
    dneseek,
    estimate,
    estimate_series,
    gold_estimate,
    luo,
    luo_remaining_seconds,
    pipeline_view,
    refine_clamp,
    refine_interpolate,
    tgn,
    tgnint,
)
from progsel.plan import OperatorKind as K

S = PipelineSnapshot.simple
TS, F, BS, SEEK = K.TableScan, K.Filter, K.BatchSort, K.IndexSeek


def test_canonical_order():
    assert [e.value for e in EstimatorId] == ["DNE", "TGN", "LUO", "BATCHDNE", "DNESEEK", "TGNINT", "GOLD_GN", "GOLD_BYTES"]
    assert canonical_rank("TGN") == 1


# alpha
def test_alpha_examples():
    assert alpha(S([TS], [1], [25], [100])) == 0.25
    assert alpha(S([TS, TS], [1, 1], [50, 70], [50, 70])) == 1.0
    assert alpha(S([TS, TS], [1, 1], [30, 10], [50, 50])) == pytest.approx(0.4, abs=1e-12)


def test_alpha_zero_driver_estimate():
    with pytest.raises(DegenerateInputError):
        alpha(S([TS], [1], [0], [0]))


# interpolation refinement
def test_refine_interpolate_examples():
    # driver fixes alpha; node 1 is the refined one
    s = S([TS, F], [1, 0], [50, 10], [100, 40])
    assert refine_interpolate(s)[1] == pytest.approx(30.0, abs=1e-12)
    s = S([TS, F], [1, 0], [100, 37], [100, 80])
    assert refine_interpolate(s)[1] == pytest.approx(37.0, abs=1e-12)
    s = S([TS, F], [1, 0], [1e-9, 0], [100, 40])
    assert refine_interpolate(s)[1] == pytest.approx(40.0, abs=1e-9)
    # alpha zero leaves e unchanged
    s = S([TS, F], [1, 0], [0, 0], [100, 40])
    assert refine_interpolate(s)[1] == 40.0


# clamp refinement
def test_refine_clamp_examples():
    assert refine_clamp(S([TS], [1], [0], [120], ub=[100]))[0] == 100
    assert refine_clamp(S([TS], [1], [0], [5], lb=[10]))[0] == 10
    assert refine_clamp(S([TS], [1], [0], [50], lb=[10], ub=[100]))[0] == 50
    with pytest.raises(InvariantViolation):
        refine_clamp(S([TS], [1], [0], [50], lb=[10], ub=[5]))


# DNE
def test_dne_examples():
    assert dne(S([TS], [1], [25], [100])) == 0.25
    assert dne(S([TS, F], [1, 0], [100, 30], [100, 30])) == 1.0
    assert dne(S([TS, TS], [1, 1], [30, 10], [50, 50])) == pytest.approx(0.4, abs=1e-12)
    with pytest.raises(DegenerateInputError):
        dne(S([TS], [1], [0], [0]))


def test_dne_query_examples():
    s = S([TS, TS], [1, 1], [30, 10], [50, 50])
    assert dne_query([dne(s)], [100.0], 100.0) == pytest.approx(dne(s), abs=1e-12)
    assert dne_query([0.5, 0.2], [100, 300], 1000) == pytest.approx(0.11, abs=1e-12)
    assert dne_query([0, 0], [100, 300], 1000) == 0
    with pytest.raises(DegenerateInputError):
        dne_query([0.5], [1], 0)


# TGN
def test_tgn_examples():
    assert tgn(S([TS, F], [1, 0], [50, 10], [100, 40])) == pytest.approx(60 / 140, abs=1e-12)
    assert tgn(S([TS, F], [1, 0], [0, 0], [100, 40])) == 0
    assert tgn(S([TS, F], [1, 0], [100, 40], [100, 40])) == 1.0


# LUO
def _luo_snap(r_in, w_out, t=0.0):
    # sizes in MB, width 1: driver reads 100, root writes 25; bounds pin the refined totals
    return S([TS, F], [1, 0], [r_in, w_out], [100, 25], lb=[100, 25], ub=[100, 25],
             r=[r_in, 0], w=[0, w_out], root=[0, 1], time=t)


def test_luo_examples():
    assert LUO_WINDOW == 10.0
    frac, secs = luo(_luo_snap(40, 10))
    assert frac == pytest.approx(0.4, abs=1e-12) and secs is None
    assert luo_remaining_seconds(75.0, 0.5) == pytest.approx(150.0, abs=1e-9)
    # trailing window: 5 MB processed over the last 10 s
    frac, secs = luo(_luo_snap(40, 10, t=20.0), past=_luo_snap(36, 9, t=10.0))
    assert secs == pytest.approx(75.0 / 0.5, abs=1e-9)


# BATCHDNE / DNESEEK
def test_batchdne_examples():
    s = S([TS, F], [1, 0], [25, 5], [100, 20])
    assert batchdne(s) == dne(s)
    assert batchdne(S([TS, BS], [1, 0], [100, 40], [100, 100])) == pytest.approx(0.7, abs=1e-12)
    assert batchdne(S([TS, BS], [1, 0], [100, 100], [100, 100])) == 1.0


def test_dneseek_examples():
    s = S([TS, F], [1, 0], [25, 5], [100, 20])
    assert dneseek(s) == dne(s)
    assert dneseek(S([TS, SEEK], [1, 0], [50, 200], [100, 400])) == pytest.approx(0.5, abs=1e-12)
    # estimate below the count is raised to it by the lower bound
    s = S([TS, SEEK], [1, 0], [50, 500], [100, 400], lb=[50, 500])
    assert 0 <= dneseek(s) <= 1


# TGNINT
def test_tgnint_examples():
    # sum k = 60, dne = 0.5, sum e = 140
    s = S([TS, F], [1, 0], [50, 10], [100, 40])
    assert dne(s) == 0.5
    assert tgnint(s) == pytest.approx(60 / 130, abs=1e-12)
    assert tgnint(S([TS, F], [1, 0], [100, 10], [100, 40])) == 1.0
    assert tgnint(S([TS, F], [1, 0], [0, 0], [100, 40])) == 0


# gold models
def test_gold_endpoints(small_workload):
    for tr in small_workload[:4]:
        last = len(tr) - 1
        for m in ("GOLD_GN", "GOLD_BYTES"):
            assert gold_estimate(tr, 0, m) == 0
            assert gold_estimate(tr, last, m) == pytest.approx(1.0, abs=1e-12)


# dispatch
def test_estimate_dispatch():
    s = S([TS, F], [1, 0], [25, 5], [100, 20])
    assert estimate(EstimatorId.DNE, s) == dne(s)
    assert estimate("BATCHDNE", s) == dne(s)
    with pytest.raises(UnsupportedEstimatorError):
        estimate("PMAX", s)


# properties
@st.composite
def snapshots(draw):
    n = draw(st.integers(1, 5))
    e = np.array(draw(st.lists(st.floats(1, 1e4), min_size=n, max_size=n)))
    k = np.array([draw(st.floats(0, 2 * v)) for v in e])
    drv = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    drv[0] = True
    kinds = draw(st.lists(st.sampled_from([TS, F, BS, SEEK, K.HashJoin]), min_size=n, max_size=n))
    return S(kinds, drv, k, e, r=k, w=k)


@settings(max_examples=200, deadline=None)
@given(snapshots())
def test_outputs_are_fractions(s):
    for est in CANDIDATES:
        v = estimate(est, s, strict=False)
        assert np.isnan(v) or 0.0 <= v <= 1.0


@settings(max_examples=200, deadline=None)
@given(snapshots())
def test_identities_without_special_nodes(s):
    if not s.kind_mask(BS).any():
        assert batchdne(s) == dne(s)
    if not s.kind_mask(SEEK).any():
        assert dneseek(s) == dne(s)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1, 1e4), min_size=2, max_size=5), st.floats(0.01, 0.99), st.data())
def test_tgnint_equals_tgn_when_premise_holds(e, d, data):
    # choose k so that sum k = d * sum e and the driver ratio equals d
    e = np.array(e)
    k = e * d
    s = S([TS] + [F] * (len(e) - 1), [1] + [0] * (len(e) - 1), k, e)
    assert dne(s) == pytest.approx(d, rel=1e-12)
    assert tgnint(s) == pytest.approx(tgn(s), rel=1e-9, abs=1e-12)


def test_dne_monotone_with_fixed_driver_estimates(small_workload):
    for tr in small_workload:
        for p in tr.pipelines:
            view = pipeline_view(tr, p.id)
            e = view.e[:, view.driver]
            if not np.all(e == e[0]):
                continue
            d = estimate_series(view, [EstimatorId.DNE])[EstimatorId.DNE]
            assert np.all(np.diff(d) >= -1e-12)
