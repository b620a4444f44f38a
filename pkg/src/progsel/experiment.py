"""Group-aware training and evaluation runs, report files and greedy feature analysis."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .estimators import CANDIDATES, EstimatorId, estimate_series, pipeline_view
from .evaluation import (
    ORACLE,
    SELECTION,
    STATIC,
    EvaluationError,
    PipelineResult,
    best_single,
    mean_policy_error,
    near_optimality_table,
    pipeline_errors,
    policies_of,
    ratio_table,
    summary_rows,
    valid_results,
)
from .mart import MartParams, TrainingError, train_mart
from .selection import SelectionModel, build_training_set, select_online, train_selection
from .sim import Trace, WorkloadConfig, execute_all, generate_workload, true_progress_series

log = logging.getLogger(__name__)

# Five families spread over the skew, size and plan-design axes.
FAMILIES: tuple[WorkloadConfig, ...] = (
    WorkloadConfig(family_id="baseline", seed=101),
    WorkloadConfig(family_id="skewed", skew_z=1.5, seed=202),
    WorkloadConfig(family_id="large", scale=4.0, seed=303),
    WorkloadConfig(
        family_id="nested",
        seed=404,
        operator_mix={
            "nl_seek": 2, "nl_seek_agg": 2, "batch_nl": 2, "batch_nl_agg": 2, "nl_top": 1,
            "hash_join": 1, "merge_join": 1, "scan_filter": 1,
        },
    ),
    WorkloadConfig(family_id="misestimated", estimate_error_sigma=1.2, drift_sigma=1.5, seed=505),
)


@dataclass
class ExperimentConfig:
    families: tuple = FAMILIES
    held_out: Optional[tuple] = None  # family ids evaluated as test folds; None means every family
    params: MartParams = field(default_factory=MartParams)
    interval: float = 1.0
    candidates: tuple = CANDIDATES
    query_count: Optional[int] = None  # overrides every family's query_count when set

    def family_configs(self) -> list[WorkloadConfig]:
        if self.query_count is None:
            return list(self.families)
        return [replace(f, query_count=self.query_count) for f in self.families]


@dataclass
class SeriesRow:
    query_id: str
    pipeline_id: int
    time_fraction: float
    truth: float
    estimates: dict
    selected: float
    selected_id: EstimatorId


@dataclass
class FoldReport:
    family_id: str
    results: list
    model: SelectionModel
    excluded: int = 0  # test pipelines with an undefined candidate

    @property
    def best_single(self) -> tuple[EstimatorId, float]:
        return best_single(self.results)


@dataclass
class ErrorReport:
    folds: list
    series: list = field(default_factory=list)
    candidates: tuple = CANDIDATES

    @property
    def results(self) -> list[PipelineResult]:
        return [r for f in self.folds for r in f.results]

    def policies(self) -> list[str]:
        return policies_of(self.results, self.candidates)

    def fold_summary(self) -> list[dict]:
        rows = []
        for f in self.folds:
            best, best_err = f.best_single
            rows.append({
                "fold": f.family_id,
                "pipelines": len(f.results),
                "excluded": f.excluded,
                "selection_l1": mean_policy_error(f.results, SELECTION),
                "static_l1": mean_policy_error(f.results, STATIC),
                "oracle_l1": mean_policy_error(f.results, ORACLE),
                "best_single": best.value,
                "best_single_l1": best_err,
            })
        return rows

    def tables(self) -> dict[str, str]:
        """Report file name -> CSV text."""
        pol = self.policies()
        out = {}
        rows = []
        for f in self.folds:
            for r in summary_rows(f.results, pol):
                rows.append({"fold": f.family_id, **r})
        for r in summary_rows(self.results, pol):
            rows.append({"fold": "ALL", **r})
        out["summary.csv"] = _csv(rows)
        out["folds.csv"] = _csv(self.fold_summary())
        ratios, excluded = ratio_table(self.results, pol)
        out["ratio.csv"] = _csv(
            [{"policy": p, **{f"gt_{t:g}x": v for t, v in ratios[p].items()}, "excluded": excluded} for p in pol]
        )
        near = near_optimality_table(self.results, self.candidates)
        out["near_optimal.csv"] = _csv(
            [{"estimator": c.value, "almost_optimal": a, "outperforms": b} for c, (a, b) in near.items()]
        )
        pipe_rows = []
        for f in self.folds:
            for r in f.results:
                for p in pol:
                    chosen = r.choices.get(p, p)
                    pipe_rows.append({
                        "fold": f.family_id,
                        "query_id": r.query_id,
                        "pipeline_id": r.pipeline_id,
                        "policy": p,
                        "estimator": chosen.value if isinstance(chosen, EstimatorId) else chosen,
                        "l1": r.policy_error(p, 1),
                        "l2": r.policy_error(p, 2),
                    })
        out["pipelines.csv"] = _csv(pipe_rows)
        out["series.csv"] = _csv([
            {
                "query_id": s.query_id,
                "pipeline_id": s.pipeline_id,
                "time_fraction": s.time_fraction,
                "true": s.truth,
                **{c.value: s.estimates[c] for c in self.candidates},
                "selected": s.selected,
                "selected_id": s.selected_id.value,
            }
            for s in self.series
        ])
        return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in keys])
    return buf.getvalue()


def evaluate_traces(model: SelectionModel, traces: Sequence[Trace], with_series: bool = True
                    ) -> tuple[list[PipelineResult], int, list[SeriesRow]]:
    """Score every pipeline of the test traces under each candidate and policy.

    Pipelines where some candidate is undefined are excluded and counted.
    """
    results, series, excluded = [], [], 0
    cands = model.candidates
    for tr in traces:
        for p in tr.pipelines:
            errs = pipeline_errors(tr, p.id, cands, p=1)
            if not all(np.isfinite(v) for v in errs.values()):
                excluded += 1
                continue
            errs2 = pipeline_errors(tr, p.id, cands, p=2)
            static = select_online(model, tr, p.id, static_only=True)
            sched = select_online(model, tr, p.id)
            res = PipelineResult(
                tr.query_id, p.id, tr.family_id, errs, errs2,
                {STATIC: static.final, SELECTION: sched.final}, len(tr.pipeline_window(p.id)),
            )
            results.append(res)
            if with_series:
                view = pipeline_view(tr, p.id)
                est = estimate_series(view, cands, clamp=True)
                truth = true_progress_series(tr, p.id)
                t = np.asarray(view.time, dtype=float)
                span = t[-1] - t[0]
                for j in range(len(truth)):
                    sel = sched.active(j)
                    series.append(SeriesRow(
                        tr.query_id, p.id, float((t[j] - t[0]) / span) if span > 0 else 1.0,
                        float(truth[j]), {c: float(est[c][j]) for c in cands}, float(est[sel][j]), sel,
                    ))
    return results, excluded, series


def simulate_families(configs: Sequence[WorkloadConfig], interval: float = 1.0) -> dict[str, list[Trace]]:
    return {c.family_id: execute_all(generate_workload(c), interval) for c in configs}


def run_experiment(config: ExperimentConfig, traces: Optional[dict] = None, with_series: bool = True) -> ErrorReport:
    """Leave-one-family-out: train on the other families, evaluate on the held-out one."""
    fams = config.family_configs()
    if traces is None:
        traces = simulate_families(fams, config.interval)
    ids = [f.family_id for f in fams]
    held = list(config.held_out) if config.held_out is not None else ids
    for h in held:
        if h not in traces:
            raise EvaluationError(f"held-out family {h!r} is not in the workload")
    folds, series = [], []
    for h in held:
        train = [tr for fid in ids if fid != h for tr in traces[fid]]
        examples = build_training_set(train, config.candidates)
        log.info("fold %s: %d training examples", h, len(examples))
        model = train_selection(examples, config.params, config.candidates)
        results, excluded, s = evaluate_traces(model, traces[h], with_series)
        folds.append(FoldReport(h, results, model, excluded))
        series.extend(s)
    return ErrorReport(folds, series, tuple(config.candidates))


@dataclass
class GreedyStep:
    feature: str
    index: int
    mse: float


def _cv_mse(X: np.ndarray, y: np.ndarray, folds: np.ndarray, params: MartParams) -> float:
    total = 0.0
    for k in np.unique(folds):
        tr, te = folds != k, folds == k
        m = train_mart(X[tr], y[tr], params)
        total += float(np.sum((m.predict(X[te]) - y[te]) ** 2))
    return total / len(y)


def greedy_feature_selection(X, y, rounds: int, names: Optional[Sequence[str]] = None, iterations: int = 50,
                             n_folds: int = 2, seed: int = 0, params: Optional[MartParams] = None) -> list[GreedyStep]:
    """Forward selection by cross-validated MSE of a reduced-budget boosted model."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[1] < 1:
        raise TrainingError("need at least one feature")
    if rounds < 1 or rounds > X.shape[1]:
        raise TrainingError(f"rounds must be in [1, {X.shape[1]}]")
    names = list(names) if names is not None else [f"f{j}" for j in range(X.shape[1])]
    params = params or MartParams(iterations=iterations, seed=seed)
    rng = np.random.default_rng(seed)
    folds = np.arange(len(y)) % n_folds
    rng.shuffle(folds)
    chosen: list[int] = []
    steps = []
    for _ in range(rounds):
        best = None
        for j in range(X.shape[1]):
            if j in chosen:
                continue
            mse = _cv_mse(X[:, chosen + [j]], y, folds, params)
            if best is None or mse < best[0]:
                best = (mse, j)
        chosen.append(best[1])
        steps.append(GreedyStep(names[best[1]], best[1], best[0]))
    return steps
