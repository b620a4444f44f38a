"""Error metrics and comparison tables for progress estimators and selection policies."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .estimators import CANDIDATES, EstimatorId, canonical_rank, estimate_series, pipeline_view
from .sim import Trace, true_progress_series

RATIO_THRESHOLDS = (2.0, 5.0, 10.0)
RATIO_MIN_ERROR = 1e-6
NEAR_ABS = 0.01
NEAR_REL = 0.01

ORACLE = "ORACLE"
STATIC = "STATIC"
SELECTION = "SELECTION"


class EvaluationError(ValueError):
    pass


def lp_error(estimates, truth, p: int = 1, normalize: str = "mean") -> float:
    """L_p distance between an estimate series and true progress.

    ``normalize="mean"`` averages over observations before the root;
    ``"sum"`` keeps the raw sum.
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise EvaluationError("estimate and truth series differ in length")
    if est.size == 0:
        raise EvaluationError("empty observation set")
    if p not in (1, 2):
        raise EvaluationError("p must be 1 or 2")
    dev = np.abs(est - tru) ** p
    total = np.sum(dev) if normalize == "sum" else np.mean(dev)
    return float(total ** (1.0 / p))


def pipeline_errors(trace: Trace, pipeline_id: int, estimators: Sequence[EstimatorId] = CANDIDATES,
                    p: int = 1, clamp: bool = True, normalize: str = "mean") -> dict[EstimatorId, float]:
    """Error of every estimator over the pipeline's execution window; NaN when undefined somewhere."""
    view = pipeline_view(trace, pipeline_id)
    truth = true_progress_series(trace, pipeline_id)
    series = estimate_series(view, estimators, clamp=clamp)
    out = {}
    for est, s in series.items():
        out[est] = float("nan") if np.any(~np.isfinite(s)) else lp_error(s, truth, p, normalize)
    return out


def oracle_policy(errors: Mapping[EstimatorId, float]) -> tuple[float, EstimatorId]:
    """Minimum error and its estimator; ties go to the canonical order. NaN entries are skipped."""
    ranked = sorted(
        ((v, canonical_rank(k), EstimatorId(k)) for k, v in errors.items() if np.isfinite(v)),
        key=lambda x: (x[0], x[1]),
    )
    if not ranked:
        raise EvaluationError("no candidate with a defined error")
    return float(ranked[0][0]), ranked[0][2]


@dataclass
class PipelineResult:
    """Per-pipeline candidate errors and the estimator each policy picked."""

    query_id: str
    pipeline_id: int
    family_id: str
    errors: dict
    errors_l2: dict = field(default_factory=dict)
    choices: dict = field(default_factory=dict)
    n_obs: int = 0

    @property
    def min_error(self) -> float:
        return oracle_policy(self.errors)[0]

    def policy_error(self, policy: str, p: int = 1) -> float:
        table = self.errors if p == 1 else self.errors_l2
        if policy == ORACLE:
            est = oracle_policy(self.errors)[1]
        elif policy in self.choices:
            est = self.choices[policy]
        else:
            est = EstimatorId(policy)
        return float(table[EstimatorId(est)])


def policies_of(results: Sequence[PipelineResult], candidates: Sequence[EstimatorId] = CANDIDATES) -> list[str]:
    extra = []
    for r in results:
        for name in r.choices:
            if name not in extra:
                extra.append(name)
    return [c.value for c in candidates] + [ORACLE] + extra


def _optimal(r: PipelineResult, policy: str) -> bool:
    return r.policy_error(policy) <= r.min_error


def percent_optimal(results: Sequence[PipelineResult], policy: str) -> float:
    """Fraction of pipelines where the policy's estimator attains the minimum error."""
    if not results:
        return float("nan")
    return float(np.mean([_optimal(r, policy) for r in results]))


def ratio_table(results: Sequence[PipelineResult], policies: Sequence[str],
                thresholds: Sequence[float] = RATIO_THRESHOLDS,
                min_error: float = RATIO_MIN_ERROR) -> tuple[dict[str, dict[float, float]], int]:
    """Fraction of pipelines whose error exceeds ``threshold`` times the minimum.

    Pipelines whose minimum error is below ``min_error`` are excluded; the
    number excluded is returned alongside the table.
    """
    thresholds = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise EvaluationError("thresholds must be strictly ascending")
    kept = [r for r in results if r.min_error >= min_error]
    excluded = len(results) - len(kept)
    table: dict[str, dict[float, float]] = {}
    for pol in policies:
        ratios = np.array([r.policy_error(pol) / r.min_error for r in kept])
        table[pol] = {t: (float(np.mean(ratios > t)) if len(kept) else float("nan")) for t in thresholds}
    return table, excluded


def near_optimality_table(results: Sequence[PipelineResult], candidates: Sequence[EstimatorId] = CANDIDATES,
                          abs_tol: float = NEAR_ABS, rel_tol: float = NEAR_REL) -> dict[EstimatorId, tuple[float, float]]:
    """Per estimator: (almost-optimal fraction, significantly-outperforms fraction)."""
    almost = {c: 0 for c in candidates}
    beats = {c: 0 for c in candidates}
    for r in results:
        errs = {c: r.errors[c] for c in candidates}
        best = min(errs.values())
        for c in candidates:
            v = errs[c]
            if v <= best or v - best < abs_tol or (best > 0 and (v - best) / best < rel_tol):
                almost[c] += 1
            others = [errs[o] for o in candidates if o != c]
            if others:
                nxt = min(others)
                if v < nxt and nxt - v > abs_tol and (v == 0 or (nxt - v) / v > rel_tol):
                    beats[c] += 1
    n = max(len(results), 1)
    return {c: (almost[c] / n, beats[c] / n) for c in candidates}


def mean_policy_error(results: Sequence[PipelineResult], policy: str, p: int = 1) -> float:
    if not results:
        return float("nan")
    return float(np.mean([r.policy_error(policy, p) for r in results]))


def best_single(results: Sequence[PipelineResult], candidates: Sequence[EstimatorId] = CANDIDATES) -> tuple[EstimatorId, float]:
    """Candidate with the lowest mean error over the given pipelines."""
    scores = [(mean_policy_error(results, c.value), canonical_rank(c), c) for c in candidates]
    v, _, c = min(scores)
    return c, v


def valid_results(results: Iterable[PipelineResult], candidates: Sequence[EstimatorId] = CANDIDATES) -> list[PipelineResult]:
    """Pipelines where every candidate has a defined error."""
    return [r for r in results if all(np.isfinite(r.errors.get(c, np.nan)) for c in candidates)]


def summary_rows(results: Sequence[PipelineResult], policies: Sequence[str]) -> list[dict]:
    ratios, excluded = ratio_table(results, policies)
    rows = []
    for pol in policies:
        row = {
            "policy": pol,
            "pipelines": len(results),
            "mean_l1": mean_policy_error(results, pol, 1),
            "mean_l2": mean_policy_error(results, pol, 2),
            "percent_optimal": percent_optimal(results, pol),
            "ratio_excluded": excluded,
        }
        for t, v in ratios[pol].items():
            row[f"ratio_gt_{t:g}x"] = v
        rows.append(row)
    return rows


def find_policy(results: Sequence[PipelineResult], name: str) -> Optional[str]:
    return name if any(name in r.choices for r in results) else None
