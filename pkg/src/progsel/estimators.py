"""Progress estimators and online cardinality refinement.

Every operation works on a :class:`PipelineSnapshot` whose counter arrays have
the pipeline's nodes on the last axis. A leading axis (observations) is
allowed, so the same functions evaluate one snapshot or a whole series.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .plan import OperatorKind, Pipeline
from .sim import Trace


class EstimatorId(str, enum.Enum):
    DNE = "DNE"
    TGN = "TGN"
    LUO = "LUO"
    BATCHDNE = "BATCHDNE"
    DNESEEK = "DNESEEK"
    TGNINT = "TGNINT"
    GOLD_GN = "GOLD_GN"
    GOLD_BYTES = "GOLD_BYTES"


CANONICAL_ORDER: tuple[EstimatorId, ...] = tuple(EstimatorId)
CANDIDATES: tuple[EstimatorId, ...] = CANONICAL_ORDER[:6]
GOLD = (EstimatorId.GOLD_GN, EstimatorId.GOLD_BYTES)

LUO_WINDOW = 10.0

# refinement applied before evaluating each estimator
REFINEMENT = {
    EstimatorId.DNE: "clamp",
    EstimatorId.BATCHDNE: "clamp",
    EstimatorId.DNESEEK: "clamp",
    EstimatorId.TGN: "clamp",
    EstimatorId.LUO: "interpolate",
    EstimatorId.TGNINT: "interpolate",
}


class DegenerateInputError(ValueError):
    """A zero denominator makes the estimator undefined."""


class UnsupportedEstimatorError(ValueError):
    pass


class InvariantViolation(ValueError):
    pass


def canonical_rank(est) -> int:
    return CANONICAL_ORDER.index(EstimatorId(est))


@dataclass(frozen=True)
class PipelineSnapshot:
    """Counters of one pipeline at one or more observations.

    ``input_e``/``input_width`` describe what each driver reads: its own rows
    for scans, or the output of the finished pipeline beneath it.
    """

    kinds: tuple[OperatorKind, ...]
    driver: np.ndarray
    root: np.ndarray
    k: np.ndarray
    e: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    r: np.ndarray
    w: np.ndarray
    width: np.ndarray
    time: np.ndarray | float = 0.0
    input_e: Optional[np.ndarray] = None
    input_width: Optional[np.ndarray] = None
    external: Optional[np.ndarray] = None
    truth_n: Optional[np.ndarray] = None
    truth_bytes: Optional[np.ndarray] = None

    @classmethod
    def simple(cls, kinds, driver, k, e, lb=None, ub=None, r=None, w=None, width=None, root=None, time=0.0):
        """Convenience constructor with permissive defaults (bounds 0..inf)."""
        k = np.asarray(k, dtype=float)
        e = np.asarray(e, dtype=float)
        n = k.shape[-1]
        kinds = tuple(OperatorKind(x) if not isinstance(x, OperatorKind) else x for x in kinds)
        driver = np.asarray(driver, dtype=bool)
        if root is None:
            root = np.zeros(n, dtype=bool)
            root[0] = True
        return cls(
            kinds=kinds,
            driver=driver,
            root=np.asarray(root, dtype=bool),
            k=k,
            e=e,
            lb=np.zeros_like(e) if lb is None else np.asarray(lb, dtype=float),
            ub=np.full_like(e, np.inf) if ub is None else np.asarray(ub, dtype=float),
            r=np.zeros_like(k) if r is None else np.asarray(r, dtype=float),
            w=np.zeros_like(k) if w is None else np.asarray(w, dtype=float),
            width=np.ones(n) if width is None else np.asarray(width, dtype=float),
            time=time,
        )

    def at(self, t: int) -> "PipelineSnapshot":
        """Select one observation from a series snapshot."""
        def pick(a):
            return a[t] if a is not None and np.ndim(a) == 2 else a

        return replace(
            self,
            k=self.k[t], e=self.e[t], lb=self.lb[t], ub=self.ub[t], r=self.r[t], w=self.w[t],
            time=float(np.asarray(self.time)[t]),
            input_e=pick(self.input_e),
        )

    def kind_mask(self, kind: OperatorKind) -> np.ndarray:
        return np.array([k is kind for k in self.kinds], dtype=bool)


def pipeline_view(trace: Trace, pipeline_id: int, window: bool = True) -> PipelineSnapshot:
    """Series snapshot of one pipeline over its execution window (or the full trace)."""
    p: Pipeline = trace.pipelines[pipeline_id]
    cols = trace.columns(p.nodes)
    rows = trace.pipeline_window(pipeline_id) if window else np.arange(len(trace))
    plan = trace.plan
    members = set(p.nodes)
    kinds = tuple(plan[n].kind for n in p.nodes)
    driver = np.array([n in p.drivers for n in p.nodes])
    root = np.array([n == p.root for n in p.nodes])
    width = np.array([plan[n].est_row_width for n in p.nodes])

    e = trace.e[np.ix_(rows, cols)]
    input_e = e.copy()
    input_width = width.copy()
    external = np.zeros(len(p.nodes), dtype=bool)
    for j, nid in enumerate(p.nodes):
        node = plan[nid]
        outside = [c for c in node.children if c not in members]
        if driver[j] and outside and node.kind is not OperatorKind.HashAggregate:
            c = outside[0]
            input_e[:, j] = trace.e[rows, trace.index[c]]
            input_width[j] = plan[c].est_row_width
            external[j] = True
    return PipelineSnapshot(
        kinds=kinds,
        driver=driver,
        root=root,
        k=trace.k[np.ix_(rows, cols)].astype(float),
        e=e,
        lb=trace.lb[np.ix_(rows, cols)],
        ub=trace.ub[np.ix_(rows, cols)],
        r=trace.r[np.ix_(rows, cols)],
        w=trace.w[np.ix_(rows, cols)],
        width=width,
        time=trace.times[rows],
        input_e=input_e,
        input_width=input_width,
        external=external,
        truth_n=trace.truth_n[cols].astype(float),
        truth_bytes=trace.truth_bytes[cols],
    )


# ---------------------------------------------------------------------------
# helpers


def _ratio(num, den, strict: bool, what: str):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    bad = den <= 0
    if strict and np.any(bad):
        raise DegenerateInputError(f"{what}: zero denominator")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(bad, np.nan, num / np.where(bad, 1.0, den))
    return out if out.ndim else float(out)


def _clip01(x, clamp: bool):
    if not clamp:
        return x
    out = np.clip(x, 0.0, 1.0)
    return out if np.ndim(out) else float(out)


def _sum(a, mask):
    return np.sum(np.where(mask, a, 0.0), axis=-1)


# ---------------------------------------------------------------------------
# refinement


def alpha(snap: PipelineSnapshot, strict: bool = True):
    """Fraction of the driver input consumed, in [0, 1]."""
    a = _ratio(_sum(snap.k, snap.driver), _sum(snap.e, snap.driver), strict, "alpha")
    return _clip01(a, True)


def refine_clamp(snap: PipelineSnapshot) -> np.ndarray:
    """Move every estimate to its nearest bound when it falls outside them."""
    if np.any(snap.lb > snap.ub):
        raise InvariantViolation("lower bound exceeds upper bound")
    return np.minimum(snap.ub, np.maximum(snap.lb, snap.e))


def refine_interpolate(snap: PipelineSnapshot, a=None) -> np.ndarray:
    """Blend the extrapolated count ``k / alpha`` with the current estimate.

    ``alpha * (k / alpha) + (1 - alpha) * e == k + (1 - alpha) * e``. Nodes
    keep their estimate while ``alpha`` is undefined or zero.
    """
    if a is None:
        a = alpha(snap, strict=False)
    a = np.asarray(a, dtype=float)[..., None] if np.ndim(a) else np.asarray(a, dtype=float)
    blended = snap.k + (1.0 - np.nan_to_num(a)) * snap.e
    ok = np.isfinite(a) & (a > 0)
    e_new = np.where(ok, blended, snap.e)
    return np.minimum(snap.ub, np.maximum(snap.lb, e_new))


def refined(snap: PipelineSnapshot, mode: str) -> np.ndarray:
    if mode == "clamp":
        return refine_clamp(snap)
    if mode == "interpolate":
        return refine_interpolate(snap)
    if mode == "none":
        return np.asarray(snap.e, dtype=float)
    raise ValueError(f"unknown refinement mode {mode!r}")


# ---------------------------------------------------------------------------
# estimators


def _driver_ratio(snap, mask, refine, clamp, strict, what):
    e = refined(snap, refine)
    return _clip01(_ratio(_sum(snap.k, mask), _sum(e, mask), strict, what), clamp)


def dne(snap: PipelineSnapshot, refine: str = "clamp", clamp: bool = True, strict: bool = True):
    return _driver_ratio(snap, snap.driver, refine, clamp, strict, "DNE")


def batchdne(snap: PipelineSnapshot, refine: str = "clamp", clamp: bool = True, strict: bool = True):
    mask = snap.driver | snap.kind_mask(OperatorKind.BatchSort)
    return _driver_ratio(snap, mask, refine, clamp, strict, "BATCHDNE")


def dneseek(snap: PipelineSnapshot, refine: str = "clamp", clamp: bool = True, strict: bool = True):
    mask = snap.driver | snap.kind_mask(OperatorKind.IndexSeek)
    return _driver_ratio(snap, mask, refine, clamp, strict, "DNESEEK")


def tgn(snap: PipelineSnapshot, refine: str = "clamp", clamp: bool = True, strict: bool = True):
    everything = np.ones(len(snap.kinds), dtype=bool)
    return _driver_ratio(snap, everything, refine, clamp, strict, "TGN")


def tgnint(snap: PipelineSnapshot, clamp: bool = True, strict: bool = True):
    """Sum k / (sum k + (1 - DNE) * sum e), the interpolated-cardinality TGN."""
    d = dne(snap, strict=strict)
    e = refine_clamp(snap)
    sk = np.sum(snap.k, axis=-1)
    den = sk + (1.0 - np.asarray(d)) * np.sum(e, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sk <= 0, np.where(np.isnan(d), np.nan, 0.0), sk / np.where(den > 0, den, 1.0))
    out = out if np.ndim(out) else float(out)
    return _clip01(out, clamp)


def processed_bytes(snap: PipelineSnapshot):
    return np.sum(snap.r, axis=-1) + np.sum(snap.w, axis=-1)


def _luo_totals(snap: PipelineSnapshot):
    """(processed bytes, estimated remaining bytes) under the bytes-processed model."""
    a = alpha(snap, strict=False)
    e_new = refine_interpolate(snap, a)
    if snap.input_e is None:
        in_e, in_w = e_new, snap.width
    else:
        in_e = np.where(snap.external, snap.input_e, e_new)
        in_w = snap.input_width
    est_in = _sum(in_e * in_w, snap.driver)
    est_out = _sum(e_new * snap.width, snap.root)
    done_in = _sum(snap.r, snap.driver)
    done_out = _sum(snap.w, snap.root)
    remaining = np.maximum(est_in - done_in, 0.0) + np.maximum(est_out - done_out, 0.0)
    return processed_bytes(snap), remaining


def luo(snap: PipelineSnapshot, window: float = LUO_WINDOW, past: PipelineSnapshot | None = None,
        clamp: bool = True, strict: bool = True):
    """Bytes-processed progress fraction and remaining seconds.

    ``past`` is the latest observation at least ``window`` seconds earlier;
    without it the remaining time is ``None``.
    """
    done, remaining = _luo_totals(snap)
    frac = _clip01(_ratio(done, done + remaining, strict, "LUO"), clamp)
    seconds = None
    if past is not None:
        dt = float(np.asarray(snap.time) - np.asarray(past.time))
        if dt >= window and dt > 0:
            rate = (float(done) - float(processed_bytes(past))) / dt
            seconds = luo_remaining_seconds(float(remaining), rate)
    return frac, seconds


def luo_remaining_seconds(remaining_bytes: float, rate: float) -> float:
    if rate <= 0:
        return float("inf") if remaining_bytes > 0 else 0.0
    return remaining_bytes / rate


def luo_fraction(snap: PipelineSnapshot, clamp: bool = True, strict: bool = True):
    done, remaining = _luo_totals(snap)
    return _clip01(_ratio(done, done + remaining, strict, "LUO"), clamp)


def luo_remaining_series(snap: PipelineSnapshot, window: float = LUO_WINDOW) -> np.ndarray:
    """Remaining-seconds estimate per observation of a series snapshot (NaN before one window)."""
    times = np.asarray(snap.time, dtype=float)
    done, remaining = _luo_totals(snap)
    earlier = np.interp(times - window, times, done)
    rate = (done - earlier) / window
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(rate > 0, remaining / rate, np.where(remaining > 0, np.inf, 0.0))
    return np.where(times - times[0] >= window, out, np.nan)


def gold_gn(snap: PipelineSnapshot, clamp: bool = True):
    return _clip01(_ratio(np.sum(snap.k, axis=-1), np.sum(snap.truth_n), False, "GOLD_GN"), clamp)


def gold_bytes(snap: PipelineSnapshot, clamp: bool = True):
    return _clip01(_ratio(processed_bytes(snap), np.sum(snap.truth_bytes), False, "GOLD_BYTES"), clamp)


def dne_query(dne_values: Sequence[float], driver_sums: Sequence[float], total_estimate: float) -> float:
    """Pipeline DNE values weighted by driver estimates over the plan-wide estimate sum."""
    if total_estimate <= 0:
        raise DegenerateInputError("plan-wide estimate sum is zero")
    d = np.asarray(dne_values, dtype=float)
    s = np.asarray(driver_sums, dtype=float)
    return float(np.sum(d * s) / total_estimate)


def gold_estimate(trace: Trace, t: int, model: EstimatorId | str, pipeline_id: int | None = None) -> float:
    """GetNext or bytes-processed model with the true totals substituted."""
    model = EstimatorId(model)
    if pipeline_id is None:
        k = trace.k[t]
        if model is EstimatorId.GOLD_GN:
            return float(np.sum(k) / np.sum(trace.truth_n))
        done = np.sum(trace.r[t]) + np.sum(trace.w[t])
        return float(done / np.sum(trace.truth_bytes))
    snap = pipeline_view(trace, pipeline_id, window=False).at(t)
    if model is EstimatorId.GOLD_GN:
        return float(gold_gn(snap))
    if model is EstimatorId.GOLD_BYTES:
        return float(gold_bytes(snap))
    raise UnsupportedEstimatorError(f"{model} is not a gold model")


_DISPATCH = {
    EstimatorId.DNE: dne,
    EstimatorId.TGN: tgn,
    EstimatorId.BATCHDNE: batchdne,
    EstimatorId.DNESEEK: dneseek,
}


def estimate(est, snap: PipelineSnapshot, clamp: bool = True, strict: bool = True, refine: str | None = None):
    """Evaluate one estimator on a (series) snapshot with its default refinement."""
    try:
        est = EstimatorId(est)
    except ValueError as exc:
        raise UnsupportedEstimatorError(f"unsupported estimator {est!r}") from exc
    if est in _DISPATCH:
        return _DISPATCH[est](snap, refine=refine or REFINEMENT[est], clamp=clamp, strict=strict)
    if est is EstimatorId.TGNINT:
        return tgnint(snap, clamp=clamp, strict=strict)
    if est is EstimatorId.LUO:
        return luo_fraction(snap, clamp=clamp, strict=strict)
    if est is EstimatorId.GOLD_GN:
        return gold_gn(snap, clamp=clamp)
    if est is EstimatorId.GOLD_BYTES:
        return gold_bytes(snap, clamp=clamp)
    raise UnsupportedEstimatorError(f"unsupported estimator {est!r}")


def estimate_series(snap: PipelineSnapshot, estimators=CANDIDATES, clamp: bool = True) -> dict[EstimatorId, np.ndarray]:
    """Every requested estimator over a series snapshot; NaN marks undefined observations."""
    return {EstimatorId(est): np.asarray(estimate(est, snap, clamp=clamp, strict=False), dtype=float) for est in estimators}
