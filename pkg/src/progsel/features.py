"""Static plan features and dynamic execution features for estimator selection."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .estimators import (
    CANDIDATES,
    DegenerateInputError,
    EstimatorId,
    PipelineSnapshot,
    estimate_series,
    pipeline_view,
)
from .plan import OPERATOR_KINDS, OperatorKind, Pipeline, Plan
from .sim import Trace

CHECKPOINTS: tuple[float, ...] = (1, 2, 5, 10, 20)
STAGES: tuple[object, ...] = ("static",) + CHECKPOINTS
COR_STEPS = 4
DEFAULT_PAIRS: tuple[tuple[EstimatorId, EstimatorId], ...] = (
    (EstimatorId.DNE, EstimatorId.TGN),
    (EstimatorId.DNE, EstimatorId.TGNINT),
    (EstimatorId.TGN, EstimatorId.TGNINT),
)
COR_ESTIMATORS: tuple[EstimatorId, ...] = CANDIDATES
STATIC_PREFIXES = ("Count", "Card", "SelAt", "SelAbove", "SelBelow")


class SchemaMismatchError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature names; ``dynamic`` marks the maskable entries."""

    names: tuple[str, ...]
    dynamic: tuple[bool, ...]
    pairs: tuple[tuple[EstimatorId, EstimatorId], ...] = DEFAULT_PAIRS
    cor_estimators: tuple[EstimatorId, ...] = COR_ESTIMATORS
    checkpoints: tuple[float, ...] = CHECKPOINTS
    cor_variant: str = "verbatim"
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {n: i for i, n in enumerate(self.names)})

    @property
    def version(self) -> str:
        digest = hashlib.sha256("\n".join(self.names + (self.cor_variant,)).encode()).hexdigest()[:12]
        return f"fs1-{digest}"

    def __len__(self) -> int:
        return len(self.names)

    @property
    def dynamic_idx(self) -> np.ndarray:
        return np.flatnonzero(self.dynamic)

    def model_columns(self) -> list[str]:
        return list(self.names) + [f"undef:{self.names[i]}" for i in self.dynamic_idx]


@lru_cache(maxsize=None)
def make_schema(pairs=DEFAULT_PAIRS, cor_estimators=COR_ESTIMATORS, checkpoints=CHECKPOINTS,
                cor_variant: str = "verbatim") -> FeatureSchema:
    names: list[str] = []
    dynamic: list[bool] = []
    for op in OPERATOR_KINDS:
        for prefix in STATIC_PREFIXES:
            names.append(f"{prefix}_{op.value}")
            dynamic.append(False)
    names.append("SelAt_DN")
    dynamic.append(False)
    for a, b in pairs:
        for x in checkpoints:
            names.append(f"{a.value}vs{b.value}_{_fmt(x)}")
            dynamic.append(True)
    for est in cor_estimators:
        for i in range(1, COR_STEPS + 1):
            for x in checkpoints:
                names.append(f"Cor_{est.value}_{i}_{_fmt(x)}")
                dynamic.append(True)
    if cor_variant not in ("verbatim", "alternative"):
        raise ValueError(f"unknown cor_variant {cor_variant!r}")
    return FeatureSchema(tuple(names), tuple(dynamic), tuple(pairs), tuple(cor_estimators), tuple(checkpoints), cor_variant)


def all_pairs(estimators: Sequence[EstimatorId] = CANDIDATES) -> tuple[tuple[EstimatorId, EstimatorId], ...]:
    return tuple((a, b) for i, a in enumerate(estimators) for b in estimators[i + 1:])


DEFAULT_SCHEMA = make_schema()


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    defined: np.ndarray
    schema: FeatureSchema = DEFAULT_SCHEMA

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.schema.index[name]])

    def is_defined(self, name: str) -> bool:
        return bool(self.defined[self.schema.index[name]])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.schema.names, self.values.tolist()))

    def model_input(self) -> np.ndarray:
        """Values followed by one undefined-bit per dynamic feature."""
        mask = (~self.defined[self.schema.dynamic_idx]).astype(float)
        return np.concatenate([self.values, mask])


# ---------------------------------------------------------------------------
# static features


def static_features(plan: Plan, pipeline: Pipeline, schema: FeatureSchema = DEFAULT_SCHEMA) -> dict[str, float]:
    """Operator counts, cardinalities and relative cardinalities of one pipeline."""
    members = list(pipeline.nodes)
    member_set = set(members)
    e = {nid: float(plan[nid].est_cardinality) for nid in members}
    total = sum(e.values())
    if total <= 0:
        raise DegenerateInputError(f"pipeline {pipeline.id}: estimates sum to zero")
    below: dict[int, set[int]] = {nid: plan.descendants(nid) & member_set for nid in members}
    out: dict[str, float] = {}
    for op in OPERATOR_KINDS:
        at = [n for n in members if plan[n].kind is op]
        card = sum(e[n] for n in at)
        above = [n for n in members if any(plan[d].kind is op for d in below[n])]
        under: set[int] = set()
        for n in at:
            under |= below[n]
        out[f"Count_{op.value}"] = float(len(at))
        out[f"Card_{op.value}"] = card
        out[f"SelAt_{op.value}"] = card / total
        out[f"SelAbove_{op.value}"] = sum(e[n] for n in above) / total
        out[f"SelBelow_{op.value}"] = sum(e[n] for n in under) / total
    out["SelAt_DN"] = sum(e[n] for n in pipeline.drivers) / total
    return out


# ---------------------------------------------------------------------------
# dynamic features


def driver_fraction(view: PipelineSnapshot) -> np.ndarray:
    num = np.sum(np.where(view.driver, view.k, 0.0), axis=-1)
    den = np.sum(np.where(view.driver, view.e, 0.0), axis=-1)
    if np.any(den <= 0):
        raise DegenerateInputError("driver estimates sum to zero")
    return num / den


def checkpoint(view: PipelineSnapshot, x: float, prefix: Optional[int] = None) -> Optional[int]:
    """Index of the first observation where x% of the driver input is consumed.

    Only the first ``prefix`` observations are searched; ``None`` when the
    checkpoint has not been reached there.
    """
    frac = driver_fraction(view)
    if prefix is not None:
        frac = frac[:prefix]
    hit = np.flatnonzero(frac >= x / 100.0 - 1e-12)
    return int(hit[0]) if len(hit) else None


@dataclass
class DynamicInputs:
    """Per-pipeline series needed to compute dynamic features at any prefix."""

    times: np.ndarray
    frac: np.ndarray
    series: Mapping[EstimatorId, np.ndarray]

    @classmethod
    def from_view(cls, view: PipelineSnapshot, estimators: Iterable[EstimatorId]) -> "DynamicInputs":
        times = np.atleast_1d(np.asarray(view.time, dtype=float))
        frac = driver_fraction(view)
        series = estimate_series(view, tuple(estimators), clamp=False)
        return cls(times, frac, series)

    def first_at(self, x: float, prefix: int) -> Optional[int]:
        hit = np.flatnonzero(self.frac[:prefix] >= x / 100.0 - 1e-12)
        return int(hit[0]) if len(hit) else None


def pairwise_diff_features(inputs: DynamicInputs, prefix: int, schema: FeatureSchema = DEFAULT_SCHEMA) -> dict[str, float]:
    """``|A - B|`` at each reached checkpoint; unreached or undefined entries are omitted."""
    out: dict[str, float] = {}
    for x in schema.checkpoints:
        t = inputs.first_at(x, prefix)
        if t is None:
            continue
        for a, b in schema.pairs:
            diff = abs(float(inputs.series[a][t]) - float(inputs.series[b][t]))
            if np.isfinite(diff):
                out[f"{a.value}vs{b.value}_{_fmt(x)}"] = diff
    return out


def time_correlation_features(inputs: DynamicInputs, prefix: int, schema: FeatureSchema = DEFAULT_SCHEMA,
                              steps: int = COR_STEPS) -> dict[str, float]:
    """Elapsed-time ratios between sub-checkpoints scaled by the inverse estimate.

    ``verbatim``: (T(ix/k) - T0) / (T(x/k) - T0) / est(t{x});
    ``alternative``: (T(ix/k) - T0) / (T(x) - T0) / est(t{ix/k}).
    """
    out: dict[str, float] = {}
    t0 = float(inputs.times[0])
    for x in schema.checkpoints:
        tx = inputs.first_at(x, prefix)
        if tx is None:
            continue
        sub = [inputs.first_at(i * x / steps, prefix) for i in range(1, steps + 1)]
        if any(s is None for s in sub):
            continue
        for i in range(1, steps + 1):
            num = float(inputs.times[sub[i - 1]]) - t0
            if schema.cor_variant == "verbatim":
                den = float(inputs.times[sub[0]]) - t0
                at = tx
            else:
                den = float(inputs.times[tx]) - t0
                at = sub[i - 1]
            if den <= 0:
                continue
            for est in schema.cor_estimators:
                v = float(inputs.series[est][at])
                if not np.isfinite(v) or v == 0:
                    continue
                out[f"Cor_{est.value}_{i}_{_fmt(x)}"] = num / den / v
    return out


def assemble(static: Mapping[str, float], dynamic: Mapping[str, float], schema: FeatureSchema = DEFAULT_SCHEMA) -> FeatureVector:
    """Place named values into the schema; missing dynamic entries are masked with value 0."""
    values = np.zeros(len(schema))
    defined = np.zeros(len(schema), dtype=bool)
    for part, want_dynamic in ((static, False), (dynamic, True)):
        for name, v in part.items():
            j = schema.index.get(name)
            if j is None or schema.dynamic[j] != want_dynamic:
                raise SchemaMismatchError(f"feature {name!r} does not belong to schema {schema.version}")
            values[j] = v
            defined[j] = True
    static_idx = np.flatnonzero(~np.array(schema.dynamic))
    if not defined[static_idx].all():
        missing = [schema.names[i] for i in static_idx if not defined[i]]
        raise SchemaMismatchError(f"missing static features: {missing[:3]}...")
    return FeatureVector(values, defined, schema)


def stage_prefix(inputs: DynamicInputs, stage) -> Optional[int]:
    """Observations visible at a stage: up to and including t{x}; 0 for static."""
    if stage == "static":
        return 0
    t = inputs.first_at(float(stage), len(inputs.times))
    return None if t is None else t + 1


def pipeline_features(trace: Trace, pipeline_id: int, schema: FeatureSchema = DEFAULT_SCHEMA,
                      stages: Sequence = STAGES) -> dict[object, FeatureVector]:
    """Feature vectors at each reached stage of one pipeline."""
    p = trace.pipelines[pipeline_id]
    static = static_features(trace.plan, p, schema)
    view = pipeline_view(trace, pipeline_id)
    needed = set(schema.cor_estimators) | {e for pair in schema.pairs for e in pair}
    inputs = DynamicInputs.from_view(view, sorted(needed, key=lambda e: list(EstimatorId).index(e)))
    out = {}
    for stage in stages:
        prefix = stage_prefix(inputs, stage)
        if prefix is None:
            continue
        out[stage] = features_at(static, inputs, prefix, schema)
    return out


def features_at(static: Mapping[str, float], inputs: DynamicInputs, prefix: int,
                schema: FeatureSchema = DEFAULT_SCHEMA) -> FeatureVector:
    dynamic: dict[str, float] = {}
    if prefix > 0:
        dynamic.update(pairwise_diff_features(inputs, prefix, schema))
        dynamic.update(time_correlation_features(inputs, prefix, schema))
    return assemble(static, dynamic, schema)


def write_feature_matrix(path, rows: Sequence[tuple[str, FeatureVector]], schema: FeatureSchema = DEFAULT_SCHEMA) -> None:
    """CSV: instance id, feature values, then undefined bits for dynamic features."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["instance"] + schema.model_columns())
        for key, fv in rows:
            wr.writerow([key] + [repr(float(v)) for v in fv.model_input()])


def read_feature_matrix(path, schema: FeatureSchema = DEFAULT_SCHEMA) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header[1:] != schema.model_columns():
            raise SchemaMismatchError("feature matrix header does not match schema")
        keys, rows = [], []
        for row in rd:
            keys.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return keys, np.array(rows, dtype=float).reshape(len(rows), len(header) - 1)
