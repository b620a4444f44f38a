"""Per-estimator error regression and minimum-predicted-error estimator selection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .estimators import (
    CANDIDATES,
    CANONICAL_ORDER,
    DegenerateInputError,
    EstimatorId,
    canonical_rank,
    estimate_series,
    pipeline_view,
)
from .evaluation import pipeline_errors
from .features import (
    DEFAULT_SCHEMA,
    STAGES,
    DynamicInputs,
    FeatureSchema,
    FeatureVector,
    features_at,
    pipeline_features,
    stage_prefix,
    static_features,
)
from .mart import MartModel, MartParams, TrainingError, train_mart
from .sim import Trace

log = logging.getLogger(__name__)

SELECTION_FORMAT = "progsel-selection/1"
FALLBACK = EstimatorId.TGN


class SelectionError(ValueError):
    pass


@dataclass
class TrainingExample:
    features: FeatureVector
    labels: dict  # EstimatorId -> error; NaN when the estimator is degenerate on the pipeline
    group_id: str
    query_id: str = ""
    pipeline_id: int = 0
    stage: object = "static"


def build_training_set(traces: Sequence[Trace], candidates: Sequence[EstimatorId] = CANDIDATES,
                       schema: FeatureSchema = DEFAULT_SCHEMA, stages: Sequence = STAGES,
                       clamp: bool = True) -> list[TrainingExample]:
    """One example per (pipeline, reached stage), labelled with each candidate's full-window error."""
    out: list[TrainingExample] = []
    for tr in traces:
        for p in tr.pipelines:
            labels = pipeline_errors(tr, p.id, candidates, clamp=clamp)
            if not any(np.isfinite(v) for v in labels.values()):
                continue
            try:
                feats = pipeline_features(tr, p.id, schema, stages)
            except DegenerateInputError:
                log.warning("%s pipeline %d: degenerate features, skipped", tr.query_id, p.id)
                continue
            for stage, fv in feats.items():
                out.append(TrainingExample(fv, dict(labels), tr.family_id, tr.query_id, p.id, stage))
    return out


def design_matrix(examples: Sequence[TrainingExample]) -> np.ndarray:
    if not examples:
        return np.zeros((0, 0))
    return np.vstack([ex.features.model_input() for ex in examples])


@dataclass
class SelectionModel:
    models: dict  # EstimatorId -> MartModel
    candidates: tuple = CANDIDATES
    schema_version: str = DEFAULT_SCHEMA.version
    train_seconds: dict = field(default_factory=dict)

    def __post_init__(self):
        versions = {m.schema_version for m in self.models.values()}
        if len(versions) > 1:
            raise SelectionError("models disagree on the feature schema version")

    def check(self, v: FeatureVector) -> np.ndarray:
        if v.schema.version != self.schema_version:
            raise SelectionError(f"feature schema {v.schema.version} does not match model {self.schema_version}")
        return v.model_input()

    def predict(self, v: FeatureVector) -> dict[EstimatorId, float]:
        x = self.check(v)[None, :]
        missing = [c for c in self.candidates if c not in self.models]
        if missing:
            raise SelectionError(f"no model for {', '.join(m.value for m in missing)}")
        return {c: float(self.models[c].predict(x)[0]) for c in self.candidates}

    def ranking(self, v: FeatureVector) -> list[EstimatorId]:
        pred = self.predict(v)
        return sorted(self.candidates, key=lambda c: (pred[c], canonical_rank(c)))

    def to_dict(self) -> dict:
        return {
            "format": SELECTION_FORMAT,
            "schema_version": self.schema_version,
            "candidates": [c.value for c in self.candidates],
            "models": {c.value: self.models[c].to_dict() for c in self.candidates},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SelectionModel":
        if d.get("format") != SELECTION_FORMAT:
            raise SelectionError(f"unsupported selection model format {d.get('format')!r}")
        cands = tuple(EstimatorId(c) for c in d["candidates"])
        models = {EstimatorId(k): MartModel.from_dict(v) for k, v in d["models"].items()}
        return cls(models, cands, d["schema_version"])

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "SelectionModel":
        return cls.from_dict(json.loads(text))


def train_selection(examples: Sequence[TrainingExample], params: Optional[MartParams] = None,
                    candidates: Sequence[EstimatorId] = CANDIDATES) -> SelectionModel:
    """Fit one error-regression model per candidate on the examples where its label is defined."""
    if not examples:
        raise TrainingError("empty training set")
    params = params or MartParams()
    schema = examples[0].features.schema
    X = design_matrix(examples)
    models, seconds = {}, {}
    for c in candidates:
        y = np.array([ex.labels.get(c, np.nan) for ex in examples], dtype=float)
        ok = np.isfinite(y)
        if not ok.any():
            raise TrainingError(f"no defined labels for {c.value}")
        m = train_mart(X[ok], y[ok], params, schema_version=schema.version)
        models[c] = m
        seconds[c] = m.train_seconds
    return SelectionModel(models, tuple(candidates), schema.version, seconds)


def select_estimator(model: SelectionModel, v: FeatureVector) -> EstimatorId:
    """Candidate with the smallest predicted error; ties go to the canonical order."""
    return model.ranking(v)[0]


@dataclass
class PipelineSchedule:
    """Estimator choices of one pipeline: (stage, observation index within the window, estimator)."""

    pipeline_id: int
    choices: list = field(default_factory=list)

    @property
    def static(self) -> EstimatorId:
        return self.choices[0][2]

    @property
    def final(self) -> EstimatorId:
        return self.choices[-1][2]

    def active(self, obs: int) -> EstimatorId:
        """Estimator in force at window observation ``obs``."""
        cur = self.choices[0][2]
        for _, at, est in self.choices:
            if at <= obs:
                cur = est
        return cur

    def stages(self) -> list:
        return [s for s, _, _ in self.choices]


def select_online(model: SelectionModel, trace: Trace, pipeline_id: int, static_only: bool = False,
                  stages: Sequence = STAGES) -> PipelineSchedule:
    """Replay one pipeline, choosing at the static stage and at each reached checkpoint.

    The choice taken at the last stage stays in force for the rest of the
    pipeline. Estimators that are undefined at the decision point are skipped.
    """
    p = trace.pipelines[pipeline_id]
    schema = _schema_for(model.schema_version)
    static = static_features(trace.plan, p, schema)
    view = pipeline_view(trace, pipeline_id)
    needed = set(schema.cor_estimators) | {e for pair in schema.pairs for e in pair} | set(model.candidates)
    inputs = DynamicInputs.from_view(view, sorted(needed, key=canonical_rank))
    sched = PipelineSchedule(pipeline_id)
    for stage in stages:
        if static_only and stage != "static":
            break
        prefix = stage_prefix(inputs, stage)
        if prefix is None:
            continue
        v = features_at(static, inputs, prefix, schema)
        obs = max(prefix - 1, 0)
        choice = _first_defined(model.ranking(v), inputs.series, obs)
        sched.choices.append((stage, obs, choice))
    return sched


def _first_defined(ranking: Sequence[EstimatorId], series: Mapping[EstimatorId, np.ndarray], obs: int) -> EstimatorId:
    for est in ranking:
        s = series.get(est)
        if s is None or np.isfinite(s[obs]):
            return est
    return FALLBACK


_SCHEMAS: dict[str, FeatureSchema] = {DEFAULT_SCHEMA.version: DEFAULT_SCHEMA}


def register_schema(schema: FeatureSchema) -> None:
    _SCHEMAS[schema.version] = schema


def _schema_for(version: str) -> FeatureSchema:
    try:
        return _SCHEMAS[version]
    except KeyError:
        raise SelectionError(f"unknown feature schema {version}") from None


@dataclass
class ProgressLine:
    time: float
    pipeline_id: int
    estimator: EstimatorId
    progress: float
    switched: bool = False


def query_progress(model: SelectionModel, trace: Trace, static_only: bool = False) -> list[ProgressLine]:
    """Query-level progress per observation from the per-pipeline selections.

    Pipeline progress uses the estimator in force (clamped); pipelines are
    weighted by their current driver estimates, normalised to sum to one.
    """
    schedules = [select_online(model, trace, p.id, static_only) for p in trace.pipelines]
    n_obs = len(trace)
    prog = np.zeros((n_obs, len(trace.pipelines)))
    weight = np.zeros((n_obs, len(trace.pipelines)))
    active = np.full((n_obs, len(trace.pipelines)), -1, dtype=int)
    for p, sched in zip(trace.pipelines, schedules):
        rows = trace.pipeline_window(p.id)
        view = pipeline_view(trace, p.id)
        series = estimate_series(view, model.candidates + (FALLBACK,), clamp=True)
        start, end = rows[0], rows[-1]
        vals = np.zeros(len(rows))
        for j in range(len(rows)):
            est = sched.active(j)
            v = series[est][j]
            if not np.isfinite(v):
                est = FALLBACK
                v = series[FALLBACK][j]
            vals[j] = v if np.isfinite(v) else 0.0
            active[start + j, p.id] = canonical_rank(est)
        prog[:start, p.id] = 0.0
        prog[start : end + 1, p.id] = vals
        prog[end + 1 :, p.id] = 1.0
        drv = trace.columns(p.drivers)
        weight[:, p.id] = trace.e[:, drv].sum(axis=1)
    tot = weight.sum(axis=1, keepdims=True)
    w = np.where(tot > 0, weight / np.where(tot > 0, tot, 1.0), 1.0 / len(trace.pipelines))
    q = np.clip(np.sum(w * prog, axis=1), 0.0, 1.0)
    q[-1] = 1.0 if np.allclose(prog[-1], 1.0) else q[-1]
    out: list[ProgressLine] = []
    prev = None
    for t in range(n_obs):
        running = [j for j in range(len(trace.pipelines)) if active[t, j] >= 0]
        j = running[-1] if running else 0
        est = CANONICAL_ORDER[active[t, j]] if running else schedules[0].static
        key = (j, est)
        out.append(ProgressLine(float(trace.times[t]), j, est, float(q[t]), prev is not None and key != prev))
        prev = key
    return out
