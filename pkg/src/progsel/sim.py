"""Synthetic workloads and deterministic counter-trace execution.

A query is executed as a sequence of *events*. Each event carries the number of
GetNext calls it issues at every plan node; simulated time advances by the
per-node cost of those calls. Pipelines run one after another in execution
order and a counter snapshot is taken every ``interval`` simulated seconds,
at the start and end of every pipeline, and at the end of the query.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .plan import (
    OperatorKind as K,
    Pipeline,
    Plan,
    PlanNode,
    decompose_pipelines,
    pipeline_of,
)

# Simulated seconds per GetNext call, by operator kind.
BASE_COST: dict[K, float] = {
    K.TableScan: 5.0e-3,
    K.IndexScan: 7.5e-3,
    K.IndexSeek: 30.0e-3,
    K.Filter: 1.5e-3,
    K.Sort: 15.0e-3,
    K.BatchSort: 5.0e-3,
    K.HashJoin: 10.0e-3,
    K.HashAggregate: 10.0e-3,
    K.MergeJoin: 5.0e-3,
    K.NestedLoopJoin: 4.0e-3,
    K.StreamAggregate: 2.5e-3,
    K.Top: 1.0e-3,
    K.Spool: 2.5e-3,
    K.Other: 5.0e-3,
}
UNIFORM_COST = 5.0e-3

SPILL_KINDS = frozenset({K.Sort, K.HashJoin})
PASS_THROUGH = frozenset({K.Sort, K.BatchSort, K.Spool})


class ConfigError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


class DegenerateTraceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Specs and configs


@dataclass(frozen=True)
class QuerySpec:
    """One query ready for execution.

    ``true_cardinality`` holds output rows per node. Spilling nodes issue
    ``spill_fraction * rows`` additional GetNext calls on top of that, so the
    trace's ground-truth GetNext total is rows plus spill calls.
    ``input_bound`` is the static row bound of leaf inputs (table sizes).
    """

    query_id: str
    plan: Plan
    true_cardinality: Mapping[int, int]
    per_tuple_cost: Mapping[int, float]
    skew_z: float = 0.0
    spill_fraction: Mapping[int, float] = field(default_factory=dict)
    batch_size: Mapping[int, int] = field(default_factory=dict)
    input_bound: Mapping[int, int] = field(default_factory=dict)
    drift: Mapping[int, float] = field(default_factory=dict)
    family_id: str = ""
    template: str = ""
    seed: int = 0

    def __post_init__(self):
        for nid, n in self.true_cardinality.items():
            if n < 0:
                raise ConfigError(f"{self.query_id}: node {nid} true_cardinality < 0")
        for nid, c in self.per_tuple_cost.items():
            if not c > 0:
                raise ConfigError(f"{self.query_id}: node {nid} per_tuple_cost must be > 0")
        for nid, s in self.spill_fraction.items():
            if not 0 <= s <= 1:
                raise ConfigError(f"{self.query_id}: node {nid} spill_fraction outside [0, 1]")

    def to_dict(self) -> dict:
        def keyed(m):
            return {str(k): v for k, v in sorted(m.items())}

        return {
            "query_id": self.query_id,
            "family_id": self.family_id,
            "template": self.template,
            "seed": self.seed,
            "skew_z": self.skew_z,
            "plan": self.plan.to_dict(self.query_id),
            "true_cardinality": keyed(self.true_cardinality),
            "per_tuple_cost": keyed(self.per_tuple_cost),
            "spill_fraction": keyed(self.spill_fraction),
            "batch_size": keyed(self.batch_size),
            "input_bound": keyed(self.input_bound),
            "drift": keyed(self.drift),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuerySpec":
        def ints(m, conv):
            return {int(k): conv(v) for k, v in m.items()}

        return cls(
            query_id=d["query_id"],
            plan=Plan.from_dict(d["plan"]),
            true_cardinality=ints(d["true_cardinality"], int),
            per_tuple_cost=ints(d["per_tuple_cost"], float),
            skew_z=float(d.get("skew_z", 0.0)),
            spill_fraction=ints(d.get("spill_fraction", {}), float),
            batch_size=ints(d.get("batch_size", {}), int),
            input_bound=ints(d.get("input_bound", {}), int),
            drift=ints(d.get("drift", {}), float),
            family_id=d.get("family_id", ""),
            template=d.get("template", ""),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class WorkloadConfig:
    family_id: str = "default"
    query_count: int = 100
    scale: float = 1.0
    skew_z: float = 0.5
    estimate_error_sigma: float = 0.5
    operator_mix: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    observation_interval: float = 1.0
    seed: int = 0
    cost_model: str = "by_kind"  # or "uniform"
    cost_sigma: float = 0.3
    drift_sigma: float = 1.0
    spill_probability: float = 0.2

    def __post_init__(self):
        if self.query_count < 1:
            raise ConfigError("query_count must be >= 1")
        if not self.scale > 0:
            raise ConfigError("scale must be > 0")
        if self.estimate_error_sigma < 0 or self.cost_sigma < 0 or self.drift_sigma < 0:
            raise ConfigError("sigma values must be >= 0")
        if not self.observation_interval > 0:
            raise ConfigError("observation_interval must be > 0")
        if self.cost_model not in ("by_kind", "uniform"):
            raise ConfigError(f"unknown cost_model {self.cost_model!r}")
        if not 0 <= self.spill_probability <= 1:
            raise ConfigError("spill_probability outside [0, 1]")
        mix = {k: float(v) for k, v in self.operator_mix.items() if float(v) > 0}
        if not mix:
            raise ConfigError("operator_mix is empty")
        unknown = sorted(set(mix) - set(TEMPLATES))
        if unknown:
            raise ConfigError(f"unknown plan templates in operator_mix: {unknown}")

    @classmethod
    def from_text(cls, text: str) -> "WorkloadConfig":
        """Parse ``key = value`` lines; ``operator_mix`` is ``name:weight,...``."""
        kw: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            kw[key] = value
        return cls.from_mapping(kw)

    @classmethod
    def from_mapping(cls, kw: Mapping[str, str]) -> "WorkloadConfig":
        conv: dict[str, Callable] = {
            "family_id": str,
            "query_count": int,
            "scale": float,
            "skew_z": float,
            "estimate_error_sigma": float,
            "observation_interval": float,
            "seed": int,
            "cost_model": str,
            "cost_sigma": float,
            "drift_sigma": float,
            "spill_probability": float,
        }
        out: dict = {}
        for key, value in kw.items():
            if key == "operator_mix":
                out[key] = _parse_mix(value) if isinstance(value, str) else dict(value)
            elif key in conv:
                try:
                    out[key] = conv[key](value)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {key}: {value!r}") from exc
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(**out)

    def to_text(self) -> str:
        lines = []
        for key in (
            "family_id", "query_count", "scale", "skew_z", "estimate_error_sigma",
            "observation_interval", "seed", "cost_model", "cost_sigma", "drift_sigma",
            "spill_probability",
        ):
            lines.append(f"{key} = {getattr(self, key)}")
        mix = ",".join(f"{k}:{v:g}" for k, v in sorted(self.operator_mix.items()))
        lines.append(f"operator_mix = {mix}")
        return "\n".join(lines) + "\n"


def _parse_mix(text: str) -> dict[str, float]:
    mix = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, weight = part.partition(":")
        try:
            mix[name.strip()] = float(weight) if weight else 1.0
        except ValueError as exc:
            raise ConfigError(f"bad operator_mix weight {part!r}") from exc
    return mix


# ---------------------------------------------------------------------------
# Plan templates


class _Builder:
    """Accumulates nodes and their true cardinalities for one template."""

    def __init__(self, rng: np.random.Generator, cfg: WorkloadConfig):
        self.rng = rng
        self.cfg = cfg
        self.nodes: list[tuple[int, K, tuple[int, ...]]] = []
        self.rows: dict[int, int] = {}
        self.unit: dict[int, float] = {}  # rows before scaling; integral at leaves
        self.width: dict[int, float] = {}
        self.bound: dict[int, int] = {}
        self.batch: dict[int, int] = {}
        self.drift: dict[int, float] = {}
        self.spill: dict[int, float] = {}
        self.exact_estimate: set[int] = set()

    def _add(self, kind: K, children: Sequence[int], rows: float, width: float | None = None) -> int:
        """``rows`` is unscaled; scaling happens here so leaves scale exactly."""
        nid = len(self.nodes)
        self.nodes.append((nid, kind, tuple(children)))
        self.unit[nid] = max(1.0, float(rows))
        self.rows[nid] = max(1, int(round(self.unit[nid] * self.cfg.scale)))
        if width is None:
            width = float(self.rng.integers(16, 256))
        self.width[nid] = width
        return nid

    def loguniform(self, lo: float, hi: float) -> float:
        return float(math.exp(self.rng.uniform(math.log(lo), math.log(hi))))

    def table_size(self, lo=2_000, hi=20_000) -> int:
        """Unscaled table size."""
        return max(10, int(round(self.loguniform(lo, hi))))

    def scaled(self, unit_size: int) -> int:
        return max(1, int(round(unit_size * self.cfg.scale)))

    def scan(self, kind: K = K.TableScan, fraction: float = 1.0, size: int | None = None) -> int:
        size = self.table_size() if size is None else size
        rows = max(1, int(round(size * fraction)))
        nid = self._add(kind, (), rows)
        self.bound[nid] = max(self.scaled(size), self.rows[nid])
        if kind is K.TableScan and fraction >= 1.0:
            self.exact_estimate.add(nid)
        return nid

    def index_scan(self) -> int:
        return self.scan(K.IndexScan, fraction=self.rng.uniform(0.05, 0.8))

    def filter(self, child: int, sel: float | None = None) -> int:
        sel = self.loguniform(0.05, 0.9) if sel is None else sel
        nid = self._add(K.Filter, (child,), self.unit[child] * sel, self.width[child])
        self.drift[nid] = float(self.rng.normal(0.0, self.cfg.drift_sigma))
        return nid

    def unary(self, kind: K, child: int, rows: int, width: float | None = None) -> int:
        nid = self._add(kind, (child,), rows, width)
        if kind in (K.StreamAggregate, K.Other, K.Top):
            self.drift[nid] = float(self.rng.normal(0.0, self.cfg.drift_sigma))
        return nid

    def sort(self, child: int) -> int:
        nid = self._add(K.Sort, (child,), self.unit[child], self.width[child])
        self._maybe_spill(nid)
        return nid

    def batch_sort(self, child: int) -> int:
        nid = self._add(K.BatchSort, (child,), self.unit[child], self.width[child])
        n = self.rows[child]
        if self.rng.random() < 0.3:
            self.batch[nid] = n
        else:
            self.batch[nid] = max(1, int(self.loguniform(min(64, n), max(64, n))))
        return nid

    def nested_loop(self, outer: int, inner_table: int | None = None, inner_filter: bool = False) -> int:
        fanout = self.loguniform(0.3, 12.0)
        size = self.table_size(5_000, 100_000) if inner_table is None else inner_table
        seek_rows = int(round(self.unit[outer] * fanout))
        seek = self._add(K.IndexSeek, (), seek_rows)
        self.bound[seek] = max(self.scaled(size), self.rows[seek])
        self.drift[seek] = float(self.rng.normal(0.0, self.cfg.drift_sigma))
        inner = seek
        if inner_filter:
            inner = self.filter(seek)
        out_rows = self.unit[inner] if self.rng.random() < 0.5 else self.unit[inner] * self.rng.uniform(0.3, 1.0)
        nid = self._add(K.NestedLoopJoin, (outer, inner), out_rows)
        return nid

    def hash_join(self, build: int, probe: int) -> int:
        rows = self.unit[probe] * self.loguniform(0.2, 3.0)
        nid = self._add(K.HashJoin, (build, probe), rows)
        self.drift[nid] = float(self.rng.normal(0.0, self.cfg.drift_sigma))
        self._maybe_spill(nid)
        return nid

    def hash_agg(self, child: int) -> int:
        rows = max(1, self.unit[child] * self.loguniform(0.002, 0.3))
        return self._add(K.HashAggregate, (child,), rows)

    def stream_agg(self, child: int) -> int:
        rows = max(1, self.unit[child] * self.loguniform(0.002, 0.3))
        return self.unary(K.StreamAggregate, child, rows)

    def merge_join(self, left: int, right: int) -> int:
        rows = max(self.unit[left], self.unit[right]) * self.loguniform(0.3, 2.0)
        nid = self._add(K.MergeJoin, (left, right), rows)
        self.drift[nid] = float(self.rng.normal(0.0, self.cfg.drift_sigma))
        return nid

    def _maybe_spill(self, nid: int) -> None:
        if self.rng.random() < self.cfg.spill_probability:
            self.spill[nid] = float(self.rng.uniform(0.1, 1.0))


def _t_scan_filter_agg(b: _Builder) -> int:
    return b.stream_agg(b.filter(b.scan()))


def _t_scan_filter(b: _Builder) -> int:
    return b.filter(b.filter(b.scan()))


def _t_sort_agg(b: _Builder) -> int:
    return b.stream_agg(b.sort(b.filter(b.scan())))


def _t_hash_join(b: _Builder) -> int:
    return b.hash_join(b.filter(b.scan()), b.filter(b.scan()))


def _t_hash_chain(b: _Builder) -> int:
    inner = b.hash_join(b.scan(), b.filter(b.scan()))
    return b.hash_join(b.filter(b.scan()), inner)


def _t_hash_agg(b: _Builder) -> int:
    return b.hash_agg(b.hash_join(b.scan(), b.scan()))


def _t_merge_join(b: _Builder) -> int:
    return b.filter(b.merge_join(b.index_scan(), b.index_scan()))


def _t_merge_sort(b: _Builder) -> int:
    return b.stream_agg(b.merge_join(b.sort(b.filter(b.scan())), b.index_scan()))


def _t_nl_seek(b: _Builder) -> int:
    return b.nested_loop(b.filter(b.scan()))


def _t_nl_seek_agg(b: _Builder) -> int:
    return b.stream_agg(b.nested_loop(b.scan(), inner_filter=True))


def _t_batch_nl(b: _Builder) -> int:
    return b.nested_loop(b.batch_sort(b.index_scan()))


def _t_batch_nl_agg(b: _Builder) -> int:
    return b.hash_agg(b.nested_loop(b.batch_sort(b.filter(b.scan()))))


def _t_nl_top(b: _Builder) -> int:
    scan = b.scan(fraction=b.rng.uniform(0.05, 0.6))
    join = b.nested_loop(scan)
    return b.unary(K.Top, join, b.unit[join])


def _t_spool_hash(b: _Builder) -> int:
    probe = b.filter(b.scan())
    return b.hash_join(b.scan(), b.unary(K.Spool, probe, b.unit[probe], b.width[probe]))


TEMPLATES: dict[str, Callable[[_Builder], int]] = {
    "scan_filter_agg": _t_scan_filter_agg,
    "scan_filter": _t_scan_filter,
    "sort_agg": _t_sort_agg,
    "hash_join": _t_hash_join,
    "hash_chain": _t_hash_chain,
    "hash_agg": _t_hash_agg,
    "merge_join": _t_merge_join,
    "merge_sort": _t_merge_sort,
    "nl_seek": _t_nl_seek,
    "nl_seek_agg": _t_nl_seek_agg,
    "batch_nl": _t_batch_nl,
    "batch_nl_agg": _t_batch_nl_agg,
    "nl_top": _t_nl_top,
    "spool_hash": _t_spool_hash,
}
DEFAULT_MIX = {name: 1.0 for name in TEMPLATES}


def _seed_for(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generate_workload(config: WorkloadConfig) -> list[QuerySpec]:
    """Draw ``config.query_count`` query specs; deterministic in ``config.seed``."""
    names = sorted(config.operator_mix)
    weights = np.array([float(config.operator_mix[n]) for n in names])
    if not len(names) or weights.sum() <= 0:
        raise ConfigError("operator_mix is empty")
    weights = weights / weights.sum()
    rng = np.random.default_rng(_seed_for("workload", config.family_id, config.seed))
    specs = []
    for q in range(config.query_count):
        name = names[int(rng.choice(len(names), p=weights))]
        qrng = np.random.default_rng(_seed_for("query", config.family_id, config.seed, q))
        specs.append(_build_spec(config, name, q, qrng))
    return specs


def _build_spec(cfg: WorkloadConfig, template: str, q: int, rng: np.random.Generator) -> QuerySpec:
    b = _Builder(rng, cfg)
    root = TEMPLATES[template](b)
    query_id = f"{cfg.family_id}-{q:05d}"

    proto = [PlanNode(nid, kind, ch, 0.0, b.width[nid]) for nid, kind, ch in b.nodes]
    proto_plan = Plan(tuple(proto), root)
    static_ub = _static_upper_bounds(proto_plan, b.bound, b.spill)

    nodes = []
    for nid, kind, ch in b.nodes:
        n_rows = b.rows[nid]
        if nid in b.exact_estimate:
            est = float(n_rows)
        else:
            noise = rng.normal(0.0, cfg.estimate_error_sigma) if cfg.estimate_error_sigma > 0 else 0.0
            est = float(math.ceil(n_rows * math.exp(noise)))
        est = float(min(max(est, 0.0), static_ub[nid]))
        nodes.append(PlanNode(nid, kind, ch, est, b.width[nid]))
    plan = Plan(tuple(nodes), root)

    if cfg.cost_model == "uniform":
        base = {nid: UNIFORM_COST for nid, _, _ in b.nodes}
    else:
        base = {nid: BASE_COST[kind] for nid, kind, _ in b.nodes}
    if cfg.cost_sigma > 0:
        cost = {nid: c * math.exp(rng.normal(0.0, cfg.cost_sigma)) for nid, c in base.items()}
    else:
        cost = dict(base)

    return QuerySpec(
        query_id=query_id,
        plan=plan,
        true_cardinality=dict(b.rows),
        per_tuple_cost=cost,
        skew_z=cfg.skew_z,
        spill_fraction=dict(b.spill),
        batch_size=dict(b.batch),
        input_bound=dict(b.bound),
        drift=dict(b.drift),
        family_id=cfg.family_id,
        template=template,
        seed=_seed_for("exec", cfg.family_id, cfg.seed, q),
    )


def _static_upper_bounds(plan: Plan, bound: Mapping[int, int], spill: Mapping[int, float]) -> dict[int, float]:
    """Upper bounds on GetNext totals before any execution feedback."""
    out: dict[int, float] = {}

    def ub(nid: int, rescans: float) -> float:
        node = plan[nid]
        ch = node.children
        if not ch:
            val = float(bound.get(nid, 0)) * rescans
        elif node.kind is K.NestedLoopJoin:
            outer = ub(ch[0], rescans)
            val = outer
            for c in ch[1:]:
                val = val * ub(c, 1.0)
                ub(c, outer)
        elif node.kind is K.HashJoin:
            val = ub(ch[0], rescans) * ub(ch[1], rescans)
        elif node.kind is K.MergeJoin:
            val = ub(ch[0], rescans) * ub(ch[1], rescans)
        else:
            val = ub(ch[0], rescans)
        if nid in spill:
            val *= 2.0
        out[nid] = max(out.get(nid, 0.0), val)
        return val

    ub(plan.root, 1.0)
    return out


# ---------------------------------------------------------------------------
# Execution


@dataclass(frozen=True)
class CounterSnapshot:
    time: float
    k: Mapping[int, int]
    e: Mapping[int, float]
    lb: Mapping[int, float]
    ub: Mapping[int, float]
    r: Mapping[int, float]
    w: Mapping[int, float]


@dataclass
class Trace:
    """Time-ordered counter observations of one query plus ground truth.

    Counter matrices have shape (observations, nodes); columns follow
    ``node_ids``.
    """

    query_id: str
    plan: Plan
    pipelines: list[Pipeline]
    node_ids: tuple[int, ...]
    times: np.ndarray
    k: np.ndarray
    e: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    r: np.ndarray
    w: np.ndarray
    truth_n: np.ndarray
    truth_bytes: np.ndarray
    spans: list[tuple[float, float]]
    family_id: str = ""
    template: str = ""

    def __post_init__(self):
        self.index = {nid: j for j, nid in enumerate(self.node_ids)}

    def __len__(self) -> int:
        return len(self.times)

    def columns(self, node_ids: Sequence[int]) -> np.ndarray:
        return np.array([self.index[n] for n in node_ids], dtype=np.int64)

    def snapshot(self, t: int) -> CounterSnapshot:
        ids = self.node_ids

        def row(mat):
            return {nid: mat[t, j].item() for j, nid in enumerate(ids)}

        return CounterSnapshot(float(self.times[t]), row(self.k), row(self.e), row(self.lb), row(self.ub), row(self.r), row(self.w))

    def pipeline_window(self, pipeline_id: int) -> np.ndarray:
        """Observation indices from the pipeline's start to its end, inclusive."""
        start, end = self.spans[pipeline_id]
        return np.flatnonzero((self.times >= start) & (self.times <= end))

    # -- serialization -----------------------------------------------------

    def header(self) -> dict:
        return {
            "query_id": self.query_id,
            "family_id": self.family_id,
            "template": self.template,
            "plan": self.plan.to_dict(self.query_id),
            "pipelines": [p.to_dict() for p in self.pipelines],
            "node_ids": list(self.node_ids),
            "spans": [list(s) for s in self.spans],
            "truth": {
                "n": [int(v) for v in self.truth_n],
                "bytes": [float(v) for v in self.truth_bytes],
            },
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        for t in range(len(self.times)):
            lines.append(
                json.dumps(
                    {
                        "time": float(self.times[t]),
                        "k": [int(v) for v in self.k[t]],
                        "e": [float(v) for v in self.e[t]],
                        "lb": [float(v) for v in self.lb[t]],
                        "ub": [float(v) for v in self.ub[t]],
                        "r": [float(v) for v in self.r[t]],
                        "w": [float(v) for v in self.w[t]],
                    }
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Trace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]

        def mat(key, dtype):
            return np.array([r[key] for r in rows], dtype=dtype).reshape(len(rows), len(head["node_ids"]))

        return cls(
            query_id=head["query_id"],
            plan=Plan.from_dict(head["plan"]),
            pipelines=[Pipeline.from_dict(p) for p in head["pipelines"]],
            node_ids=tuple(head["node_ids"]),
            times=np.array([r["time"] for r in rows], dtype=float),
            k=mat("k", np.int64),
            e=mat("e", float),
            lb=mat("lb", float),
            ub=mat("ub", float),
            r=mat("r", float),
            w=mat("w", float),
            truth_n=np.array(head["truth"]["n"], dtype=np.int64),
            truth_bytes=np.array(head["truth"]["bytes"], dtype=float),
            spans=[tuple(s) for s in head["spans"]],
            family_id=head.get("family_id", ""),
            template=head.get("template", ""),
        )


def write_trace(path, trace: Trace) -> None:
    with open(path, "w") as fh:
        fh.write(trace.dumps())


def read_trace(path) -> Trace:
    with open(path) as fh:
        return Trace.loads(fh.read())


def ground_truth_progress(trace: Trace, t: int, pipeline_id: int | None = None) -> float:
    """Elapsed-time fraction at observation ``t`` of the query (or one pipeline)."""
    if pipeline_id is None:
        start, end = float(trace.times[0]), float(trace.times[-1])
    else:
        start, end = trace.spans[pipeline_id]
    if end <= start:
        raise DegenerateTraceError(f"{trace.query_id}: zero-duration trace")
    return float(min(1.0, max(0.0, (float(trace.times[t]) - start) / (end - start))))


def true_progress_series(trace: Trace, pipeline_id: int | None = None) -> np.ndarray:
    if pipeline_id is None:
        start, end = float(trace.times[0]), float(trace.times[-1])
        times = trace.times
    else:
        start, end = trace.spans[pipeline_id]
        times = trace.times[trace.pipeline_window(pipeline_id)]
    if end <= start:
        raise DegenerateTraceError(f"{trace.query_id}: zero-duration trace")
    return np.clip((times - start) / (end - start), 0.0, 1.0)


class _Stream:
    """Per-event GetNext increments for the nodes of a partially built pipeline."""

    def __init__(self, n: int):
        self.n = n
        self.inc: dict[int, np.ndarray] = {}
        self.read: dict[int, np.ndarray] = {}  # rows pulled from earlier pipelines
        self.out = np.zeros(n, dtype=np.int64)

    def reindex(self, positions: np.ndarray, n: int) -> "_Stream":
        s = _Stream(n)
        for attr in ("inc", "read"):
            src = getattr(self, attr)
            dst = getattr(s, attr)
            for nid, arr in src.items():
                a = np.zeros(n, dtype=np.int64)
                a[positions] = arr
                dst[nid] = a
        s.out[positions] = self.out
        return s


def _select_units(capacity: np.ndarray, total: int, drift: float, rng: np.random.Generator) -> np.ndarray:
    """Pick ``total`` of the ``capacity.sum()`` input units, weighted along event order."""
    cap = capacity.astype(np.int64)
    n_units = int(cap.sum())
    total = int(total)
    if total >= n_units:
        if total == n_units:
            return cap.copy()
        extra = _apportion(total - n_units, cap.astype(float) if n_units else np.ones(len(cap)), rng)
        return cap + extra
    if total <= 0:
        return np.zeros_like(cap)
    pos = (np.arange(n_units) + 0.5) / n_units
    # weighted sampling without replacement via exponential keys
    keys = rng.exponential(size=n_units) * np.exp(-drift * (pos - 0.5))
    chosen = np.argpartition(keys, total - 1)[:total]
    unit_event = np.repeat(np.arange(len(cap)), cap)
    return np.bincount(unit_event[chosen], minlength=len(cap)).astype(np.int64)


def _apportion(total: int, weights: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder)."""
    total = int(total)
    w = np.asarray(weights, dtype=float)
    if total <= 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=np.int64)
    share = total * w / w.sum()
    base = np.floor(share).astype(np.int64)
    rest = total - int(base.sum())
    if rest > 0:
        frac = share - base
        # stable order: larger remainder first, then position
        order = np.lexsort((np.arange(len(w)), -frac))
        base[order[:rest]] += 1
    return base


def _fanout(n_rows: int, total: int, z: float, drift: float, rng: np.random.Generator) -> np.ndarray:
    """Per-row output counts: Zipf(z) weights on a random rank order."""
    if n_rows <= 0:
        return np.zeros(0, dtype=np.int64)
    ranks = rng.permutation(n_rows) + 1
    w = ranks.astype(float) ** (-z) if z > 0 else np.ones(n_rows)
    if drift:
        w = w * np.exp(drift * ((np.arange(n_rows) + 0.5) / n_rows - 0.5))
    return _apportion(total, w)


class _PipelineRun:
    def __init__(self, spec: QuerySpec, pipeline: Pipeline, member: set[int], rng: np.random.Generator):
        self.spec = spec
        self.plan = spec.plan
        self.p = pipeline
        self.member = member
        self.rng = rng
        self.rows = spec.true_cardinality

    def run(self) -> _Stream:
        return self.flow(self.p.root)

    def flow(self, nid: int) -> _Stream:
        node = self.plan[nid]
        kind = node.kind
        rows = int(self.rows[nid])
        inside = [c for c in node.children if c in self.member]

        if kind is K.HashAggregate or not node.children:
            s = _Stream(rows)
            s.out[:] = 1
            s.inc[nid] = s.out.copy()
            if kind is K.HashAggregate:
                s.read[nid] = s.out.copy()
            return s

        if kind is K.NestedLoopJoin:
            return self._nested_loop(node)

        if kind is K.HashJoin:
            probe = self.flow(node.children[1])
            fan = _fanout(int(probe.out.sum()), rows, self.spec.skew_z, self.spec.drift.get(nid, 0.0), self.rng)
            s = probe
            s.out = _per_event(fan, probe.out)
            s.inc[nid] = s.out.copy()
            return s

        if kind is K.MergeJoin:
            streams = [self.flow(c) if c in self.member else self._virtual(nid, c) for c in node.children]
            s = _merge(streams)
            pos = (np.arange(s.n) + 0.5) / max(s.n, 1)
            weights = (s.out + 1e-9) * np.exp(self.spec.drift.get(nid, 0.0) * (pos - 0.5))
            out = _apportion(rows, weights)
            s.out = out
            s.inc[nid] = out.copy()
            return s

        if not inside:
            # leaf of this pipeline reading a finished pipeline's output
            c = node.children[0]
            n_read = rows if kind is K.Top else int(self.rows[c])
            child = _Stream(n_read)
            child.out[:] = 1
            child.read[nid] = child.out.copy()
        else:
            child = self.flow(inside[0])

        if kind is K.BatchSort:
            return self._batch_sort(nid, child)
        if kind in PASS_THROUGH:
            child.inc[nid] = child.out.copy()
            return child
        out = _select_units(child.out, rows, self.spec.drift.get(nid, 0.0), self.rng)
        child.out = out
        child.inc[nid] = out.copy()
        return child

    def _virtual(self, parent: int, c: int) -> _Stream:
        s = _Stream(int(self.rows[c]))
        s.out[:] = 1
        s.read[parent] = s.out.copy()
        return s

    def _batch_sort(self, nid: int, child: _Stream) -> _Stream:
        size = max(1, int(self.spec.batch_size.get(nid, child.out.sum() or 1)))
        cum = np.cumsum(child.out)
        total = int(cum[-1]) if len(cum) else 0
        if total == 0:
            child.inc[nid] = np.zeros(child.n, np.int64)
            return child
        # batch id of each input event: the batch its last row belongs to
        batch_of_event = np.minimum((np.maximum(cum - 1, 0)) // size, (total - 1) // size)
        n_batches = (total - 1) // size + 1
        batch_rows = np.bincount(batch_of_event, weights=child.out, minlength=n_batches).astype(np.int64)
        # layout: input events of batch b, then batch_rows[b] emit events
        last_event = np.searchsorted(batch_of_event, np.arange(n_batches), side="right")
        n_total = child.n + int(batch_rows.sum())
        positions = np.arange(child.n) + np.concatenate([[0], np.cumsum(batch_rows)])[batch_of_event]
        s = child.reindex(positions, n_total)
        emit_start = last_event + np.concatenate([[0], np.cumsum(batch_rows)[:-1]])
        emit = np.zeros(n_total, dtype=np.int64)
        emit_pos = np.repeat(emit_start - np.concatenate([[0], np.cumsum(batch_rows)[:-1]]), batch_rows) + np.arange(int(batch_rows.sum()))
        emit[emit_pos] = 1
        s.out = emit
        s.inc[nid] = emit.copy()
        return s

    def _nested_loop(self, node: PlanNode) -> _Stream:
        outer = self.flow(node.children[0])
        chain = []
        cur = node.children[1]
        while True:
            chain.append(cur)
            ch = self.plan[cur].children
            if not ch:
                break
            if len(ch) != 1:
                raise SimulationError(f"node {node.id}: nested loop inner input must be a unary chain")
            cur = ch[0]
        leaf = chain[-1]
        n_outer = int(outer.out.sum())
        fan = _fanout(n_outer, int(self.rows[leaf]), self.spec.skew_z, self.spec.drift.get(leaf, 0.0), self.rng)
        s = outer
        inner_out = _per_event(fan, outer.out)
        s.inc[leaf] = inner_out.copy()
        for nid in reversed(chain[:-1]):
            kind = self.plan[nid].kind
            if kind in PASS_THROUGH:
                nxt = inner_out.copy()
            else:
                nxt = _select_units(inner_out, int(self.rows[nid]), self.spec.drift.get(nid, 0.0), self.rng)
            s.inc[nid] = nxt.copy()
            inner_out = nxt
        out = _select_units(inner_out, int(self.rows[node.id]), self.spec.drift.get(node.id, 0.0), self.rng)
        s.out = out
        s.inc[node.id] = out.copy()
        return s


def _per_event(per_row: np.ndarray, rows_per_event: np.ndarray) -> np.ndarray:
    event_of_row = np.repeat(np.arange(len(rows_per_event)), rows_per_event)
    return np.bincount(event_of_row, weights=per_row, minlength=len(rows_per_event)).astype(np.int64)


def _merge(streams: list[_Stream]) -> _Stream:
    keys = np.concatenate([(np.arange(s.n) + 1.0) / max(s.n, 1) for s in streams])
    source = np.concatenate([np.full(s.n, i) for i, s in enumerate(streams)])
    order = np.lexsort((source, keys))
    n = len(order)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    merged = _Stream(n)
    offset = 0
    for s in streams:
        pos = rank[offset: offset + s.n]
        part = s.reindex(pos, n)
        for attr in ("inc", "read"):
            getattr(merged, attr).update(getattr(part, attr))
        merged.out += part.out
        offset += s.n
    return merged


def execute(spec: QuerySpec, interval: float = 1.0) -> Trace:
    """Run ``spec`` and return its counter trace; a pure function of its inputs."""
    if not interval > 0:
        raise ConfigError("interval must be > 0")
    plan = spec.plan
    pipelines = decompose_pipelines(plan)
    node_ids = tuple(sorted(n.id for n in plan.nodes))
    col = {nid: j for j, nid in enumerate(node_ids)}
    n_nodes = len(node_ids)
    rng = np.random.default_rng(spec.seed)
    width = np.array([plan[nid].est_row_width for nid in node_ids])
    cost = np.array([float(spec.per_tuple_cost[nid]) for nid in node_ids])
    read_width = np.zeros(n_nodes)
    for nid in node_ids:
        node = plan[nid]
        read_width[col[nid]] = plan[node.children[0]].est_row_width if node.children and node.kind is not K.HashAggregate else node.est_row_width

    blocks_k, blocks_spill, blocks_r, blocks_w, blocks_read = [], [], [], [], []
    pipe_events = []
    for p in pipelines:
        members = set(p.nodes)
        s = _PipelineRun(spec, p, members, rng).run()
        inc = np.zeros((s.n, n_nodes), dtype=np.int64)
        for nid, arr in s.inc.items():
            inc[:, col[nid]] = arr
        read = np.zeros((s.n, n_nodes), dtype=np.int64)
        for nid, arr in s.read.items():
            read[:, col[nid]] = arr
        spill = np.zeros_like(inc)
        # spill traffic: extra GetNext calls after the pipeline's input is consumed
        extra_blocks = []
        for nid in p.nodes:
            frac = float(spec.spill_fraction.get(nid, 0.0))
            if frac <= 0:
                continue
            extra = int(round(frac * int(inc[:, col[nid]].sum())))
            if extra <= 0:
                continue
            chunk = max(1, extra // 200)
            n_ev = -(-extra // chunk)
            e_inc = np.zeros((n_ev, n_nodes), dtype=np.int64)
            e_inc[:, col[nid]] = chunk
            e_inc[-1, col[nid]] = extra - chunk * (n_ev - 1)
            extra_blocks.append(e_inc)
        r_inc = np.zeros((s.n, n_nodes))
        for d in p.drivers:
            j = col[d]
            if read[:, j].any():
                r_inc[:, j] = read[:, j] * read_width[j]
            else:
                r_inc[:, j] = inc[:, j] * width[j]
        w_inc = np.zeros((s.n, n_nodes))
        w_inc[:, col[p.root]] = inc[:, col[p.root]] * width[col[p.root]]
        for e_inc in extra_blocks:
            inc = np.vstack([inc, e_inc])
            spill = np.vstack([spill, e_inc])
            read = np.vstack([read, np.zeros_like(e_inc)])
            r_inc = np.vstack([r_inc, e_inc * width])
            w_inc = np.vstack([w_inc, e_inc * width])
        blocks_k.append(inc)
        blocks_spill.append(spill)
        blocks_r.append(r_inc)
        blocks_w.append(w_inc)
        blocks_read.append(read)
        pipe_events.append(len(inc))

    inc = np.vstack(blocks_k)
    spill_inc = np.vstack(blocks_spill)
    r_inc = np.vstack(blocks_r)
    w_inc = np.vstack(blocks_w)
    read_inc = np.vstack(blocks_read)
    ev_time = inc @ cost
    cum_time = np.cumsum(ev_time)
    bounds = np.concatenate([[0], np.cumsum(pipe_events)])
    starts = np.concatenate([[0.0], cum_time])[bounds[:-1]]
    ends = np.concatenate([[0.0], cum_time])[bounds[1:]]
    total_time = float(cum_time[-1]) if len(cum_time) else 0.0
    if total_time <= 0:
        raise SimulationError(f"{spec.query_id}: query performs no work")

    grid = np.arange(0.0, total_time, interval)
    times = np.unique(np.concatenate([grid, starts, ends, [total_time]]))

    cum = lambda a: np.vstack([np.zeros((1, a.shape[1]), a.dtype), np.cumsum(a, axis=0)])
    j = np.searchsorted(cum_time, times, side="right")
    prev = np.concatenate([[0.0], cum_time])[j]
    jj = np.minimum(j, len(ev_time) - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(j < len(ev_time), (times - prev) / ev_time[jj], 0.0)
    frac = np.clip(np.nan_to_num(frac), 0.0, 1.0)[:, None]

    def sample_int(a):
        c = cum(a)
        return c[j] + np.floor(a[jj] * frac * (j < len(ev_time))[:, None]).astype(np.int64)

    def sample_float(a):
        c = cum(a)
        return c[j] + a[jj] * frac * (j < len(ev_time))[:, None]

    k = sample_int(inc)
    ks = sample_int(spill_inc)
    read_k = sample_int(read_inc)
    r = sample_float(r_inc)
    w = sample_float(w_inc)

    truth_n = inc.sum(axis=0)
    truth_bytes = r_inc.sum(axis=0) + w_inc.sum(axis=0)
    pid_of = pipeline_of(pipelines)
    done = np.stack([times >= ends[pid_of[nid]] for nid in node_ids], axis=1)
    lb, ub = _bounds(spec, pipelines, node_ids, col, k, ks, read_k, done, truth_n, times, ends)
    est0 = np.array([plan[nid].est_cardinality for nid in node_ids])
    e = np.clip(np.broadcast_to(est0, lb.shape), lb, ub)

    return Trace(
        query_id=spec.query_id,
        plan=plan,
        pipelines=pipelines,
        node_ids=node_ids,
        times=times,
        k=k,
        e=e,
        lb=lb,
        ub=ub,
        r=r,
        w=w,
        truth_n=truth_n,
        truth_bytes=truth_bytes,
        spans=[(float(a), float(b)) for a, b in zip(starts, ends)],
        family_id=spec.family_id,
        template=spec.template,
    )


def _bounds(spec, pipelines, node_ids, col, k, ks, read_k, done, truth_n, times, ends):
    """Worst-case bounds on GetNext totals from the counters seen so far."""
    plan = spec.plan
    T = len(times)
    rows = spec.true_cardinality
    pid_of = pipeline_of(pipelines)
    ub_rows: dict[int, np.ndarray] = {}
    lb = np.zeros((T, len(node_ids)))
    ub = np.zeros((T, len(node_ids)))

    def kk(nid):
        return (k[:, col[nid]] - ks[:, col[nid]]).astype(float)

    def is_done(nid):
        return done[:, col[nid]]

    def visit(nid: int, rescans: np.ndarray | None) -> np.ndarray:
        node = plan[nid]
        ch = node.children
        kind = node.kind
        mine = kk(nid)
        if not ch:
            static = float(spec.input_bound.get(nid, rows[nid]))
            val = mine + rescans * static if rescans is not None else np.full(T, static)
        elif kind is K.NestedLoopJoin:
            outer = visit(ch[0], rescans)
            remaining_outer = np.maximum(outer - kk(ch[0]), 0.0)
            per_row = 1.0
            for c in ch[1:]:
                visit(c, remaining_outer)
                per_row *= _inner_static(plan, spec, c)
            val = mine + remaining_outer * per_row
        elif kind is K.HashJoin:
            build = visit(ch[0], rescans)
            probe = visit(ch[1], rescans)
            val = mine + np.maximum(probe - kk(ch[1]), 0.0) * build
        elif kind is K.HashAggregate:
            child = visit(ch[0], rescans)
            val = np.where(is_done(ch[0]), float(rows[nid]), child)
        elif kind is K.MergeJoin:
            parts = []
            for c in ch:
                ubc = visit(c, rescans)
                consumed = kk(c) if pid_of[c] == pid_of[nid] else read_k[:, col[nid]].astype(float)
                parts.append((ubc, np.maximum(ubc - consumed, 0.0)))
            (ua, ra), (ub_, rb) = parts[0], parts[1]
            val = mine + ra * ub_ + rb * ua
        elif kind in PASS_THROUGH:
            val = visit(ch[0], rescans)
        else:
            child = visit(ch[0], rescans)
            if pid_of[ch[0]] != pid_of[nid]:
                consumed = read_k[:, col[nid]].astype(float)
                if kind is K.Top:
                    child = np.full(T, float(rows[ch[0]]))
            else:
                consumed = kk(ch[0])
            val = mine + np.maximum(child - consumed, 0.0)
        ub_rows[nid] = val
        total = val * (2.0 if spec.spill_fraction.get(nid, 0.0) > 0 else 1.0)
        j = col[nid]
        kn = k[:, j].astype(float)
        floor = kn
        if kind in (K.Sort, K.BatchSort, K.Spool) and ch and pid_of[ch[0]] == pid_of[nid]:
            floor = np.maximum(kn, k[:, col[ch[0]]].astype(float))
        exact = float(truth_n[j])
        fin = is_done(nid)
        if kind is K.HashAggregate:
            fin = fin | is_done(ch[0])
        lb[:, j] = np.where(fin, exact, np.minimum(floor, exact))
        ub[:, j] = np.where(fin, exact, np.maximum(total, kn))
        return val

    visit(plan.root, None)
    return lb, ub


def _inner_static(plan: Plan, spec: QuerySpec, nid: int) -> float:
    node = plan[nid]
    if not node.children:
        return float(spec.input_bound.get(nid, spec.true_cardinality[nid]))
    return _inner_static(plan, spec, node.children[0])


def execute_all(specs: Sequence[QuerySpec], interval: float = 1.0) -> list[Trace]:
    return [execute(s, interval) for s in specs]


def write_specs(path, specs: Sequence[QuerySpec]) -> None:
    with open(path, "w") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


def read_specs(path) -> list[QuerySpec]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(QuerySpec.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: malformed query spec ({exc})") from exc
    return out


def check_trace(trace: Trace, tol: float = 1e-9) -> list[str]:
    """Conservation and monotonicity violations of a trace; empty when it is consistent."""
    out = []
    if len(trace) == 0:
        return ["trace has no observations"]
    if np.any(np.diff(trace.times) <= 0):
        out.append("times are not strictly increasing")
    if np.any(trace.k[0] != 0):
        out.append("first observation has nonzero k")
    if np.any(trace.k[-1] != trace.truth_n):
        out.append("final k differs from N")
    if np.any(np.abs(trace.lb[-1] - trace.truth_n) > tol) or np.any(np.abs(trace.ub[-1] - trace.truth_n) > tol):
        out.append("final bounds differ from N")
    for name in ("k", "r", "w"):
        if np.any(np.diff(getattr(trace, name), axis=0) < -tol):
            out.append(f"{name} decreases")
    return out
