"""Physical plans and their decomposition into pipelines."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping


class OperatorKind(str, enum.Enum):
    TableScan = "TableScan"
    IndexScan = "IndexScan"
    IndexSeek = "IndexSeek"
    Filter = "Filter"
    Sort = "Sort"
    BatchSort = "BatchSort"
    HashJoin = "HashJoin"
    HashAggregate = "HashAggregate"
    MergeJoin = "MergeJoin"
    NestedLoopJoin = "NestedLoopJoin"
    StreamAggregate = "StreamAggregate"
    Top = "Top"
    Spool = "Spool"
    Other = "Other"

    @classmethod
    def parse(cls, name: str) -> "OperatorKind":
        try:
            return cls(name)
        except ValueError:
            return cls.Other


OPERATOR_KINDS: tuple[OperatorKind, ...] = tuple(OperatorKind)

# Hash operators: the first child is the build input and runs in an earlier pipeline.
HASH_BUILD_KINDS = frozenset({OperatorKind.HashJoin, OperatorKind.HashAggregate})
SCAN_KINDS = frozenset({OperatorKind.TableScan, OperatorKind.IndexScan, OperatorKind.IndexSeek})


class PlanError(ValueError):
    """Raised for malformed plans."""


@dataclass(frozen=True)
class PlanNode:
    id: int
    kind: OperatorKind
    children: tuple[int, ...] = ()
    est_cardinality: float = 0.0
    est_row_width: float = 1.0


@dataclass(frozen=True)
class Plan:
    nodes: tuple[PlanNode, ...]
    root: int
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "_by_id", {n.id: n for n in self.nodes})

    def __getitem__(self, node_id: int) -> PlanNode:
        return self._by_id[node_id]

    def __contains__(self, node_id: int) -> bool:
        return node_id in self._by_id

    def __len__(self) -> int:
        return len(self.nodes)

    def node_ids(self) -> list[int]:
        """Node ids in pre-order from the root."""
        out = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            out.append(i)
            stack.extend(reversed(self[i].children))
        return out

    def parent_map(self) -> dict[int, int]:
        return {c: n.id for n in self.nodes for c in n.children}

    def descendants(self, node_id: int) -> set[int]:
        out: set[int] = set()
        stack = list(self[node_id].children)
        while stack:
            i = stack.pop()
            out.add(i)
            stack.extend(self[i].children)
        return out

    def to_dict(self, query_id=None) -> dict:
        return {
            "query_id": query_id,
            "root": self.root,
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind.value,
                    "children": list(n.children),
                    "est_cardinality": n.est_cardinality,
                    "est_row_width": n.est_row_width,
                }
                for n in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Plan":
        nodes = [
            PlanNode(
                id=int(n["id"]),
                kind=OperatorKind.parse(n["kind"]),
                children=tuple(int(c) for c in n["children"]),
                est_cardinality=float(n["est_cardinality"]),
                est_row_width=float(n["est_row_width"]),
            )
            for n in d["nodes"]
        ]
        return cls(tuple(nodes), int(d["root"]))


@dataclass(frozen=True)
class Pipeline:
    id: int
    nodes: tuple[int, ...]
    drivers: tuple[int, ...]
    root: int = -1

    def to_dict(self) -> dict:
        return {"id": self.id, "nodes": list(self.nodes), "drivers": list(self.drivers), "root": self.root}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Pipeline":
        return cls(int(d["id"]), tuple(d["nodes"]), tuple(d["drivers"]), int(d.get("root", -1)))


def validate_plan(plan: Plan) -> list[str]:
    """Return a list of invariant violations; empty when the plan is well formed."""
    violations = []
    ids = [n.id for n in plan.nodes]
    for nid in sorted({i for i in ids if ids.count(i) > 1}):
        violations.append(f"duplicate node id {nid}")
    if plan.root not in plan:
        violations.append(f"root {plan.root} is not a node")
    parents: dict[int, int] = {}
    for node in plan.nodes:
        nid = node.id
        if node.est_cardinality < 0:
            violations.append(f"node {nid}: est_cardinality < 0")
        if node.est_row_width < 1:
            violations.append(f"node {nid}: est_row_width < 1")
        if not isinstance(node.kind, OperatorKind):
            violations.append(f"node {nid}: unknown kind {node.kind!r}")
        for c in node.children:
            if c not in plan:
                violations.append(f"node {nid}: child {c} does not exist")
            elif c in parents:
                violations.append(f"node {c} has more than one parent ({parents[c]}, {nid})")
            else:
                parents[c] = nid
    if plan.root in parents:
        violations.append(f"root {plan.root} has a parent (cycle)")
    if violations:
        return violations
    seen: set[int] = set()
    stack = [plan.root]
    while stack:
        i = stack.pop()
        if i in seen:
            violations.append(f"cycle through node {i}")
            break
        seen.add(i)
        stack.extend(plan[i].children)
    for i in sorted(set(ids) - seen):
        violations.append(f"node {i} is not reachable from root {plan.root} (cycle or disconnected)")
    return violations


def _pipeline_children(node: PlanNode) -> tuple[list[int], list[int]]:
    """Split children into (same pipeline, earlier pipeline)."""
    if node.kind in HASH_BUILD_KINDS:
        return list(node.children[1:]), list(node.children[:1])
    return list(node.children), []


def decompose_pipelines(plan: Plan) -> list[Pipeline]:
    """Split a plan into pipelines, returned in execution order.

    Sort closes the pipeline it sits in. Hash operators push their build child
    into an earlier pipeline and stay with their probe side. Drivers are the
    pipeline leaves outside the inner (non-first) input of nested loop joins.
    """
    problems = validate_plan(plan)
    if problems:
        raise PlanError("; ".join(problems))

    order = {nid: pos for pos, nid in enumerate(plan.node_ids())}
    groups: list[list[int]] = []

    def build(root: int) -> None:
        # collect the pipeline rooted at `root`; spawn earlier pipelines first
        members: list[int] = []
        stack = [root]
        pending: list[int] = []
        while stack:
            i = stack.pop()
            members.append(i)
            node = plan[i]
            same, earlier = _pipeline_children(node)
            pending.extend(earlier)
            for c in reversed(same):
                if plan[c].kind is OperatorKind.Sort:
                    pending.append(c)
                else:
                    stack.append(c)
        for c in sorted(pending, key=order.__getitem__):
            build(c)
        groups.append(members)

    build(plan.root)

    pipelines = []
    for pid, members in enumerate(groups):
        member_set = set(members)
        drivers = _drivers(plan, members[0], member_set)
        pipelines.append(Pipeline(pid, tuple(members), tuple(drivers), members[0]))
    return pipelines


def _drivers(plan: Plan, root: int, members: set[int]) -> list[int]:
    out = []

    def walk(i: int, inner: bool) -> None:
        node = plan[i]
        kids = [c for c in node.children if c in members]
        if not kids:
            if not inner:
                out.append(i)
            return
        for pos, c in enumerate(node.children):
            if c not in members:
                continue
            nested_inner = node.kind is OperatorKind.NestedLoopJoin and pos > 0
            walk(c, inner or nested_inner)

    walk(root, False)
    return out


def pipeline_of(pipelines: Iterable[Pipeline]) -> dict[int, int]:
    return {nid: p.id for p in pipelines for nid in p.nodes}


def inner_nodes(plan: Plan, pipeline: Pipeline) -> set[int]:
    """Nodes of the pipeline lying under the inner input of a nested loop join."""
    members = set(pipeline.nodes)
    out: set[int] = set()
    for nid in pipeline.nodes:
        node = plan[nid]
        if node.kind is OperatorKind.NestedLoopJoin:
            for c in node.children[1:]:
                if c in members:
                    out.add(c)
                    out.update(d for d in plan.descendants(c) if d in members)
    return out


def read_plans(path) -> list[tuple[object, Plan]]:
    """Read a line-delimited JSON plan file into (query_id, plan) pairs."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out.append((d.get("query_id"), Plan.from_dict(d)))
    return out


def write_plans(path, plans: Iterable[tuple[object, Plan]]) -> None:
    with open(path, "w") as fh:
        for qid, plan in plans:
            fh.write(json.dumps(plan.to_dict(qid), sort_keys=True) + "\n")
