import numpy as np
import pytest

from progsel.plan import OperatorKind as K
from progsel.plan import Plan, PlanNode


def chain(*kinds, card=100.0, width=8.0) -> Plan:
    """Linear plan; the first kind is the leaf, the last is the root."""
    nodes = []
    for i, kind in enumerate(kinds):
        children = (i - 1,) if i else ()
        nodes.append(PlanNode(i, kind, children, card, width))
    return Plan(tuple(nodes), len(kinds) - 1)


def tree(spec: dict, root: int, card=100.0) -> Plan:
    """``spec`` maps id -> (kind, children)."""
    nodes = tuple(PlanNode(i, k, tuple(ch), card, 8.0) for i, (k, ch) in sorted(spec.items()))
    return Plan(nodes, root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_workload():
    from progsel.sim import WorkloadConfig, execute_all, generate_workload

    specs = generate_workload(WorkloadConfig(family_id="t", query_count=12, seed=7))
    return execute_all(specs)


# -- acceptance reporting -------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n, title = mark.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    _CRITERIA[n] = (title, call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
