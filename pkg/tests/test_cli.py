import json

import pytest

from progsel.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from progsel.mart import MartParams
from progsel.selection import SelectionModel
from progsel.sim import WorkloadConfig, check_trace, read_trace

FAST = ["iterations=5"]


def write_config(tmp_path, family="a", n=10, seed=3, **kw):
    p = tmp_path / f"{family}.conf"
    p.write_text(WorkloadConfig(family_id=family, query_count=n, seed=seed, **kw).to_text())
    return p


def tree_files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
            and p.name != "manifest.json"}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfgs = [write_config(root, f, 4, seed=i) for i, f in enumerate(("a", "b"))]
    assert main(["gen", "--config", *map(str, cfgs), "--out", str(root / "w"), "--seed", "9"]) == EXIT_OK
    assert main(["simulate", "--specs", str(root / "w" / "specs"), "--out", str(root / "s")]) == EXIT_OK
    assert main(["train", "--traces", str(root / "s"), "--out", str(root / "m"), "--params", *FAST]) == EXIT_OK
    return root


def test_gen_writes_specs(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    lines = (tmp_path / "o" / "specs" / "a.jsonl").read_text().splitlines()
    assert len(lines) == 10
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["command"] == "gen" and "specs/a.jsonl" in manifest["artifacts"]


def test_gen_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    for d in ("x", "y"):
        assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / d), "--seed", "5"]) == EXIT_OK
    assert tree_files(tmp_path / "x") == tree_files(tmp_path / "y")


def test_usage_errors(tmp_path, capsys):
    assert main(["gen", "--config", str(tmp_path / "missing.conf"), "--out", str(tmp_path)]) == EXIT_USAGE
    bad = tmp_path / "bad.conf"
    bad.write_text("query_count = many\n")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["gen", "--config", str(write_config(tmp_path)), "--out", str(tmp_path), "--params", "oops"]) == EXIT_USAGE
    assert main(["train", "--traces", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_malformed_spec(tmp_path):
    spec = tmp_path / "specs.jsonl"
    spec.write_text('{"query_id": "q"}\n')
    assert main(["simulate", "--specs", str(spec), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_simulate_empty_spec_list(tmp_path, caplog):
    spec = tmp_path / "empty.jsonl"
    spec.write_text("")
    assert main(["simulate", "--specs", str(spec), "--out", str(tmp_path / "o")]) == EXIT_OK
    assert not (tmp_path / "o" / "traces").exists()
    assert "no query specs" in caplog.text
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["queries"] == 0


def test_simulate_outputs(pipeline):
    traces = sorted((pipeline / "s" / "traces").iterdir())
    assert len(traces) == 8
    for t in traces:
        assert check_trace(read_trace(t)) == []


def test_train_outputs(pipeline):
    text = (pipeline / "m" / "model.json").read_text()
    model = SelectionModel.loads(text)
    assert model.dumps() + "\n" == text
    assert all(len(m.trees) == 5 for m in model.models.values())
    assert (pipeline / "m" / "timing.csv").read_text().startswith("estimator,examples,seconds\n")


def test_train_default_params():
    p = MartParams()
    assert (p.iterations, p.max_leaves) == (200, 30)


def test_train_deterministic(pipeline, tmp_path):
    assert main(["train", "--traces", str(pipeline / "s"), "--out", str(tmp_path), "--params", *FAST]) == EXIT_OK
    assert (tmp_path / "model.json").read_bytes() == (pipeline / "m" / "model.json").read_bytes()


def test_train_empty_training_set(tmp_path):
    (tmp_path / "t").mkdir()
    assert main(["train", "--traces", str(tmp_path / "t"), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_eval_holdout(pipeline, tmp_path):
    out = tmp_path / "e"
    assert main(["eval", "--traces", str(pipeline / "s"), "--model", str(pipeline / "m" / "model.json"),
                 "--out", str(out)]) == EXIT_OK
    rows = (out / "report" / "folds.csv").read_text().splitlines()
    head, row = rows[0].split(","), rows[1].split(",")
    vals = dict(zip(head, row))
    assert float(vals["oracle_l1"]) <= float(vals["selection_l1"])
    n_pipes = sum(len(read_trace(t).pipelines) for t in (pipeline / "s" / "traces").iterdir())
    assert int(vals["pipelines"]) + int(vals["excluded"]) == n_pipes


def test_eval_lofo(pipeline, tmp_path):
    out = tmp_path / "e"
    assert main(["eval", "--protocol", "lofo", "--traces", str(pipeline / "s"), "--out", str(out),
                 "--params", *FAST]) == EXIT_OK
    rows = (out / "report" / "folds.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["a", "b"]


def test_eval_holdout_requires_model(pipeline, tmp_path):
    assert main(["eval", "--traces", str(pipeline / "s"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_progress_stream(pipeline, capsys):
    trace = sorted((pipeline / "s" / "traces").iterdir())[0]
    model = str(pipeline / "m" / "model.json")
    assert main(["progress", "--trace", str(trace), "--model", model]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split("\t") == ["time", "pipeline", "estimator", "progress", "switch"]
    assert len(lines) == 1 + len(read_trace(trace))
    assert float(lines[-1].split("\t")[3]) == 1.0
    assert main(["progress", "--trace", str(trace), "--model", model, "--static-only"]) == EXIT_OK
    rows = [l.split("\t") for l in capsys.readouterr().out.splitlines()[1:]]
    for a, b in zip(rows, rows[1:]):
        if a[1] == b[1]:
            assert b[4] == ""
