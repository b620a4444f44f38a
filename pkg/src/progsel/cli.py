"""Command-line entry point: gen, simulate, train, eval, progress and experiment."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .evaluation import EvaluationError
from .experiment import ErrorReport, ExperimentConfig, FoldReport, evaluate_traces, run_experiment
from .features import DEFAULT_SCHEMA, SchemaMismatchError
from .mart import MartParams, TrainingError
from .selection import SelectionError, SelectionModel, build_training_set, query_progress, train_selection
from .sim import (
    ConfigError,
    Trace,
    WorkloadConfig,
    check_trace,
    execute,
    generate_workload,
    read_specs,
    read_trace,
)

log = logging.getLogger("progsel")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
TRACE_SUFFIX = ".trace.jsonl"


class UsageError(Exception):
    """Bad arguments, missing inputs or invalid configuration (exit code 2)."""


@dataclass
class RunConfig:
    command: str
    out: Path
    seed: Optional[int] = None
    params: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)

    def manifest(self, artifacts: dict[str, str], started: float, extra: Optional[dict] = None) -> dict:
        return {
            "command": self.command,
            "version": __version__,
            "schema_version": DEFAULT_SCHEMA.version,
            "seed": self.seed,
            "params": self.params,
            "inputs": self.inputs,
            "artifacts": artifacts,
            **(extra or {}),
            # wall-clock fields; excluded from determinism comparisons
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
            "elapsed_seconds": round(time.time() - started, 3),
        }


# -- file helpers -----------------------------------------------------------


def atomic_write(path: Path, text: str) -> str:
    """Write through a temporary file in the same directory; returns the sha256 of the content."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = text.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except IsADirectoryError:
        raise UsageError(f"expected a file, got a directory: {path}") from None


def _files(path, suffix: str) -> list[Path]:
    p = Path(path)
    if p.is_dir():
        return sorted(q for q in p.rglob(f"*{suffix}") if q.is_file())
    if p.is_file():
        return [p]
    raise UsageError(f"no such file or directory: {path}")


def _parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--params expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


_MART_KEYS = {"iterations": int, "max_leaves": int, "shrinkage": float, "subsample": float, "min_leaf": int, "seed": int}


def mart_params(overrides: dict[str, str], seed: Optional[int]) -> MartParams:
    kw = {}
    for k, v in overrides.items():
        if k not in _MART_KEYS:
            raise UsageError(f"unknown training parameter {k!r}")
        try:
            kw[k] = _MART_KEYS[k](v)
        except ValueError:
            raise UsageError(f"bad value for {k}: {v!r}") from None
    if seed is not None:
        kw["seed"] = seed
    try:
        return MartParams(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def load_workload_config(path, overrides: dict[str, str], seed: Optional[int]) -> WorkloadConfig:
    try:
        cfg = WorkloadConfig.from_text(_read_text(path))
        if overrides:
            cfg = WorkloadConfig.from_mapping({**_config_mapping(cfg), **overrides})
    except ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from None
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _config_mapping(cfg: WorkloadConfig) -> dict:
    out = {}
    for line in cfg.to_text().splitlines():
        k, v = line.split(" = ", 1)
        out[k] = v
    return out


def load_traces(path) -> list[Trace]:
    files = _files(path, TRACE_SUFFIX)
    return [read_trace(f) for f in files]


def load_model(path) -> SelectionModel:
    try:
        return SelectionModel.loads(_read_text(path))
    except (json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"{path}: not a selection model ({exc})") from None


def _finish(cfg: RunConfig, artifacts: dict, started: float, extra: Optional[dict] = None) -> None:
    atomic_write(cfg.out / "manifest.json", json.dumps(cfg.manifest(artifacts, started, extra), indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_gen(args) -> int:
    started = time.time()
    overrides = _parse_overrides(args.params)
    cfg = RunConfig("gen", Path(args.out), args.seed, overrides, {"config": [str(c) for c in args.config]})
    artifacts = {}
    seen = set()
    for path in args.config:
        wc = load_workload_config(path, overrides, None)
        if args.seed is not None:
            wc = replace(wc, seed=args.seed + len(seen))
        if wc.family_id in seen:
            raise UsageError(f"duplicate family_id {wc.family_id!r}")
        seen.add(wc.family_id)
        specs = generate_workload(wc)
        text = "".join(json.dumps(s.to_dict(), sort_keys=True) + "\n" for s in specs)
        name = f"specs/{wc.family_id}.jsonl"
        artifacts[name] = atomic_write(cfg.out / name, text)
        artifacts[f"configs/{wc.family_id}.conf"] = atomic_write(cfg.out / "configs" / f"{wc.family_id}.conf", wc.to_text())
        log.info("%s: %d specs", wc.family_id, len(specs))
    _finish(cfg, artifacts, started)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    cfg = RunConfig("simulate", Path(args.out), None, {"interval": args.interval}, {"specs": str(args.specs)})
    files = [f for f in _files(args.specs, ".jsonl") if not f.name.endswith(TRACE_SUFFIX)]
    specs = []
    for f in files:
        try:
            specs.extend(read_specs(f))
        except (ConfigError, ValueError, KeyError) as exc:
            raise UsageError(f"{f}: malformed spec ({exc})") from None
    if not specs:
        log.warning("no query specs found under %s", args.specs)
    artifacts = {}
    for spec in specs:
        trace = execute(spec, args.interval)
        name = f"traces/{spec.query_id}{TRACE_SUFFIX}"
        artifacts[name] = atomic_write(cfg.out / name, trace.dumps())
        problems = check_trace(read_trace(cfg.out / name))
        if problems:
            raise RuntimeError(f"{spec.query_id}: trace invariant violated: {'; '.join(problems)}")
    _finish(cfg, artifacts, started, {"queries": len(specs)})
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    overrides = _parse_overrides(args.params)
    params = mart_params(overrides, args.seed)
    cfg = RunConfig("train", Path(args.out), params.seed, params.to_dict(), {"traces": str(args.traces)})
    traces = load_traces(args.traces)
    examples = build_training_set(traces)
    if not examples:
        raise TrainingError("empty training set")
    model = train_selection(examples, params)
    artifacts = {"model.json": atomic_write(cfg.out / "model.json", model.dumps() + "\n")}
    timing = "estimator,examples,seconds\n" + "".join(
        f"{c.value},{sum(1 for e in examples if e.labels[c] == e.labels[c])},{s:.3f}\n" for c, s in model.train_seconds.items()
    )
    atomic_write(cfg.out / "timing.csv", timing)
    for c, s in model.train_seconds.items():
        log.info("trained %s in %.2f s", c.value, s)
    _finish(cfg, artifacts, started, {"examples": len(examples), "train_seconds": {c.value: round(s, 3) for c, s in model.train_seconds.items()}})
    return EXIT_OK


def _write_report(report: ErrorReport, out: Path) -> dict:
    arts = {}
    for name, text in report.tables().items():
        arts[f"report/{name}"] = atomic_write(out / "report" / name, text)
    return arts


def cmd_eval(args) -> int:
    started = time.time()
    overrides = _parse_overrides(args.params)
    traces = load_traces(args.traces)
    if args.protocol == "holdout":
        if not args.model:
            raise UsageError("--model is required for the holdout protocol")
        model = load_model(args.model)
        if model.schema_version != DEFAULT_SCHEMA.version:
            raise SchemaMismatchError(f"model schema {model.schema_version} does not match {DEFAULT_SCHEMA.version}")
        cfg = RunConfig("eval", Path(args.out), None, {"protocol": "holdout"}, {"model": str(args.model), "traces": str(args.traces)})
        results, excluded, series = evaluate_traces(model, traces)
        report = ErrorReport([FoldReport("test", results, model, excluded)], series)
    else:
        params = mart_params(overrides, args.seed)
        cfg = RunConfig("eval", Path(args.out), params.seed, {"protocol": "lofo", **params.to_dict()}, {"traces": str(args.traces)})
        by_family: dict[str, list[Trace]] = {}
        for tr in traces:
            by_family.setdefault(tr.family_id, []).append(tr)
        if len(by_family) < 2:
            raise UsageError("leave-one-family-out needs traces from at least two families")
        families = tuple(sorted(by_family))
        exp = ExperimentConfig(families=(), held_out=families, params=params)
        report = _lofo(exp, by_family)
    artifacts = _write_report(report, cfg.out)
    _finish(cfg, artifacts, started, {"folds": [f.family_id for f in report.folds], "pipelines": len(report.results)})
    return EXIT_OK


def _lofo(exp: ExperimentConfig, by_family: dict) -> ErrorReport:
    # run_experiment takes family ids from the configs; stand in minimal configs for loaded traces
    fams = tuple(WorkloadConfig(family_id=f) for f in sorted(by_family))
    return run_experiment(replace(exp, families=fams), traces=by_family)


def cmd_progress(args) -> int:
    model = load_model(args.model)
    if not Path(args.trace).is_file():
        raise UsageError(f"no such file: {args.trace}")
    trace = read_trace(args.trace)
    out = sys.stdout
    out.write("time\tpipeline\testimator\tprogress\tswitch\n")
    for line in query_progress(model, trace, static_only=args.static_only):
        out.write(f"{line.time:.3f}\t{line.pipeline_id}\t{line.estimator.value}\t{line.progress:.6f}\t{'*' if line.switched else ''}\n")
    return EXIT_OK


def cmd_experiment(args) -> int:
    """gen, simulate and leave-one-family-out evaluation in one run."""
    started = time.time()
    overrides = _parse_overrides(args.params)
    params = mart_params(overrides, args.seed)
    configs = [load_workload_config(c, {}, None) for c in args.config]
    if args.query_count is not None:
        configs = [replace(c, query_count=args.query_count) for c in configs]
    cfg = RunConfig("experiment", Path(args.out), params.seed, params.to_dict(), {"config": [str(c) for c in args.config]})
    exp = ExperimentConfig(families=tuple(configs), params=params, interval=args.interval)
    report = run_experiment(exp)
    artifacts = _write_report(report, cfg.out)
    for f in report.folds:
        name = f"models/{f.family_id}.json"
        artifacts[name] = atomic_write(cfg.out / name, f.model.dumps() + "\n")
    _finish(cfg, artifacts, started, {"folds": [f.family_id for f in report.folds]})
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="progsel", description="Progress-estimator selection lab.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True, params=True):
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="run seed; overrides config seeds")
        if params:
            p.add_argument("--params", nargs="*", default=[], metavar="KEY=VALUE", help="parameter overrides")

    p = sub.add_parser("gen", help="generate query specs from workload configs")
    p.add_argument("--config", nargs="+", required=True, help="workload config files, one family each")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="execute specs into counter traces")
    p.add_argument("--specs", required=True, help="spec file or directory")
    p.add_argument("--interval", type=float, default=1.0, help="observation interval in simulated seconds")
    common(p, seed=False, params=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a selection model")
    p.add_argument("--traces", required=True, help="trace file or directory")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate estimators and selection policies")
    p.add_argument("--traces", required=True, help="test traces (all families for lofo)")
    p.add_argument("--model", help="selection model file (holdout protocol)")
    p.add_argument("--protocol", choices=("holdout", "lofo"), default="holdout")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("progress", help="replay a trace and stream query progress")
    p.add_argument("--trace", required=True, help="trace file")
    p.add_argument("--model", required=True, help="selection model file")
    p.add_argument("--static-only", action="store_true", help="keep the static choice for the whole pipeline")
    p.set_defaults(func=cmd_progress)

    p = sub.add_parser("experiment", help="gen, simulate and leave-one-family-out evaluation")
    p.add_argument("--config", nargs="+", required=True, help="workload config files, one family each")
    p.add_argument("--query-count", type=int, default=None, help="override every family's query_count")
    p.add_argument("--interval", type=float, default=1.0)
    common(p)
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"progsel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaMismatchError, SelectionError, TrainingError, EvaluationError, ConfigError, RuntimeError, ValueError, OSError) as exc:
        print(f"progsel: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
