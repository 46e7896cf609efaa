"""Command-line entry point: ``passprefix <command> [options]``.

Exit codes: 0 success, 1 correctness regression found, 2 usage error,
3 environment or toolchain error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .compiler import ArtifactStore, load_manifest
from .errors import (
    CorruptRecord,
    HarnessError,
    SchemaMismatch,
    StorageFull,
    ToolchainError,
    UnstableEnvironment,
)
from .explore import SelectionCriteria, run_exploration
from .measure import StabilityPolicy, check_environment, probe_environment
from .mock import MockCostModel, mock_adapter
from .passmodel import (
    PipelineSource,
    fixture_pipeline_text,
    generate_configs,
    load_undocumented,
    load_whitelist,
    parse_pipeline,
)
from .report import (
    RENDERERS,
    ReportRow,
    build_regression_report,
    diff_runs,
    emit_profile_plotdata,
    group_rows,
)
from .store import STORE_ENV, SCHEMA_VERSION, RunRecord, RunStore, new_run_id, sort_profiles

log = logging.getLogger("passprefix")

EXIT_OK, EXIT_REGRESSION, EXIT_USAGE, EXIT_ENV = 0, 1, 2, 3

# Values used when neither a flag nor the config file sets an option.
DEFAULTS: dict[str, Any] = {
    "adapter": "llvm",
    "level": "-O3",
    "target": "host",
    "whitelist": "llvm-6.0",
    "results_dir": "passprefix-artifacts",
    "workers": os.cpu_count() or 1,
    "repetitions": 10,
    "min_duration": 1.0,
    "cv_threshold": 0.05,
    "strict": False,
    "refuse_unstable": False,
    "timeout": None,
    "epsilon": 0.005,
    "objective": ["exec_time", "code_size"],
    "threshold": 3.0,
    "pattern_epsilon": 0.01,
    "sustain": 2,
    "format": "text",
    "drop_first": 0,
    "clang": "clang",
    "opt": "opt",
    "llc": "llc",
    "llvm_link": "llvm-link",
    "legacy_pm_flag": False,
    "backend_flag": [],
    "strict_targets": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file of option values; command-line flags take precedence")
    p.add_argument("--store", help=f"run store root (default: ${STORE_ENV} or ./passprefix-store)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_pipeline_opts(p):
    p.add_argument("--adapter", choices=["llvm", "mock"], default=None)
    p.add_argument("--model", help="mock adapter cost model (YAML/JSON)")
    p.add_argument("--pipeline", help="shipped fixture name or pass-list file instead of introspecting the compiler")
    p.add_argument("--level", choices=["-O3", "-O2", "-O1", "-Os", "-Oz"], default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--whitelist", default=None, help="transformation whitelist version (default llvm-6.0)")
    for tool in ("clang", "opt", "llc", "llvm-link"):
        p.add_argument(f"--{tool}", default=None, help=f"path of {tool}")
    p.add_argument("--legacy-pm-flag", action="store_true", default=None,
                   help="pass -enable-new-pm=0 to opt")
    p.add_argument("--backend-flag", action="append", default=None, help="extra llc flag (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="passprefix", description="Explore prefixes of an optimization pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract-pipeline", help="print the pass list of an optimization level")
    _add_common(p)
    _add_pipeline_opts(p)
    p.add_argument("--output", "-o", help="write the pass list here instead of stdout")

    p = sub.add_parser("explore", help="build, validate and time every prefix configuration")
    _add_common(p)
    _add_pipeline_opts(p)
    p.add_argument("--benchmarks", help="benchmark manifest (YAML)")
    p.add_argument("--results-dir", default=None, help="where build artifacts are kept")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--min-duration", type=float, default=None, help="calibration target per session, seconds")
    p.add_argument("--cv-threshold", type=float, default=None)
    p.add_argument("--strict", action="store_true", default=None, help="re-measure once when timing is unstable")
    p.add_argument("--refuse-unstable", action="store_true", default=None,
                   help="refuse to run when frequency scaling is active")
    p.add_argument("--timeout", type=float, default=None, help="per-run hard timeout, seconds")
    p.add_argument("--epsilon", type=float, default=None, help="relative tie band for selection")
    p.add_argument("--objective", nargs="+", default=None)
    p.add_argument("--run-id", default=None)
    p.add_argument("--dry-run", action="store_true", help="list generated configurations and exit")

    p = sub.add_parser("report", help="classified regression report for a run")
    _add_common(p)
    p.add_argument("--run", required=True, help="run id, or 'latest'")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--pattern-epsilon", type=float, default=None)
    p.add_argument("--sustain", type=int, default=None)
    p.add_argument("--format", choices=sorted(RENDERERS), default=None)
    p.add_argument("--output", "-o")

    p = sub.add_parser("diff", help="compare a run against a reference run")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--reference", default="latest-clean",
                   help="reference run id (default: newest clean run of the same target)")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--strict-targets", action="store_true", default=None)
    p.add_argument("--format", choices=["text", "json"], default=None)

    p = sub.add_parser("replay", help="register a run from fixture documents")
    _add_common(p)
    p.add_argument("fixture_dir", help="directory of store-schema documents, or a shipped fixture name")
    p.add_argument("--run-id", default=None)

    p = sub.add_parser("emit-plotdata", help="per-config improvement series of one benchmark")
    _add_common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--drop-first", type=int, default=None)
    p.add_argument("--output", "-o")
    return parser


def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in doc.items()}


def resolve_options(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file (per-command section first), then defaults."""
    cfg = _load_config(getattr(args, "config", None))
    section = {k.replace("-", "_"): v for k, v in (cfg.pop(args.command.replace("-", "_"), None) or {}).items()}
    for key, value in list(vars(args).items()):
        if value is not None:
            continue
        if key in section:
            setattr(args, key, section[key])
        elif key in cfg:
            setattr(args, key, cfg[key])
        elif key in DEFAULTS:
            setattr(args, key, DEFAULTS[key])
    if getattr(args, "store", None) is None:
        args.store = os.environ.get(STORE_ENV, "passprefix-store")
    return args


# -- commands -------------------------------------------------------------------

def _adapter(args):
    if args.adapter == "mock":
        if not args.model:
            raise UsageError("--adapter mock needs --model")
        return mock_adapter(MockCostModel.load(args.model))
    from .llvm import LLVMAdapter

    ad = LLVMAdapter(args.clang, args.opt, args.llc, args.llvm_link,
                     target=None if args.target == "host" else args.target,
                     backend_flags=tuple(args.backend_flag or ()),
                     legacy_pm_flag=bool(args.legacy_pm_flag),
                     timeout=getattr(args, "timeout", None))
    ad.check()
    return ad


def _pipeline(args, adapter):
    whitelist = load_whitelist(args.whitelist)
    undocumented = load_undocumented(args.whitelist)
    if args.pipeline:
        path = Path(args.pipeline)
        text = path.read_text("utf-8") if path.is_file() else fixture_pipeline_text(args.pipeline)
        source = PipelineSource.FIXTURE
    else:
        text = adapter.introspect_pipeline(args.level, args.target)
        source = PipelineSource.INTROSPECTED
    return parse_pipeline(text, whitelist, args.level, source=source, undocumented=undocumented)


def cmd_extract_pipeline(args, out) -> int:
    adapter = _adapter(args) if not args.pipeline else None
    pipe = _pipeline(args, adapter)
    text = "".join(f"{n}\n" for n in pipe.names)
    if args.output:
        Path(args.output).write_text(text, "utf-8")
    else:
        out.write(text)
    print(f"{len(pipe)} passes, {pipe.transformation_count} transformation configs", file=sys.stderr)
    return EXIT_OK


def cmd_explore(args, out) -> int:
    adapter = None if (args.dry_run and args.pipeline) else _adapter(args)
    pipe = _pipeline(args, adapter)
    if args.dry_run:
        for cfg in generate_configs(pipe):
            out.write(f"{cfg.prefix_len}\t{cfg.label}\n")
        return EXIT_OK
    if not args.benchmarks:
        raise UsageError("explore needs --benchmarks")
    benches = load_manifest(args.benchmarks)
    env = probe_environment()
    for line in check_environment(env, refuse=bool(args.refuse_unstable)):
        print(f"advice: {line}", file=sys.stderr)
    policy = StabilityPolicy(args.repetitions, args.min_duration, args.cv_threshold,
                             warn_only=not args.strict, timeout=args.timeout)
    criteria = SelectionCriteria(list(args.objective), epsilon=args.epsilon)
    artifacts = ArtifactStore(args.results_dir, args.target)
    result = run_exploration(benches, pipe, adapter, policy, criteria, store=artifacts, workers=args.workers)
    version = adapter.version() if hasattr(adapter, "version") else adapter.name
    run = RunRecord(
        run_id=args.run_id or new_run_id(),
        target=args.target,
        compiler_version=version,
        level=args.level,
        policy=policy.to_dict(),
        criteria=criteria.to_dict(),
        profiles=sort_profiles(result.profiles),
        environment={**env, "pipeline_source": pipe.source.value, "artifacts": str(Path(args.results_dir).resolve())},
        benchmark_failures=result.failures,
    )
    run_id = RunStore(args.store).save_run(run)
    out.write(run_id + "\n")
    if not result.profiles:
        print("no benchmark could be explored", file=sys.stderr)
        return EXIT_ENV
    return EXIT_OK


def _resolve_run(store: RunStore, run: str, target: str | None = None) -> str:
    if run == "latest":
        runs = store.list_runs(target)
        if not runs:
            raise UsageError("store holds no runs")
        return runs[-1]["run_id"]
    return run


def report_clusters(run: RunRecord, threshold: float, epsilon: float, sustain: int):
    if run.report_rows is not None:
        return group_rows([ReportRow.from_dict(r) for r in run.report_rows], threshold)
    return build_regression_report(run.profiles, threshold, epsilon, sustain)


def cmd_report(args, out) -> int:
    store = RunStore(args.store)
    run = store.load_run(_resolve_run(store, args.run))
    clusters = report_clusters(run, args.threshold, args.pattern_epsilon, args.sustain)
    text = RENDERERS[args.format](clusters)
    if args.output:
        Path(args.output).write_text(text, "utf-8")
    else:
        out.write(text)
    bad = [(p.benchmark_id, lab) for p in run.profiles for lab in p.correctness_failures]
    for bid, lab in bad:
        print(f"correctness failure: benchmark {bid}, config {lab}", file=sys.stderr)
    for bid, why in run.benchmark_failures.items():
        print(f"benchmark {bid} not explored: {why}", file=sys.stderr)
    return EXIT_REGRESSION if bad or run.benchmark_failures else EXIT_OK


def cmd_diff(args, out) -> int:
    store = RunStore(args.store)
    current = store.load_run(_resolve_run(store, args.run))
    ref_id = args.reference
    if ref_id == "latest-clean":
        ref_id = store.latest_reference(current.target)
        if ref_id is None:
            raise UsageError(f"no clean reference run for target {current.target}")
    reference = store.load_run(_resolve_run(store, ref_id, current.target))
    diff = diff_runs(current, reference, args.threshold, strict=bool(args.strict_targets))
    if args.format == "json":
        out.write(json.dumps(diff.to_dict(), indent=2) + "\n")
    else:
        out.write(diff.render())
    return EXIT_REGRESSION if diff.correctness_regressions else EXIT_OK


def _fixture_path(name: str) -> Path:
    p = Path(name)
    if p.is_dir():
        return p
    from importlib import resources

    shipped = resources.files("passprefix").joinpath(f"data/fixtures/{name}")
    if shipped.is_dir():
        return Path(str(shipped))
    raise UsageError(f"no fixture directory {name}")


def replay(fixture_dir, store: RunStore, run_id: str | None = None) -> str:
    """Register a run built only from the documents in ``fixture_dir``."""
    from .explore import ConfigProfile

    fixture_dir = Path(fixture_dir)
    docs = []
    for path in sorted(fixture_dir.glob("*.json")) + sorted(fixture_dir.glob("*.yaml")):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh) if path.suffix == ".json" else yaml.safe_load(fh)
        if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION or "kind" not in doc:
            raise SchemaMismatch(f"{path}: not a store document of schema {SCHEMA_VERSION}")
        docs.append(doc)
    if not docs:
        raise SchemaMismatch(f"{fixture_dir}: no store documents found")
    profiles = [ConfigProfile.from_dict(d) for d in docs if d["kind"] == "profile"]
    rows = [d for d in docs if d["kind"] == "report-rows"]
    if len(rows) > 1:
        raise SchemaMismatch(f"{fixture_dir}: more than one report-rows document")
    targets = {d.get("target") for d in docs if d.get("target")}
    if len(targets) > 1:
        raise SchemaMismatch(f"{fixture_dir}: documents disagree on target {sorted(targets)}")
    meta = rows[0] if rows else {}
    run = RunRecord(
        run_id=run_id or new_run_id(),
        target=targets.pop() if targets else "fixture",
        compiler_version=meta.get("compiler_version", "fixture"),
        level=meta.get("level", "-O3"),
        profiles=sort_profiles(profiles),
        environment={"replayed_from": str(fixture_dir)},
        report_rows=meta["rows"] if rows else None,
        provenance=meta.get("provenance", ""),
    )
    return store.save_run(run)


def cmd_replay(args, out) -> int:
    run_id = replay(_fixture_path(args.fixture_dir), RunStore(args.store), args.run_id)
    out.write(run_id + "\n")
    return EXIT_OK


def cmd_emit_plotdata(args, out) -> int:
    store = RunStore(args.store)
    run = store.load_run(_resolve_run(store, args.run))
    prof = next((p for p in run.profiles if p.benchmark_id == str(args.benchmark)), None)
    if prof is None:
        raise UsageError(f"run {run.run_id} has no profile for benchmark {args.benchmark}")
    text = emit_profile_plotdata(prof, args.drop_first)
    if args.output:
        Path(args.output).write_text(text, "utf-8")
    else:
        out.write(text)
    return EXIT_OK


COMMANDS = {
    "extract-pipeline": cmd_extract_pipeline,
    "explore": cmd_explore,
    "report": cmd_report,
    "diff": cmd_diff,
    "replay": cmd_replay,
    "emit-plotdata": cmd_emit_plotdata,
}

_ENV_ERRORS = (ToolchainError, UnstableEnvironment, StorageFull, CorruptRecord)


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        resolve_options(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"passprefix {args.command}: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except _ENV_ERRORS as exc:
        print(f"passprefix {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (HarnessError, OSError, ValueError) as exc:
        print(f"passprefix {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


run_cli = main

if __name__ == "__main__":
    sys.exit(main())
