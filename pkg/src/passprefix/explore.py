"""Sweep every prefix configuration of a benchmark and pick the best one."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .compiler import (
    ArtifactStore,
    BenchmarkSpec,
    BuildArtifacts,
    BuildStatus,
    CompilerAdapter,
    build_baselines,
    build_configs,
)
from .errors import BaselineFailure, BuildFailure, CalibrationFailure, HarnessError, ZeroBaseline
from .measure import (
    MEASUREMENT_TOKEN,
    Executor,
    MeasurementRecord,
    ProgramOutput,
    StabilityPolicy,
    calibrate,
    compare_output,
    measure_code_size,
    measure_time,
    run_once,
)
from .passmodel import O0_CUSTOM, PassPipeline, generate_configs, parse_label_position

log = logging.getLogger(__name__)

PROFILE_SCHEMA = 1


@dataclass
class ProfileEntry:
    label: str
    prefix_len: int
    record: MeasurementRecord
    build_status: str = BuildStatus.OK.value

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "prefix_len": self.prefix_len,
            "build_status": self.build_status,
            "record": self.record.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileEntry":
        return cls(d["label"], int(d["prefix_len"]), MeasurementRecord.from_dict(d["record"]), d.get("build_status", "Ok"))


@dataclass
class ConfigProfile:
    benchmark_id: str
    target: str
    entries: list[ProfileEntry]
    baseline_o3: MeasurementRecord
    baseline_o0: MeasurementRecord | None = None
    baseline_o0_custom: MeasurementRecord | None = None
    level: str = "-O3"

    def __post_init__(self):
        self.benchmark_id = str(self.benchmark_id)
        self.entries = sorted(self.entries, key=lambda e: e.prefix_len)
        labels = [e.label for e in self.entries]
        if len(set(labels)) != len(labels):
            raise ValueError(f"benchmark {self.benchmark_id}: duplicate config labels")
        if not self.baseline_o3.valid or not self.baseline_o3.exec_time_mean:
            raise BaselineFailure(f"benchmark {self.benchmark_id}: {self.level} baseline is not valid")

    def valid_entries(self) -> list[ProfileEntry]:
        return [e for e in self.entries if e.record.valid and e.record.exec_time_mean is not None]

    @property
    def correctness_failures(self) -> list[str]:
        return [e.label for e in self.entries if not e.record.valid]

    def to_dict(self) -> dict:
        opt = lambda r: r.to_dict() if r is not None else None  # noqa: E731
        return {
            "schema_version": PROFILE_SCHEMA,
            "kind": "profile",
            "benchmark_id": self.benchmark_id,
            "target": self.target,
            "level": self.level,
            "baseline_o3": self.baseline_o3.to_dict(),
            "baseline_o0": opt(self.baseline_o0),
            "baseline_o0_custom": opt(self.baseline_o0_custom),
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfigProfile":
        opt = lambda r: MeasurementRecord.from_dict(r) if r is not None else None  # noqa: E731
        return cls(
            benchmark_id=d["benchmark_id"],
            target=d["target"],
            entries=[ProfileEntry.from_dict(e) for e in d["entries"]],
            baseline_o3=MeasurementRecord.from_dict(d["baseline_o3"]),
            baseline_o0=opt(d.get("baseline_o0")),
            baseline_o0_custom=opt(d.get("baseline_o0_custom")),
            level=d.get("level", "-O3"),
        )


@dataclass
class SelectionCriteria:
    objective: list[str] = field(default_factory=lambda: ["exec_time", "code_size"])
    custom_score: Callable[[MeasurementRecord], float] | None = None
    epsilon: float = 0.005

    def __post_init__(self):
        if not self.objective:
            raise ValueError("objective must name at least one resource")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    def to_dict(self) -> dict:
        return {"objective": list(self.objective), "epsilon": self.epsilon, "custom_score": self.custom_score is not None}


@dataclass(frozen=True)
class Selection:
    label: str
    prefix_len: int | None
    improvements: dict[str, float]
    is_baseline: bool = False

    @property
    def exec_pct(self) -> float:
        return self.improvements.get("exec_time", 0.0)


def improvement_pct(record: MeasurementRecord, baseline: MeasurementRecord, resource: str = "exec_time") -> float:
    """Relative change of ``record`` over ``baseline`` in percent; negative is better."""
    base = baseline.value(resource)
    if base is None or not base > 0:
        raise ZeroBaseline(f"baseline {resource} is {base!r}")
    value = record.value(resource)
    if value is None:
        raise ValueError(f"record {record.config_label} has no {resource} value")
    return 100.0 * (value - base) / base


def _val(record: MeasurementRecord, resource: str) -> float:
    v = record.value(resource)
    return math.inf if v is None else float(v)


def select_best(profile: ConfigProfile, criteria: SelectionCriteria | None = None) -> Selection:
    """Choose among valid entries and the baseline.

    The first objective is compared with a relative tolerance of
    ``criteria.epsilon``: every candidate within that band of the minimum is
    tied, and ties are resolved by the remaining objectives, then the first
    objective exactly, then in favour of the baseline, then by shorter prefix.
    Entries worse than the baseline on the first objective are never chosen.
    """
    criteria = criteria or SelectionCriteria()
    base = profile.baseline_o3
    primary, rest = criteria.objective[0], criteria.objective[1:]
    base_primary = _val(base, primary)
    valid = profile.valid_entries()
    if not valid:
        log.warning("benchmark %s: no valid configuration, falling back to %s", profile.benchmark_id, profile.level)
    # (record, is_baseline, prefix_len, label)
    cands = [(base, True, None, profile.level)]
    cands += [(e.record, False, e.prefix_len, e.label) for e in valid if _val(e.record, primary) <= base_primary]

    if criteria.custom_score is not None:
        score = lambda c: criteria.custom_score(c[0])  # noqa: E731
    else:
        score = lambda c: _val(c[0], primary)  # noqa: E731
    best_score = min(score(c) for c in cands)
    band = best_score * (1.0 + criteria.epsilon) if best_score > 0 else best_score
    tied = [c for c in cands if score(c) <= band]

    def key(c):
        return (
            *(_val(c[0], r) for r in rest),
            score(c),
            not c[1],
            c[2] if c[2] is not None else -1,
            c[3],
        )

    rec, is_base, prefix, label = min(tied, key=key)
    improvements = {}
    for r in dict.fromkeys(["exec_time", "code_size", *criteria.objective]):
        try:
            improvements[r] = improvement_pct(rec, base, r)
        except (ZeroBaseline, ValueError):
            pass
    return Selection(label, prefix, improvements, is_base)


# -- sweep ------------------------------------------------------------------------

def _measure(
    art: BuildArtifacts,
    prefix_len: int,
    reference: ProgramOutput,
    bench: BenchmarkSpec,
    policy: StabilityPolicy,
    executor: Executor,
) -> MeasurementRecord:
    """Size, validate and time one built config; failures yield an invalid record."""
    label = art.config_label
    if not art.ok:
        size = None
        if art.status is BuildStatus.LINK_FAILED and Path(art.object_path).is_file():
            try:
                size = measure_code_size(art.object_path)
            except HarnessError:
                pass
        return MeasurementRecord.failed(label, f"build {art.status.value}", size)
    try:
        size = measure_code_size(art.exe_path)
    except HarnessError as exc:
        return MeasurementRecord.failed(label, f"code size: {exc}")
    inv = bench.invocation()
    with MEASUREMENT_TOKEN:
        out = run_once(executor, art.exe_path, inv)
        diff = compare_output(out, reference, bench.numeric_tolerance)
        if diff is not None:
            return MeasurementRecord.failed(label, f"output mismatch: {diff}", size)
        try:
            loops = calibrate(art.exe_path, policy, executor, inv, reference.exit_code)
        except CalibrationFailure as exc:
            return MeasurementRecord.failed(label, f"calibration: {exc}", size)
        t = measure_time(art.exe_path, loops, policy, executor, inv, reference.exit_code)
    return MeasurementRecord(
        config_label=label,
        exec_time_mean=t.mean,
        exec_time_samples=list(t.samples),
        exec_time_cv=t.cv,
        code_size_text=size,
        loop_count=loops,
        valid=t.valid,
        failure_reason=t.failure_reason,
        unstable=t.unstable,
    )


def explore_benchmark(
    bench: BenchmarkSpec,
    pipeline: PassPipeline,
    adapter: CompilerAdapter,
    policy: StabilityPolicy,
    criteria: SelectionCriteria | None = None,
    *,
    store: ArtifactStore,
    executor: Executor | None = None,
    workers: int = 1,
) -> ConfigProfile:
    """Build, validate and measure every prefix config of ``pipeline`` for ``bench``.

    Builds run on up to ``workers`` threads; all timing is serialized.
    Raises :class:`BaselineFailure` when a baseline cannot be built or the
    reference level itself fails to run correctly.
    """
    level = pipeline.level_label
    executor = executor or adapter.executor()
    try:
        base = build_baselines(bench, adapter, level, store)
    except BuildFailure as exc:
        raise BaselineFailure(f"benchmark {bench.id}: baseline build failed at {exc.stage}") from exc
    inv = bench.invocation()
    with MEASUREMENT_TOKEN:
        reference = run_once(executor, base.o0.exe_path, inv)
    if reference.exit_code < 0:
        raise BaselineFailure(f"benchmark {bench.id}: -O0 build crashed with status {reference.exit_code}")

    o0 = _measure(base.o0, 0, reference, bench, policy, executor)
    o3 = _measure(base.reference, len(pipeline), reference, bench, policy, executor)
    if not o3.valid:
        raise BaselineFailure(f"benchmark {bench.id}: {level} baseline invalid: {o3.failure_reason}")

    configs = [c for c in generate_configs(pipeline)]
    arts = build_configs(bench, configs[1:], Path(base.unoptimized_ir), adapter, level, store, workers)
    arts = [base.o0_custom, *arts]
    entries = []
    for cfg, art in zip(configs, arts):
        rec = _measure(art, cfg.prefix_len, reference, bench, policy, executor)
        entries.append(ProfileEntry(cfg.label, cfg.prefix_len, rec, art.status.value))
    o0_custom = entries[0].record
    return ConfigProfile(bench.id, store.target, entries, o3, o0, o0_custom, level)


@dataclass
class ExplorationResult:
    profiles: list[ConfigProfile]
    failures: dict[str, str]


def run_exploration(
    benches: Iterable[BenchmarkSpec],
    pipeline: PassPipeline,
    adapter: CompilerAdapter,
    policy: StabilityPolicy,
    criteria: SelectionCriteria | None = None,
    *,
    store: ArtifactStore,
    workers: int = 1,
) -> ExplorationResult:
    """Explore each benchmark in turn; a baseline failure skips only that benchmark."""
    profiles, failures = [], {}
    executor = adapter.executor()
    for bench in benches:
        try:
            profiles.append(
                explore_benchmark(bench, pipeline, adapter, policy, criteria,
                                  store=store, executor=executor, workers=workers)
            )
        except BaselineFailure as exc:
            log.error("%s", exc)
            failures[bench.id] = str(exc)
    return ExplorationResult(profiles, failures)


def entry_prefix(label: str, entries: Sequence[ProfileEntry]) -> int | None:
    for e in entries:
        if e.label == label:
            return e.prefix_len
    return parse_label_position(label) if label != O0_CUSTOM else 0
