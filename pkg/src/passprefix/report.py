"""Regression-report classification, grouping, rendering and run diffing."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .errors import IncompatibleRuns, ZeroBaseline
from .explore import ConfigProfile, SelectionCriteria, improvement_pct, select_best

NO_PATTERN = "no pattern"
REPORT_SCHEMA = 1

DEFAULT_THRESHOLD = 3.0
DEFAULT_EPSILON = 0.01
DEFAULT_SUSTAIN = 2


@dataclass(frozen=True)
class ReportRow:
    benchmark_id: str
    first_better: str
    gains_removing: str
    best_overall: str
    exec_reduction_pct: float
    # explicit cluster key for rows the strict key would leave ungrouped
    group_as: tuple[str, str] | None = None

    @property
    def key(self) -> tuple[str, str]:
        return (self.first_better, self.gains_removing)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.group_as is None:
            del d["group_as"]
        else:
            d["group_as"] = list(self.group_as)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReportRow":
        ga = d.get("group_as")
        return cls(
            str(d["benchmark_id"]),
            d["first_better"],
            d["gains_removing"],
            d["best_overall"],
            float(d["exec_reduction_pct"]),
            tuple(ga) if ga else None,
        )


@dataclass
class ReportCluster:
    """One first-level group; ``key`` is None for the trailing ungrouped rows."""

    key: tuple[str, str] | None
    rows: list[ReportRow]
    subgroups: list[list[ReportRow]] = field(default_factory=list)

    @property
    def lead(self) -> float:
        return min(r.exec_reduction_pct for r in self.rows)


# -- classification ----------------------------------------------------------------

def _valid_series(profile: ConfigProfile):
    return [e for e in profile.entries if e.record.valid and e.record.exec_time_mean is not None]


def _beats(entry, base_time: float, epsilon: float) -> bool:
    return entry.record.exec_time_mean < base_time * (1.0 - epsilon)


def _gain_run(profile: ConfigProfile, epsilon: float, sustain: int) -> tuple[int, int] | None:
    """Indices [start, end) into the valid series of the first sustained beating run."""
    if sustain < 1:
        raise ValueError("sustain must be >= 1")
    series = _valid_series(profile)
    base = profile.baseline_o3.exec_time_mean
    i = 0
    while i < len(series):
        if not _beats(series[i], base, epsilon):
            i += 1
            continue
        j = i
        while j < len(series) and _beats(series[j], base, epsilon):
            j += 1
        if j - i >= sustain:
            return i, j
        i = j
    return None


def first_better_config(profile: ConfigProfile, epsilon: float = DEFAULT_EPSILON, sustain: int = DEFAULT_SUSTAIN) -> str:
    """Label of the first valid config starting a run of ``sustain`` configs beating the baseline.

    Invalid configs are skipped rather than breaking a run.  "Beating" means
    faster than the baseline by more than ``epsilon`` (relative).
    """
    run = _gain_run(profile, epsilon, sustain)
    return NO_PATTERN if run is None else _valid_series(profile)[run[0]].label


def gains_removing_config(
    profile: ConfigProfile,
    first_better_label: str,
    epsilon: float = DEFAULT_EPSILON,
) -> str:
    """First valid config after the gain region that starts at ``first_better_label``."""
    if first_better_label == NO_PATTERN:
        return NO_PATTERN
    series = _valid_series(profile)
    base = profile.baseline_o3.exec_time_mean
    idx = next((k for k, e in enumerate(series) if e.label == first_better_label), None)
    if idx is None:
        raise ValueError(f"{first_better_label!r} is not a valid config of benchmark {profile.benchmark_id}")
    for e in series[idx:]:
        if not _beats(e, base, epsilon):
            return e.label
    return NO_PATTERN


def classify_profile(
    profile: ConfigProfile,
    criteria: SelectionCriteria | None = None,
    epsilon: float = DEFAULT_EPSILON,
    sustain: int = DEFAULT_SUSTAIN,
) -> ReportRow:
    first = first_better_config(profile, epsilon, sustain)
    gains = gains_removing_config(profile, first, epsilon)
    best = select_best(profile, criteria)
    return ReportRow(profile.benchmark_id, first, gains, best.label, best.exec_pct)


# -- grouping -------------------------------------------------------------------

def _id_key(bench_id: str):
    return (0, int(bench_id), "") if bench_id.isdigit() else (1, 0, bench_id)


def _gain_key(row: ReportRow):
    return (row.exec_reduction_pct, _id_key(row.benchmark_id))


def group_rows(rows: Iterable[ReportRow], threshold_pct: float = DEFAULT_THRESHOLD) -> list[ReportCluster]:
    """Filter and group classified rows.

    Rows sharing a (first-better, gains-removing) key with at least one other
    row form a cluster.  Inside a cluster, rows sharing a best-overall config
    with another row come first as contiguous subgroups, then the remaining
    rows, then rows attached through ``group_as``; each part is gain-sorted.
    Clusters are ordered by their best gain; rows in no cluster come last.
    """
    rows = [r for r in rows if r.exec_reduction_pct < -threshold_pct]
    native: dict[tuple[str, str], list[ReportRow]] = defaultdict(list)
    for r in rows:
        if r.group_as is None and r.first_better != NO_PATTERN:
            native[r.key].append(r)
    keys = {k for k, members in native.items() if len(members) >= 2}
    attached: dict[tuple[str, str], list[ReportRow]] = defaultdict(list)
    loose = []
    for r in rows:
        if r.group_as is not None and tuple(r.group_as) in keys:
            attached[tuple(r.group_as)].append(r)
        elif r.group_as is None and r.key in keys:
            continue
        else:
            loose.append(r)

    clusters = []
    for k in keys:
        by_best: dict[str, list[ReportRow]] = defaultdict(list)
        for r in native[k]:
            by_best[r.best_overall].append(r)
        subgroups = [sorted(g, key=_gain_key) for g in by_best.values() if len(g) >= 2]
        subgroups.sort(key=lambda g: (_gain_key(g[0]), g[0].best_overall))
        singles = sorted((g[0] for g in by_best.values() if len(g) == 1), key=_gain_key)
        ordered = [r for g in subgroups for r in g] + singles + sorted(attached[k], key=_gain_key)
        clusters.append(ReportCluster(k, ordered, subgroups))
    clusters.sort(key=lambda c: (c.lead, -len(c.rows), c.key))
    if loose:
        clusters.append(ReportCluster(None, sorted(loose, key=_gain_key)))
    return clusters


def build_regression_report(
    profiles: Iterable[ConfigProfile],
    threshold_pct: float = DEFAULT_THRESHOLD,
    epsilon: float = DEFAULT_EPSILON,
    sustain: int = DEFAULT_SUSTAIN,
    criteria: SelectionCriteria | None = None,
) -> list[ReportCluster]:
    rows = [classify_profile(p, criteria, epsilon, sustain) for p in profiles]
    return group_rows(rows, threshold_pct)


def report_rows(clusters: Sequence[ReportCluster]) -> list[ReportRow]:
    return [r for c in clusters for r in c.rows]


# -- rendering ------------------------------------------------------------------

HEADERS = ("group", "benchmark", "first_better", "gains_removing", "best_overall", "exec_reduction_pct")


def _table(clusters: Sequence[ReportCluster]) -> list[tuple[str, ...]]:
    out = []
    for n, c in enumerate(clusters, 1):
        tag = str(n) if c.key is not None else "-"
        for r in c.rows:
            out.append((tag, r.benchmark_id, r.first_better, r.gains_removing, r.best_overall,
                        f"{r.exec_reduction_pct:.2f}"))
    return out


def render_text(clusters: Sequence[ReportCluster]) -> str:
    table = [HEADERS, *_table(clusters)]
    widths = [max(len(row[i]) for row in table) for i in range(len(HEADERS))]
    lines = []
    for k, row in enumerate(table):
        cells = [c.rjust(w) if i in (0, 1, 5) else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_csv(clusters: Sequence[ReportCluster], delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(HEADERS)
    w.writerows(_table(clusters))
    return buf.getvalue()


def render_json(clusters: Sequence[ReportCluster]) -> str:
    doc = {
        "schema_version": REPORT_SCHEMA,
        "clusters": [
            {
                "key": list(c.key) if c.key else None,
                "rows": [
                    {**r.to_dict(), "exec_reduction_pct": round(r.exec_reduction_pct, 2)} for r in c.rows
                ],
            }
            for c in clusters
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


RENDERERS = {"text": render_text, "csv": render_csv, "json": render_json}


# -- run diffing ------------------------------------------------------------------

@dataclass(frozen=True)
class DiffEntry:
    benchmark_id: str
    kind: str  # "correctness", "baseline_time" or "best_improvement"
    tag: str  # "regression", "improvement" or "lost hidden potential"
    config: str | None = None
    reference: float | None = None
    current: float | None = None
    delta: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunDiff:
    entries: list[DiffEntry] = field(default_factory=list)
    only_in_current: list[str] = field(default_factory=list)
    only_in_reference: list[str] = field(default_factory=list)

    @property
    def correctness_regressions(self) -> list[DiffEntry]:
        return [e for e in self.entries if e.kind == "correctness"]

    def is_empty(self) -> bool:
        return not (self.entries or self.only_in_current or self.only_in_reference)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA,
            "entries": [e.to_dict() for e in self.entries],
            "only_in_current": self.only_in_current,
            "only_in_reference": self.only_in_reference,
        }

    def render(self) -> str:
        lines = []
        for e in self.entries:
            if e.kind == "correctness":
                lines.append(f"{e.benchmark_id}: {e.config}: valid -> invalid ({e.tag})")
            else:
                lines.append(
                    f"{e.benchmark_id}: {e.kind} {e.reference:.2f} -> {e.current:.2f} "
                    f"({e.delta:+.2f}) {e.tag}"
                )
        for b in self.only_in_current:
            lines.append(f"{b}: only in current run")
        for b in self.only_in_reference:
            lines.append(f"{b}: only in reference run")
        return "\n".join(lines) + ("\n" if lines else "")


def _profile_map(profiles) -> dict[str, ConfigProfile]:
    return {p.benchmark_id: p for p in profiles}


def diff_profiles(
    current: Sequence[ConfigProfile],
    reference: Sequence[ConfigProfile],
    regression_threshold_pct: float = DEFAULT_THRESHOLD,
    criteria: SelectionCriteria | None = None,
) -> RunDiff:
    cur, ref = _profile_map(current), _profile_map(reference)
    diff = RunDiff(
        only_in_current=sorted(set(cur) - set(ref), key=_id_key),
        only_in_reference=sorted(set(ref) - set(cur), key=_id_key),
    )
    for bid in sorted(set(cur) & set(ref), key=_id_key):
        c, r = cur[bid], ref[bid]
        ref_valid = {e.label for e in r.entries if e.record.valid}
        for e in c.entries:
            if not e.record.valid and e.label in ref_valid:
                diff.entries.append(DiffEntry(bid, "correctness", "regression", e.label))
        try:
            pct = improvement_pct(c.baseline_o3, r.baseline_o3)
        except ZeroBaseline:
            pct = 0.0
        if abs(pct) > regression_threshold_pct:
            diff.entries.append(DiffEntry(
                bid, "baseline_time", "regression" if pct > 0 else "improvement", c.level,
                r.baseline_o3.exec_time_mean, c.baseline_o3.exec_time_mean, pct,
            ))
        rb, cb = select_best(r, criteria).exec_pct, select_best(c, criteria).exec_pct
        delta = cb - rb
        if abs(delta) > regression_threshold_pct:
            diff.entries.append(DiffEntry(
                bid, "best_improvement", "lost hidden potential" if delta > 0 else "improvement",
                None, rb, cb, delta,
            ))
    return diff


def diff_runs(current, reference, regression_threshold_pct: float = DEFAULT_THRESHOLD,
              strict: bool = False, criteria: SelectionCriteria | None = None) -> RunDiff:
    """Compare two stored runs benchmark by benchmark (see :func:`diff_profiles`)."""
    if current.target != reference.target:
        if strict:
            raise IncompatibleRuns(f"targets differ: {current.target} vs {reference.target}")
    return diff_profiles(current.profiles, reference.profiles, regression_threshold_pct, criteria)


# -- plot data ---------------------------------------------------------------------

PLOT_HEADER = ("config", "exec_time_pct", "code_size_pct")


def _pct_or_none(record, base, resource):
    if record is None or not record.valid:
        return None
    try:
        return improvement_pct(record, base, resource)
    except (ZeroBaseline, ValueError):
        return None


def profile_series(profile: ConfigProfile | None, drop_first: int = 0) -> list[tuple[str, float | None, float | None]]:
    """(label, exec %, size %) per config in axis order, starting with -O0."""
    if profile is None or not profile.entries:
        return []
    base = profile.baseline_o3
    points = [("-O0", profile.baseline_o0)] if profile.baseline_o0 is not None else []
    points += [(e.label, e.record) for e in profile.entries]
    series = [(lab, _pct_or_none(r, base, "exec_time"), _pct_or_none(r, base, "code_size")) for lab, r in points]
    return series[drop_first:]


def emit_profile_plotdata(profile: ConfigProfile | None, drop_first: int = 0) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_HEADER)
    for lab, ex, sz in profile_series(profile, drop_first):
        w.writerow((lab, "" if ex is None else repr(ex), "" if sz is None else repr(sz)))
    return buf.getvalue()
