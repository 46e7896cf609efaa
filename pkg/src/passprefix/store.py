"""On-disk run store: one directory of JSON documents per run plus a checksummed index.

Layout::

    <root>/index.json
    <root>/runs/<run_id>/run.json
    <root>/runs/<run_id>/profiles/<benchmark>.json
    <root>/runs/<run_id>/rows.json          (fixture-backed runs only)

A run becomes visible only once its directory has been renamed into place
and the index (written via atomic rename) lists it.
"""

from __future__ import annotations

import datetime as _dt
import errno
import hashlib
import json
import os
import shutil
import tempfile
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .compiler import atomic_write_text
from .errors import CorruptRecord, DuplicateRunId, NotFound, SchemaMismatch, StorageFull
from .explore import ConfigProfile
from .passmodel import sanitize_label

SCHEMA_VERSION = 1
STORE_ENV = "PASSPREFIX_STORE"


def new_run_id(now: _dt.datetime | None = None) -> str:
    now = now or _dt.datetime.now(_dt.timezone.utc)
    return now.strftime("%Y%m%dT%H%M%S") + f"-{uuid.uuid4().hex[:8]}"


@dataclass
class RunRecord:
    run_id: str
    target: str
    compiler_version: str = ""
    level: str = "-O3"
    policy: dict[str, Any] = field(default_factory=dict)
    criteria: dict[str, Any] = field(default_factory=dict)
    profiles: list[ConfigProfile] = field(default_factory=list)
    environment: dict[str, Any] = field(default_factory=dict)
    created: str = ""
    partial: bool = False
    benchmark_failures: dict[str, str] = field(default_factory=dict)
    # pre-classified report rows for runs replayed from row-level fixtures
    report_rows: list[dict] | None = None
    provenance: str = ""

    @property
    def correctness_failures(self) -> int:
        return sum(len(p.correctness_failures) for p in self.profiles) + len(self.benchmark_failures)

    def header(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "run",
            "run_id": self.run_id,
            "target": self.target,
            "compiler_version": self.compiler_version,
            "level": self.level,
            "policy": self.policy,
            "criteria": self.criteria,
            "environment": self.environment,
            "created": self.created,
            "partial": self.partial,
            "benchmark_failures": self.benchmark_failures,
            "provenance": self.provenance,
        }


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dumps(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _check_schema(doc: dict, where: str) -> dict:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"{where}: schema_version {doc.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return doc


def rows_document(rows: list[dict], target: str, provenance: str = "") -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": "report-rows", "target": target,
            "provenance": provenance, "rows": rows}


class RunStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    @classmethod
    def from_env(cls, default: str | os.PathLike = "passprefix-store") -> "RunStore":
        return cls(os.environ.get(STORE_ENV, default))

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def _index(self) -> dict:
        if not self.index_path.exists():
            return {"schema_version": SCHEMA_VERSION, "runs": []}
        try:
            doc = json.loads(self.index_path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"{self.index_path}: {exc}") from exc
        return _check_schema(doc, str(self.index_path))

    def list_runs(self, target: str | None = None) -> list[dict]:
        """Index entries in save order."""
        return [r for r in self._index()["runs"] if target is None or r["target"] == target]

    def save_run(self, run: RunRecord) -> str:
        index = self._index()
        if any(r["run_id"] == run.run_id for r in index["runs"]) or self.run_dir(run.run_id).exists():
            raise DuplicateRunId(run.run_id)
        if not run.created:
            run.created = _dt.datetime.now(_dt.timezone.utc).isoformat()
        docs: dict[str, bytes] = {"run.json": _dumps(run.header())}
        for p in run.profiles:
            docs[f"profiles/{sanitize_label(p.benchmark_id)}.json"] = _dumps(p.to_dict())
        if run.report_rows is not None:
            docs["rows.json"] = _dumps(rows_document(run.report_rows, run.target, run.provenance))
        (self.root / "runs").mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=self.root / "runs", prefix=f".tmp-{run.run_id}-"))
        try:
            for rel, data in docs.items():
                path = tmp / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
            os.rename(tmp, self.run_dir(run.run_id))
        except OSError as exc:
            shutil.rmtree(tmp, ignore_errors=True)
            if exc.errno == errno.ENOSPC:
                raise StorageFull(str(exc)) from exc
            raise
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        index["runs"].append({
            "run_id": run.run_id,
            "target": run.target,
            "created": run.created,
            "correctness_failures": run.correctness_failures,
            "partial": run.partial,
            "files": {rel: _sha256(data) for rel, data in docs.items()},
        })
        try:
            atomic_write_text(self.index_path, json.dumps(index, indent=2, sort_keys=True) + "\n")
        except BaseException as exc:
            shutil.rmtree(self.run_dir(run.run_id), ignore_errors=True)
            if isinstance(exc, OSError) and exc.errno == errno.ENOSPC:
                raise StorageFull(str(exc)) from exc
            raise
        return run.run_id

    def _entry(self, run_id: str) -> dict:
        for r in self._index()["runs"]:
            if r["run_id"] == run_id:
                return r
        raise NotFound(f"no run {run_id!r} in {self.root}")

    def load_run(self, run_id: str) -> RunRecord:
        entry = self._entry(run_id)
        base = self.run_dir(run_id)
        docs = {}
        for rel, digest in entry["files"].items():
            try:
                data = (base / rel).read_bytes()
            except FileNotFoundError as exc:
                raise CorruptRecord(f"{run_id}: missing {rel}") from exc
            if _sha256(data) != digest:
                raise CorruptRecord(f"{run_id}: checksum mismatch in {rel}")
            try:
                docs[rel] = _check_schema(json.loads(data), f"{run_id}/{rel}")
            except json.JSONDecodeError as exc:
                raise CorruptRecord(f"{run_id}: {rel}: {exc}") from exc
        head = docs.pop("run.json")
        rows = docs.pop("rows.json", None)
        profiles = [ConfigProfile.from_dict(d) for _, d in sorted(docs.items())]
        return RunRecord(
            run_id=head["run_id"],
            target=head["target"],
            compiler_version=head.get("compiler_version", ""),
            level=head.get("level", "-O3"),
            policy=head.get("policy", {}),
            criteria=head.get("criteria", {}),
            profiles=sorted(profiles, key=lambda p: _natural(p.benchmark_id)),
            environment=head.get("environment", {}),
            created=head.get("created", ""),
            partial=head.get("partial", False),
            benchmark_failures=head.get("benchmark_failures", {}),
            report_rows=rows["rows"] if rows else None,
            provenance=head.get("provenance", ""),
        )

    def latest_reference(self, target: str) -> str | None:
        """Newest complete run for ``target`` without correctness failures."""
        for r in reversed(self.list_runs(target)):
            if r["correctness_failures"] == 0 and not r.get("partial"):
                return r["run_id"]
        return None

    def prune(self, run_id: str) -> None:
        self._entry(run_id)
        index = self._index()
        index["runs"] = [r for r in index["runs"] if r["run_id"] != run_id]
        atomic_write_text(self.index_path, json.dumps(index, indent=2, sort_keys=True) + "\n")
        shutil.rmtree(self.run_dir(run_id), ignore_errors=True)


def _natural(bench_id: str):
    return (0, int(bench_id), "") if bench_id.isdigit() else (1, 0, bench_id)


def sort_profiles(profiles):
    return sorted(profiles, key=lambda p: _natural(p.benchmark_id))
