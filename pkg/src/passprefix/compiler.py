"""Split compilation per configuration and retention of every build artifact.

The front end runs once per benchmark; the optimizer runs once per
configuration on that cached unoptimized IR; code generation and linking
always run at the exploration level.  All toolchain specifics live behind
:class:`CompilerAdapter`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import yaml

from .errors import BuildFailure, SchemaMismatch, StageError
from .measure import Executor, Invocation
from .passmodel import O0_CUSTOM, OptConfig, sanitize_label

MANIFEST_SCHEMA = 1

IR_NAME = "optimized.ir"
OBJECT_NAME = "object.o"
EXE_NAME = "exe"
LOG_NAME = "build.log"


@dataclass(frozen=True)
class BenchmarkSpec:
    id: str
    name: str
    sources: tuple[str, ...]
    run_args: tuple[str, ...] = ()
    expected_input: str | None = None
    workdir: str | None = None
    link_flags: tuple[str, ...] = ()
    numeric_tolerance: float | None = None

    def __post_init__(self):
        if not self.sources:
            raise ValueError(f"benchmark {self.id}: sources must be non-empty")

    def invocation(self) -> Invocation:
        return Invocation(tuple(self.run_args), self.workdir, self.expected_input)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("sources", "run_args", "link_flags"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "BenchmarkSpec":
        def resolve(p):
            if p is None or base is None or os.path.isabs(p):
                return p
            return str(base / p)

        return cls(
            id=str(d["id"]),
            name=d.get("name", str(d["id"])),
            sources=tuple(resolve(s) for s in d.get("sources") or ()),
            run_args=tuple(str(a) for a in d.get("run_args") or ()),
            expected_input=resolve(d.get("expected_input")),
            workdir=resolve(d.get("workdir")),
            link_flags=tuple(d.get("link_flags") or ()),
            numeric_tolerance=d.get("numeric_tolerance"),
        )


def load_manifest(path: str | os.PathLike) -> list[BenchmarkSpec]:
    """Read a YAML benchmark manifest (one document per benchmark).

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    specs = []
    with open(path, encoding="utf-8") as fh:
        for doc in yaml.safe_load_all(fh):
            if doc is None:
                continue
            if doc.get("schema", MANIFEST_SCHEMA) != MANIFEST_SCHEMA:
                raise SchemaMismatch(f"{path}: unsupported manifest schema {doc.get('schema')}")
            specs.append(BenchmarkSpec.from_dict(doc, path.parent))
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate benchmark ids")
    return specs


def dump_manifest(specs: Iterable[BenchmarkSpec], path: str | os.PathLike) -> None:
    docs = [{"schema": MANIFEST_SCHEMA, **s.to_dict()} for s in specs]
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump_all(docs, fh, sort_keys=False)


class CompilerAdapter(Protocol):
    """Toolchain driver contract.

    Every stage writes its product to the given output path and raises
    :class:`StageError` on failure.  ``optimize`` with no flags must return
    IR equivalent to its input.
    """

    name: str

    def emit_unoptimized_ir(self, bench: BenchmarkSpec, out: Path) -> Path: ...

    def optimize(self, ir: Path, flags: Sequence[str], out: Path) -> Path: ...

    def codegen_and_link(
        self, ir: Path, level: str, object_out: Path, exe_out: Path, bench: BenchmarkSpec
    ) -> None: ...

    def reference_build(
        self, bench: BenchmarkSpec, level: str, ir_out: Path, object_out: Path, exe_out: Path
    ) -> None: ...

    def introspect_pipeline(self, level: str, target: str) -> str: ...

    def executor(self) -> Executor: ...


class BuildStatus(str, enum.Enum):
    OK = "Ok"
    OPTIMIZER_FAILED = "OptimizerFailed"
    CODEGEN_FAILED = "CodegenFailed"
    LINK_FAILED = "LinkFailed"


_STAGE_STATUS = {
    "optimizer": BuildStatus.OPTIMIZER_FAILED,
    "codegen": BuildStatus.CODEGEN_FAILED,
    "link": BuildStatus.LINK_FAILED,
}


@dataclass
class BuildArtifacts:
    config_label: str
    ir_path: str
    object_path: str
    exe_path: str
    status: BuildStatus = BuildStatus.OK
    log: str = ""

    @property
    def ok(self) -> bool:
        return self.status is BuildStatus.OK

    def to_dict(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BuildArtifacts":
        return cls(**{**d, "status": BuildStatus(d["status"])})


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ArtifactStore:
    """Directory layout ``<results>/<target>/benchmark-<id>/<config-label>/``.

    Each benchmark directory carries an ``index.json`` mapping config labels
    to their directory, build status and per-file SHA-256 digests.
    """

    def __init__(self, results_dir: str | os.PathLike, target: str):
        self.root = Path(results_dir)
        self.target = target
        self._lock = threading.Lock()

    def benchmark_dir(self, bench_id: str) -> Path:
        return self.root / self.target / f"benchmark-{bench_id}"

    def config_dir(self, bench_id: str, label: str) -> Path:
        d = self.benchmark_dir(bench_id) / sanitize_label(label)
        d.mkdir(parents=True, exist_ok=True)
        return d

    def unoptimized_ir_path(self, bench_id: str) -> Path:
        d = self.benchmark_dir(bench_id)
        d.mkdir(parents=True, exist_ok=True)
        return d / "unoptimized.ir"

    def paths(self, bench_id: str, label: str) -> tuple[Path, Path, Path, Path]:
        d = self.config_dir(bench_id, label)
        return d / IR_NAME, d / OBJECT_NAME, d / EXE_NAME, d / LOG_NAME

    def index_path(self, bench_id: str) -> Path:
        return self.benchmark_dir(bench_id) / "index.json"

    def load_index(self, bench_id: str) -> dict:
        p = self.index_path(bench_id)
        if not p.exists():
            return {}
        return json.loads(p.read_text("utf-8"))

    def record(self, bench_id: str, art: BuildArtifacts) -> None:
        files = {}
        for p in (art.ir_path, art.object_path, art.exe_path):
            if p and os.path.isfile(p):
                files[os.path.basename(p)] = {"sha256": file_digest(p), "size": os.path.getsize(p)}
        entry = {
            "dir": sanitize_label(art.config_label),
            "status": art.status.value,
            "files": files,
        }
        with self._lock:
            index = self.load_index(bench_id)
            index[art.config_label] = entry
            atomic_write_text(self.index_path(bench_id), json.dumps(index, indent=2, sort_keys=True))


def _nonempty(*paths: Path) -> Path | None:
    for p in paths:
        if not p.is_file() or p.stat().st_size == 0:
            return p
    return None


@dataclass
class Baselines:
    o0: BuildArtifacts
    o0_custom: BuildArtifacts
    reference: BuildArtifacts
    unoptimized_ir: str


def _reference(bench, adapter, level, label, store) -> BuildArtifacts:
    ir, obj, exe, logp = store.paths(bench.id, label)
    try:
        adapter.reference_build(bench, level, ir, obj, exe)
    except StageError as exc:
        logp.write_text(exc.log, "utf-8")
        raise BuildFailure(exc.stage, exc.log, bench.id) from exc
    missing = _nonempty(ir, obj, exe)
    if missing is not None:
        raise BuildFailure("link", f"{missing} missing or empty", bench.id)
    logp.write_text(f"{label}: monolithic build at {level}\n", "utf-8")
    art = BuildArtifacts(label, str(ir), str(obj), str(exe))
    store.record(bench.id, art)
    return art


def emit_ir(bench: BenchmarkSpec, adapter: CompilerAdapter, store: ArtifactStore) -> Path:
    out = store.unoptimized_ir_path(bench.id)
    try:
        return adapter.emit_unoptimized_ir(bench, out)
    except StageError as exc:
        raise BuildFailure(exc.stage, exc.log, bench.id) from exc


def build_baselines(
    bench: BenchmarkSpec,
    adapter: CompilerAdapter,
    level: str,
    store: ArtifactStore,
    cached_ir: Path | None = None,
) -> Baselines:
    """Build the monolithic -O0, the split -O0-custom and the monolithic reference.

    Any failure raises :class:`BuildFailure`; the benchmark cannot be explored
    without all three.
    """
    if cached_ir is None:
        cached_ir = emit_ir(bench, adapter, store)
    o0 = _reference(bench, adapter, "-O0", "-O0", store)
    empty = OptConfig(O0_CUSTOM, 0, None, ())
    o0_custom = build_config(bench, empty, cached_ir, adapter, level, store)
    if not o0_custom.ok:
        raise BuildFailure(o0_custom.status.value, o0_custom.log, bench.id)
    reference = _reference(bench, adapter, level, level, store)
    return Baselines(o0, o0_custom, reference, str(cached_ir))


def build_config(
    bench: BenchmarkSpec,
    config: OptConfig,
    cached_ir: Path,
    adapter: CompilerAdapter,
    level: str,
    store: ArtifactStore,
) -> BuildArtifacts:
    """Optimize the cached IR with ``config.flags`` then generate code at ``level``.

    Failures are reported through the returned status, never raised.
    """
    ir, obj, exe, logp = store.paths(bench.id, config.label)
    art = BuildArtifacts(config.label, str(ir), str(obj), str(exe))
    lines = [f"config: {config.label}", f"flags: {' '.join(config.flags)}", f"backend level: {level}"]
    try:
        adapter.optimize(Path(cached_ir), config.flags, ir)
        if _nonempty(ir) is not None:
            raise StageError("optimizer", "optimizer produced no IR")
        adapter.codegen_and_link(ir, level, obj, exe, bench)
        if _nonempty(obj) is not None:
            raise StageError("codegen", "no object file produced")
        if _nonempty(exe) is not None:
            raise StageError("link", "no executable produced")
    except StageError as exc:
        art.status = _STAGE_STATUS.get(exc.stage, BuildStatus.OPTIMIZER_FAILED)
        lines += [f"FAILED at {exc.stage}", exc.log]
    art.log = "\n".join(lines) + "\n"
    logp.write_text(art.log, "utf-8")
    store.record(bench.id, art)
    return art


def build_configs(
    bench: BenchmarkSpec,
    configs: Sequence[OptConfig],
    cached_ir: Path,
    adapter: CompilerAdapter,
    level: str,
    store: ArtifactStore,
    workers: int = 1,
) -> list[BuildArtifacts]:
    """Build many configs, up to ``workers`` at a time; result order follows ``configs``."""
    if workers <= 1:
        return [build_config(bench, c, cached_ir, adapter, level, store) for c in configs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(build_config, bench, c, cached_ir, adapter, level, store) for c in configs]
        return [f.result() for f in futures]
