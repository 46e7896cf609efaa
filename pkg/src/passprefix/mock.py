"""Deterministic stand-in toolchain driven by a synthetic cost model.

Executables produced here are small ELF files whose ``.text`` section has the
modelled size and whose ``.passprefix.run`` section holds a JSON descriptor
(time per run, stdout, exit status).  :class:`MockExecutor` "runs" them by
reading that descriptor, so the whole explore/report path works without a
compiler installed.
"""

from __future__ import annotations

import json
import os
import random
import re
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import yaml

from .binsize import parse_container
from .errors import StageError, UnknownPrefix
from .measure import Invocation, SessionResult
from .passmodel import fixture_pipeline_text, load_whitelist

RUN_SECTION = ".passprefix.run"

# Realistic names for synthesized pipelines; all transformations are in the
# LLVM 6.0 documented list, none of the analyses are.
_TRANSFORMS = ("simplifycfg", "sroa", "instcombine", "ipsccp", "globalopt", "mem2reg",
               "inline", "functionattrs", "jump-threading", "reassociate", "loop-rotate",
               "licm", "loop-unswitch", "indvars", "loop-unroll", "gvn", "memcpyopt", "dse",
               "adce", "globaldce")
_ANALYSES = ("domtree", "basicaa", "aa", "loops", "scalar-evolution", "targetlibinfo",
             "tti", "memdep", "lazy-value-info", "demanded-bits")

FAILURE_STAGES = ("optimizer", "codegen", "link", "output", "crash")


@dataclass(frozen=True)
class Cost:
    time: float
    size: int

    @classmethod
    def parse(cls, v) -> "Cost":
        if isinstance(v, Cost):
            return v
        if isinstance(v, Mapping):
            return cls(float(v["time"]), int(v["size"]))
        t, s = v
        return cls(float(t), int(s))


@dataclass
class BenchmarkCosts:
    configs: dict[int, Cost]
    reference: Cost | None = None
    o0: Cost | None = None
    failures: dict[int, str] = field(default_factory=dict)
    output: str = "checksum 0x2a\n"
    exit_code: int = 0

    def __post_init__(self):
        self.configs = {int(k): Cost.parse(v) for k, v in self.configs.items()}
        if 0 not in self.configs:
            raise ValueError("cost model needs an entry for prefix 0 (the -O0-custom config)")
        self.reference = Cost.parse(self.reference) if self.reference is not None else self.configs[max(self.configs)]
        self.o0 = Cost.parse(self.o0) if self.o0 is not None else self.configs[0]
        self.failures = {int(k): v for k, v in self.failures.items()}
        bad = set(self.failures.values()) - set(FAILURE_STAGES)
        if bad:
            raise ValueError(f"unknown failure kinds {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchmarkCosts":
        return cls(
            configs=dict(d["configs"]),
            reference=d.get("reference"),
            o0=d.get("o0"),
            failures=dict(d.get("failures") or {}),
            output=d.get("output", "checksum 0x2a\n"),
            exit_code=int(d.get("exit_code", 0)),
        )

    def to_dict(self) -> dict:
        cost = lambda c: {"time": c.time, "size": c.size}  # noqa: E731
        return {
            "configs": {k: cost(v) for k, v in sorted(self.configs.items())},
            "reference": cost(self.reference),
            "o0": cost(self.o0),
            "failures": dict(self.failures),
            "output": self.output,
            "exit_code": self.exit_code,
        }


@dataclass
class MockCostModel:
    """Per-benchmark costs keyed by prefix length, plus the pipeline they index."""

    benchmarks: dict[str, BenchmarkCosts] = field(default_factory=dict)
    default: BenchmarkCosts | None = None
    pipeline: list[str] | None = None
    noise: float = 0.0

    def costs_for(self, bench_id: str) -> BenchmarkCosts:
        c = self.benchmarks.get(str(bench_id), self.default)
        if c is None:
            raise UnknownPrefix(f"cost model has no entry for benchmark {bench_id}")
        return c

    def prefixes(self) -> list[int]:
        keys = set()
        for c in [*self.benchmarks.values(), *([self.default] if self.default else [])]:
            keys.update(c.configs)
        return sorted(keys)

    def pipeline_names(self) -> list[str]:
        if self.pipeline is not None:
            return list(self.pipeline)
        marks = [p for p in self.prefixes() if p > 0]
        names = []
        t = a = 0
        for pos in range(1, (max(marks) if marks else 0) + 1):
            if pos in marks:
                names.append(_TRANSFORMS[t % len(_TRANSFORMS)])
                t += 1
            else:
                names.append(_ANALYSES[a % len(_ANALYSES)])
                a += 1
        return names

    @classmethod
    def from_mapping(cls, mapping: Mapping, **kw) -> "MockCostModel":
        """Single cost table applied to every benchmark: ``{prefix: (time, size)}``."""
        return cls(default=BenchmarkCosts(dict(mapping)), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MockCostModel":
        pipeline = d.get("pipeline")
        if isinstance(pipeline, str):
            pipeline = [ln.strip() for ln in fixture_pipeline_text(pipeline).splitlines()
                        if ln.strip() and not ln.startswith("#")]
        return cls(
            benchmarks={str(k): BenchmarkCosts.from_dict(v) for k, v in (d.get("benchmarks") or {}).items()},
            default=BenchmarkCosts.from_dict(d["default"]) if d.get("default") else None,
            pipeline=pipeline,
            noise=float(d.get("noise", 0.0)),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MockCostModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def to_dict(self) -> dict:
        d: dict = {"benchmarks": {k: v.to_dict() for k, v in self.benchmarks.items()}, "noise": self.noise}
        if self.default is not None:
            d["default"] = self.default.to_dict()
        if self.pipeline is not None:
            d["pipeline"] = list(self.pipeline)
        return d


# -- ELF writer -----------------------------------------------------------------

def write_elf(path: str | os.PathLike, sections: Sequence[tuple[str, bytes]], executable: bool = True) -> None:
    """Write a minimal little-endian ELF64 file containing ``sections`` in order."""
    shstrtab = b"\0"
    name_offs = []
    for name, _ in [*sections, (".shstrtab", b"")]:
        name_offs.append(len(shstrtab))
        shstrtab += name.encode() + b"\0"
    body = b""
    offsets = []
    for _, blob in sections:
        offsets.append(64 + len(body))
        body += blob
    str_off = 64 + len(body)
    body += shstrtab
    while (64 + len(body)) % 8:
        body += b"\0"
    shoff = 64 + len(body)
    shnum = len(sections) + 2
    ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + b"\0" * 8
    header = ident + struct.pack(
        "<HHIQQQIHHHHHH", 2 if executable else 1, 62, 1, 0, 0, shoff, 0, 64, 0, 0, 64, shnum, shnum - 1
    )
    shdrs = struct.pack("<IIQQQQIIQQ", 0, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    for (name, blob), noff, off in zip(sections, name_offs, offsets):
        flags = 0x6 if name.startswith(".text") else 0x0  # ALLOC|EXECINSTR
        shdrs += struct.pack("<IIQQQQIIQQ", noff, 1, flags, 0, off, len(blob), 0, 0, 16, 0)
    shdrs += struct.pack("<IIQQQQIIQQ", name_offs[-1], 3, 0, 0, str_off, len(shstrtab), 0, 0, 1, 0)
    with open(path, "wb") as fh:
        fh.write(header + body + shdrs)


def read_descriptor(path: str | os.PathLike) -> dict:
    data = Path(path).read_bytes()
    for s in parse_container(data).sections:
        if s.name == RUN_SECTION:
            return json.loads(data[s.offset : s.offset + s.size])
    raise StageError("run", f"{path} is not a mock executable")


class MockExecutor:
    """Reports the synthetic time of mock executables instead of timing them."""

    def __init__(self, noise: float = 0.0, seed: int = 0):
        self.noise = noise
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def session(self, exe, loop_count, invocation=Invocation()):
        d = read_descriptor(exe)
        elapsed = d["time"] * loop_count
        if self.noise:
            with self._lock:
                elapsed *= 1.0 + self._rng.uniform(-self.noise, self.noise)
        return SessionResult(elapsed, d["exit_code"], d["stdout"].encode())


# -- adapter ----------------------------------------------------------------------

_HEADER = re.compile(r"^; (\w+): ?(.*)$", re.M)


def _read_ir(path: Path) -> dict[str, str]:
    return dict(_HEADER.findall(Path(path).read_text("utf-8")))


class MockAdapter:
    name = "mock"

    def __init__(self, model: MockCostModel, whitelist_version: str = "llvm-6.0"):
        self.model = model
        self.whitelist = load_whitelist(whitelist_version)
        self.calls: Counter[str] = Counter()
        self.emit_counts: Counter[str] = Counter()
        self.codegen_levels: list[str] = []
        self._lock = threading.Lock()

    def _count(self, what: str) -> None:
        with self._lock:
            self.calls[what] += 1

    def executor(self) -> MockExecutor:
        return MockExecutor(self.model.noise)

    def introspect_pipeline(self, level: str, target: str) -> str:
        self._count("introspect_pipeline")
        return "\n".join([f"# mock {level} pipeline for {target}", *self.model.pipeline_names()]) + "\n"

    def emit_unoptimized_ir(self, bench, out):
        self._count("emit_unoptimized_ir")
        with self._lock:
            self.emit_counts[bench.id] += 1
        for src in bench.sources:
            try:
                text = Path(src).read_text("utf-8")
            except OSError as exc:
                raise StageError("frontend", f"cannot read {src}: {exc}") from exc
            if text.count("{") != text.count("}"):
                raise StageError("frontend", f"{src}: syntax error: unbalanced braces")
        self.model.costs_for(bench.id)
        Path(out).write_text(f"; passprefix mock IR\n; benchmark: {bench.id}\n; prefix: 0\n; flags:\n", "utf-8")
        return Path(out)

    def optimize(self, ir, flags, out):
        self._count("optimize")
        head = _read_ir(ir)
        bench_id = head["benchmark"]
        prefix = len(flags)
        costs = self.model.costs_for(bench_id)
        if prefix not in costs.configs:
            raise UnknownPrefix(f"no cost entry for prefix {prefix} of benchmark {bench_id}")
        if costs.failures.get(prefix) == "optimizer":
            raise StageError("optimizer", f"injected optimizer failure at prefix {prefix}")
        if prefix == 0:
            Path(out).write_bytes(Path(ir).read_bytes())
        else:
            Path(out).write_text(
                f"; passprefix mock IR\n; benchmark: {bench_id}\n; prefix: {prefix}\n; flags: {' '.join(flags)}\n",
                "utf-8",
            )
        return Path(out)

    def _emit_binaries(self, costs: BenchmarkCosts, cost: Cost, failure: str | None, obj, exe) -> None:
        text = b"\xc3" * cost.size
        write_elf(obj, [(".text", text)], executable=False)
        stdout = costs.output
        code = costs.exit_code
        if failure == "output":
            stdout = stdout + "corrupted\n"
        elif failure == "crash":
            code = -11
        desc = json.dumps({"time": cost.time, "stdout": stdout, "exit_code": code}).encode()
        write_elf(exe, [(".text", text), (RUN_SECTION, desc)])

    def codegen_and_link(self, ir, level, object_out, exe_out, bench):
        self._count("codegen_and_link")
        with self._lock:
            self.codegen_levels.append(level)
        head = _read_ir(ir)
        costs = self.model.costs_for(head["benchmark"])
        prefix = int(head["prefix"])
        failure = costs.failures.get(prefix)
        if failure == "codegen":
            raise StageError("codegen", f"injected codegen failure at prefix {prefix}")
        if failure == "link":
            write_elf(object_out, [(".text", b"\xc3" * costs.configs[prefix].size)], executable=False)
            raise StageError("link", f"injected link failure at prefix {prefix}")
        self._emit_binaries(costs, costs.configs[prefix], failure, object_out, exe_out)

    def reference_build(self, bench, level, ir_out, object_out, exe_out):
        self._count("reference_build")
        costs = self.model.costs_for(bench.id)
        cost = costs.o0 if level == "-O0" else costs.reference
        Path(ir_out).write_text(f"; passprefix mock IR\n; benchmark: {bench.id}\n; level: {level}\n", "utf-8")
        self._emit_binaries(costs, cost, None, object_out, exe_out)


def mock_adapter(cost_model: MockCostModel | Mapping) -> MockAdapter:
    """Build a :class:`MockAdapter`; a plain ``{prefix: (time, size)}`` mapping applies to every benchmark."""
    if not isinstance(cost_model, MockCostModel):
        cost_model = MockCostModel.from_mapping(cost_model)
    return MockAdapter(cost_model)
