"""Adapter driving an installed LLVM toolchain (clang, opt, llc, llvm-link)."""

from __future__ import annotations

import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import StageError, ToolchainError
from .measure import SubprocessExecutor

# llc has no size levels; their back end runs at -O2
LLC_LEVELS = {"-Os": "-O2", "-Oz": "-O2"}


@dataclass
class LLVMAdapter:
    clang: str = "clang"
    opt: str = "opt"
    llc: str = "llc"
    llvm_link: str = "llvm-link"
    target: str | None = None
    cflags: tuple[str, ...] = ()
    # forwarded to llc unchanged; empty keeps the back end at its level defaults
    backend_flags: tuple[str, ...] = ()
    # newer opt releases need -enable-new-pm=0 to accept legacy pass flags
    legacy_pm_flag: bool = False
    timeout: float | None = None
    name: str = field(default="llvm", init=False)

    def tools(self) -> dict[str, str]:
        return {"clang": self.clang, "opt": self.opt, "llc": self.llc, "llvm-link": self.llvm_link}

    def check(self) -> None:
        missing = [f"{k} ({v})" for k, v in self.tools().items() if shutil.which(v) is None]
        if missing:
            raise ToolchainError("missing LLVM tools: " + ", ".join(missing))

    @classmethod
    def available(cls, **kw) -> bool:
        try:
            cls(**kw).check()
        except ToolchainError:
            return False
        return True

    def version(self) -> str:
        try:
            out = subprocess.run([self.clang, "--version"], capture_output=True, text=True, check=True).stdout
        except (OSError, subprocess.CalledProcessError) as exc:
            raise ToolchainError(f"cannot query {self.clang} version: {exc}") from exc
        return out.splitlines()[0] if out else ""

    def _run(self, stage: str, cmd: Sequence[str], stdin=None) -> subprocess.CompletedProcess:
        try:
            proc = subprocess.run(list(cmd), capture_output=True, text=True, stdin=stdin, timeout=self.timeout)
        except FileNotFoundError as exc:
            raise ToolchainError(f"{cmd[0]} not found") from exc
        except subprocess.TimeoutExpired as exc:
            raise StageError(stage, f"timed out: {' '.join(cmd)}") from exc
        if proc.returncode != 0:
            raise StageError(stage, f"$ {' '.join(cmd)}\n{proc.stderr}")
        return proc

    def _target_args(self) -> list[str]:
        return [f"--target={self.target}"] if self.target else []

    def _opt_prefix(self) -> list[str]:
        return [self.opt, *(["-enable-new-pm=0"] if self.legacy_pm_flag else [])]

    def executor(self) -> SubprocessExecutor:
        return SubprocessExecutor(timeout=self.timeout)

    def introspect_pipeline(self, level: str, target: str) -> str:
        """Pass list of ``level`` as printed by ``opt -debug-pass=Arguments``."""
        cmd = [*self._opt_prefix(), level, "-debug-pass=Arguments", "-disable-output"]
        if self.target:
            cmd.append(f"-mtriple={self.target}")
        proc = self._run("introspect", cmd, stdin=subprocess.DEVNULL)
        lines = [ln for ln in proc.stderr.splitlines() if ln.strip().startswith("Pass Arguments:")]
        if not lines:
            raise ToolchainError(f"{self.opt} printed no pass arguments for {level}")
        return "\n".join(lines) + "\n"

    def _emit(self, bench, level: str, out: Path, keep_optnone: bool = False) -> Path:
        extra = ["-Xclang", "-disable-O0-optnone"] if level == "-O0" and not keep_optnone else []

        def compile_(src, dst):
            return [self.clang, *self._target_args(), *self.cflags, level, *extra,
                    "-emit-llvm", "-S", "-c", src, "-o", str(dst)]

        if len(bench.sources) == 1:
            self._run("frontend", compile_(bench.sources[0], out))
            return Path(out)
        with tempfile.TemporaryDirectory() as tmp:
            parts = [os.path.join(tmp, f"{k}.ll") for k in range(len(bench.sources))]
            for src, p in zip(bench.sources, parts):
                self._run("frontend", compile_(src, p))
            self._run("frontend", [self.llvm_link, "-S", *parts, "-o", str(out)])
        return Path(out)

    def emit_unoptimized_ir(self, bench, out):
        # optnone would make every later opt invocation a no-op
        return self._emit(bench, "-O0", Path(out))

    def optimize(self, ir, flags, out):
        self._run("optimizer", [*self._opt_prefix(), "-S", *(f"-{f}" for f in flags), str(ir), "-o", str(out)])
        return Path(out)

    def codegen_and_link(self, ir, level, object_out, exe_out, bench):
        cmd = [self.llc, LLC_LEVELS.get(level, level), "-filetype=obj", *self.backend_flags]
        if self.target:
            cmd.append(f"-mtriple={self.target}")
        self._run("codegen", [*cmd, str(ir), "-o", str(object_out)])
        self._run("link", [self.clang, *self._target_args(), str(object_out), *bench.link_flags, "-o", str(exe_out)])

    def reference_build(self, bench, level, ir_out, object_out, exe_out):
        """Whole-level build: front end and optimizer at ``level`` in one clang call per source."""
        self._emit(bench, level, Path(ir_out), keep_optnone=True)
        self.codegen_and_link(ir_out, level, object_out, exe_out, bench)
