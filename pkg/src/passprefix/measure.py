"""Execution-time measurement, code-size extraction and output validation."""

from __future__ import annotations

import glob
import logging
import math
import platform
import statistics
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Protocol, Sequence

from .binsize import measure_code_size
from .errors import CalibrationFailure, RunCrash, UnstableEnvironment

__all__ = [
    "Invocation",
    "MeasurementRecord",
    "ProgramOutput",
    "SessionResult",
    "StabilityPolicy",
    "SubprocessExecutor",
    "TimingResult",
    "calibrate",
    "compare_output",
    "measure_code_size",
    "measure_time",
    "validate_output",
]

log = logging.getLogger(__name__)

# Held for the whole timing phase of a config; never time two programs at once.
MEASUREMENT_TOKEN = threading.Lock()

STABILIZATION_ADVICE = (
    "pin the CPU frequency (disable DVFS / use the 'performance' governor)",
    "disable wireless radios and other background services",
    "avoid running other workloads on the machine during measurement",
)


@dataclass(frozen=True)
class StabilityPolicy:
    repetitions: int = 10
    calibration_min_duration: float = 1.0
    cv_threshold: float = 0.05
    warn_only: bool = True
    max_loop_count: int = 1 << 20
    timeout: float | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.calibration_min_duration > 0:
            raise ValueError("calibration_min_duration must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StabilityPolicy":
        return cls(**d)


@dataclass(frozen=True)
class Invocation:
    """How to run a benchmark executable."""

    args: tuple[str, ...] = ()
    cwd: str | None = None
    stdin_path: str | None = None


@dataclass(frozen=True)
class ProgramOutput:
    stdout: bytes
    exit_code: int


@dataclass(frozen=True)
class SessionResult:
    elapsed: float
    exit_code: int
    stdout: bytes = b""


class Executor(Protocol):
    def session(self, exe: str, loop_count: int, invocation: Invocation = Invocation()) -> SessionResult:
        """Run ``exe`` ``loop_count`` times back to back and time the whole loop."""
        ...


class SubprocessExecutor:
    """Runs native executables, timing wall clock around the process loop."""

    def __init__(self, clock: Callable[[], float] = time.perf_counter, timeout: float | None = None):
        self.clock = clock
        self.timeout = timeout

    def session(self, exe, loop_count, invocation=Invocation()):
        cmd = [str(exe), *invocation.args]
        stdout = b""
        code = 0
        start = self.clock()
        for _ in range(loop_count):
            stdin = open(invocation.stdin_path, "rb") if invocation.stdin_path else subprocess.DEVNULL
            try:
                proc = subprocess.run(
                    cmd, stdin=stdin, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                    cwd=invocation.cwd, timeout=self.timeout,
                )
            finally:
                if stdin is not subprocess.DEVNULL:
                    stdin.close()
            stdout, code = proc.stdout, proc.returncode
            if code < 0:
                break
        return SessionResult(self.clock() - start, code, stdout)


def run_once(executor: Executor, exe, invocation: Invocation = Invocation()) -> ProgramOutput:
    r = executor.session(exe, 1, invocation)
    return ProgramOutput(r.stdout, r.exit_code)


@dataclass
class MeasurementRecord:
    config_label: str
    exec_time_mean: float | None = None
    exec_time_samples: list[float] = field(default_factory=list)
    exec_time_cv: float | None = None
    code_size_text: int | None = None
    loop_count: int = 1
    valid: bool = True
    failure_reason: str | None = None
    unstable: bool = False
    # reserved for further resources (energy, performance counters)
    metrics: dict[str, float] = field(default_factory=dict)

    def value(self, resource: str) -> float | None:
        if resource == "exec_time":
            return self.exec_time_mean
        if resource == "code_size":
            return self.code_size_text
        return self.metrics.get(resource)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementRecord":
        return cls(**d)

    @classmethod
    def failed(cls, label: str, reason: str, code_size: int | None = None) -> "MeasurementRecord":
        return cls(label, valid=False, failure_reason=reason, code_size_text=code_size)


@dataclass
class TimingResult:
    samples: list[float]
    mean: float | None
    cv: float | None
    unstable: bool = False
    valid: bool = True
    failure_reason: str | None = None


def mean_and_cv(samples: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and coefficient of variation (population std / mean)."""
    mean = statistics.fmean(samples)
    if len(samples) < 2 or mean == 0:
        return mean, 0.0
    # pstdev's own exact mean keeps constant samples at exactly zero spread
    return mean, statistics.pstdev(samples) / mean


def _is_crash(result: SessionResult, expected_exit: int) -> bool:
    return result.exit_code < 0 or result.exit_code != expected_exit


def calibrate(
    exe,
    policy: StabilityPolicy,
    executor: Executor | None = None,
    invocation: Invocation = Invocation(),
    expected_exit: int = 0,
) -> int:
    """Smallest power-of-two loop count whose session lasts at least the minimum duration."""
    executor = executor or SubprocessExecutor(timeout=policy.timeout)
    n = 1
    while n <= policy.max_loop_count:
        try:
            r = executor.session(exe, n, invocation)
        except subprocess.TimeoutExpired as exc:
            raise CalibrationFailure(f"probe with loop count {n} timed out") from exc
        except OSError as exc:
            raise CalibrationFailure(f"could not run {exe}: {exc}") from exc
        if _is_crash(r, expected_exit):
            raise CalibrationFailure(f"probe run exited with status {r.exit_code}")
        if r.elapsed >= policy.calibration_min_duration:
            return n
        n *= 2
    raise CalibrationFailure(
        f"loop count exceeded {policy.max_loop_count} before reaching "
        f"{policy.calibration_min_duration}s"
    )


def _timed_sessions(exe, loop_count, policy, executor, invocation, expected_exit) -> TimingResult:
    samples: list[float] = []
    for i in range(policy.repetitions):
        try:
            r = executor.session(exe, loop_count, invocation)
            if _is_crash(r, expected_exit):
                raise RunCrash(f"session {i} exited with status {r.exit_code}", session=i)
        except subprocess.TimeoutExpired:
            crash = RunCrash(f"session {i} timed out", session=i)
        except RunCrash as exc:
            crash = exc
        else:
            samples.append(r.elapsed / loop_count)
            continue
        mean, cv = mean_and_cv(samples) if samples else (None, None)
        return TimingResult(samples, mean, cv, valid=False, failure_reason=str(crash))
    mean, cv = mean_and_cv(samples)
    return TimingResult(samples, mean, cv, unstable=cv > policy.cv_threshold)


def measure_time(
    exe,
    loop_count: int,
    policy: StabilityPolicy,
    executor: Executor | None = None,
    invocation: Invocation = Invocation(),
    expected_exit: int = 0,
) -> TimingResult:
    """Run ``policy.repetitions`` timed sessions of ``loop_count`` iterations each.

    A sample is one session's wall time divided by ``loop_count``.  When the
    coefficient of variation exceeds the policy threshold the result is
    flagged; strict policies re-measure once before flagging.
    """
    executor = executor or SubprocessExecutor(timeout=policy.timeout)
    result = _timed_sessions(exe, loop_count, policy, executor, invocation, expected_exit)
    if result.valid and result.unstable:
        if policy.warn_only:
            log.warning("unstable timing for %s: cv=%.4f", exe, result.cv)
        else:
            result = _timed_sessions(exe, loop_count, policy, executor, invocation, expected_exit)
            if result.unstable:
                log.warning("timing still unstable after retry for %s: cv=%.4f", exe, result.cv)
    return result


# -- output validation --------------------------------------------------------

def _as_float(tok: bytes) -> float | None:
    try:
        v = float(tok)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def compare_output(
    actual: ProgramOutput,
    reference: ProgramOutput,
    numeric_tolerance: float | None = None,
) -> str | None:
    """Return None when outputs agree, else a short description of the first difference."""
    if actual.exit_code != reference.exit_code:
        return f"exit code {actual.exit_code} != reference {reference.exit_code}"
    if numeric_tolerance is None:
        if actual.stdout == reference.stdout:
            return None
        i = next(
            (k for k, (a, b) in enumerate(zip(actual.stdout, reference.stdout)) if a != b),
            min(len(actual.stdout), len(reference.stdout)),
        )
        lo = max(0, i - 20)
        return (
            f"stdout differs at byte {i}: {actual.stdout[lo:i + 20]!r} "
            f"vs reference {reference.stdout[lo:i + 20]!r}"
        )
    got, want = actual.stdout.split(), reference.stdout.split()
    if len(got) != len(want):
        return f"stdout has {len(got)} tokens, reference has {len(want)}"
    for k, (a, b) in enumerate(zip(got, want)):
        if a == b:
            continue
        fa, fb = _as_float(a), _as_float(b)
        if fa is None or fb is None:
            return f"token {k}: {a!r} vs reference {b!r}"
        if abs(fa - fb) > numeric_tolerance:
            return f"token {k}: {fa!r} vs reference {fb!r} (|diff| > {numeric_tolerance})"
    return None


def validate_output(
    exe,
    reference_output: ProgramOutput,
    executor: Executor | None = None,
    invocation: Invocation = Invocation(),
    numeric_tolerance: float | None = None,
) -> bool:
    actual = run_once(executor or SubprocessExecutor(), exe, invocation)
    diff = compare_output(actual, reference_output, numeric_tolerance)
    if diff is not None:
        log.info("output mismatch for %s: %s", exe, diff)
    return diff is None


# -- run environment ----------------------------------------------------------

def probe_environment() -> dict[str, Any]:
    info = time.get_clock_info("perf_counter")
    governors = set()
    for path in glob.glob("/sys/devices/system/cpu/cpu[0-9]*/cpufreq/scaling_governor"):
        try:
            with open(path) as fh:
                governors.add(fh.read().strip())
        except OSError:
            pass
    return {
        "clock_source": info.implementation,
        "timer_resolution": info.resolution,
        "governors": sorted(governors),
        "machine": platform.machine(),
        "machine_id": platform.node(),
        "platform": platform.platform(),
    }


def check_environment(env: dict[str, Any], refuse: bool = False) -> list[str]:
    """Return stabilization advice for the probed environment.

    With ``refuse`` set, a frequency-scaling governor other than
    ``performance`` raises :class:`UnstableEnvironment` instead.
    """
    scaling = [g for g in env.get("governors", []) if g != "performance"]
    if not scaling:
        return []
    msg = f"frequency-scaling governor(s) active: {', '.join(scaling)}"
    if refuse:
        raise UnstableEnvironment(msg)
    return [msg, *STABILIZATION_ADVICE]
