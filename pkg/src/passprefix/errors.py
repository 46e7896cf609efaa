"""Exception hierarchy shared by all harness modules."""

from __future__ import annotations


class HarnessError(Exception):
    """Base class for every error raised by the harness."""


# passmodel
class EmptyInput(HarnessError):
    pass


class MalformedLine(HarnessError):
    def __init__(self, lineno: int, token: str):
        super().__init__(f"line {lineno}: not a valid pass identifier: {token!r}")
        self.lineno = lineno
        self.token = token


# compile
class BuildFailure(HarnessError):
    """A baseline build failed; exploration of the benchmark cannot proceed."""

    def __init__(self, stage: str, log: str = "", benchmark: str | None = None):
        where = f" for benchmark {benchmark}" if benchmark is not None else ""
        super().__init__(f"build failed at {stage} stage{where}")
        self.stage = stage
        self.log = log
        self.benchmark = benchmark


class StageError(HarnessError):
    """Raised by adapters when one toolchain stage fails."""

    def __init__(self, stage: str, log: str = ""):
        super().__init__(f"{stage} stage failed")
        self.stage = stage
        self.log = log


class UnknownPrefix(HarnessError):
    pass


class ToolchainError(HarnessError):
    """A required tool is missing or unusable."""


# measure
class CalibrationFailure(HarnessError):
    pass


class RunCrash(HarnessError):
    def __init__(self, message: str, session: int | None = None):
        super().__init__(message)
        self.session = session


class MalformedBinary(HarnessError):
    pass


class MissingTextSection(HarnessError):
    pass


class UnstableEnvironment(HarnessError):
    pass


# explore
class ZeroBaseline(HarnessError):
    pass


class BaselineFailure(HarnessError):
    pass


# report
class IncompatibleRuns(HarnessError):
    pass


# store
class StorageFull(HarnessError):
    pass


class DuplicateRunId(HarnessError):
    pass


class NotFound(HarnessError):
    pass


class CorruptRecord(HarnessError):
    pass


class SchemaMismatch(HarnessError):
    pass
