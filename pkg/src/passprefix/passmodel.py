"""Optimization-level pass pipelines and their order-preserving prefix configurations.

A pipeline is the ordered list of pass invocations making up a standard
optimization level.  Every documented transformation pass in it is a
truncation point: the configuration ending there keeps all earlier
invocations (analyses included) in their original order.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import Collection, Iterable

from .errors import EmptyInput, MalformedLine

log = logging.getLogger(__name__)

O0_CUSTOM = "-O0-custom"

_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")
_SPLIT = re.compile(r"[\s,]+")
_PASS_ARGS_PREFIX = re.compile(r"^\s*Pass Arguments:\s*")


class PassKind(str, enum.Enum):
    TRANSFORMATION = "Transformation"
    ANALYSIS = "Analysis"


class PipelineSource(str, enum.Enum):
    INTROSPECTED = "Introspected"
    FIXTURE = "Fixture"


@dataclass(frozen=True)
class PassInvocation:
    name: str
    kind: PassKind
    occurrence: int
    position: int

    @property
    def is_transformation(self) -> bool:
        return self.kind is PassKind.TRANSFORMATION


@dataclass(frozen=True)
class PassPipeline:
    level_label: str
    invocations: tuple[PassInvocation, ...]
    source: PipelineSource = PipelineSource.FIXTURE

    def __len__(self) -> int:
        return len(self.invocations)

    @property
    def names(self) -> list[str]:
        return [inv.name for inv in self.invocations]

    @property
    def transformation_count(self) -> int:
        return sum(inv.is_transformation for inv in self.invocations)


@dataclass(frozen=True)
class OptConfig:
    id: str
    prefix_len: int
    last_transform: tuple[str, int] | None
    flags: tuple[str, ...]

    @property
    def label(self) -> str:
        return self.id


def _tokens(raw_text: str) -> Iterable[tuple[int, str]]:
    for lineno, line in enumerate(raw_text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        # -debug-pass=Arguments output: "Pass Arguments:  -tti -tbaa ..."
        stripped = _PASS_ARGS_PREFIX.sub("", stripped)
        for tok in _SPLIT.split(stripped):
            if tok:
                yield lineno, tok


def parse_pipeline(
    raw_text: str,
    whitelist: Collection[str],
    level_label: str = "-O3",
    *,
    source: PipelineSource = PipelineSource.FIXTURE,
    undocumented: Collection[str] = (),
) -> PassPipeline:
    """Parse an introspection dump or fixture into a :class:`PassPipeline`.

    Tokens may be separated by newlines, whitespace or commas; a leading
    ``-`` on a token (as printed by ``-debug-pass=Arguments``) is dropped.
    Names in ``undocumented`` are transformations missing from the whitelist:
    they stay in the pipeline as non-terminal passes and a warning is logged.
    """
    whitelist = frozenset(whitelist)
    invocations: list[PassInvocation] = []
    seen: dict[str, int] = {}
    flagged: set[str] = set()
    for lineno, tok in _tokens(raw_text):
        name = tok.lstrip("-")
        if not _IDENT.match(name):
            raise MalformedLine(lineno, tok)
        seen[name] = seen.get(name, 0) + 1
        if name in whitelist:
            kind = PassKind.TRANSFORMATION
        else:
            kind = PassKind.ANALYSIS
            if name in undocumented:
                flagged.add(name)
        invocations.append(PassInvocation(name, kind, seen[name], len(invocations) + 1))
    if not invocations:
        raise EmptyInput("no pass identifiers found")
    if flagged:
        log.warning(
            "%d undocumented transformation passes kept as non-terminal: %s",
            len(flagged), ", ".join(sorted(flagged)),
        )
    return PassPipeline(level_label, tuple(invocations), source)


def config_label(config: OptConfig) -> str:
    if config.prefix_len == 0 or config.last_transform is None:
        return O0_CUSTOM
    name, count = config.last_transform
    return f"{name} - {count}"


def generate_configs(pipeline: PassPipeline) -> list[OptConfig]:
    """Return the empty configuration followed by one config per transformation.

    Each non-empty config is truncated immediately after its transformation
    invocation, so analysis passes trailing the last transformation are never
    part of any config.
    """
    names = tuple(pipeline.names)
    empty = OptConfig(O0_CUSTOM, 0, None, ())
    configs = [empty]
    for inv in pipeline.invocations:
        if not inv.is_transformation:
            continue
        cfg = OptConfig("", inv.position, (inv.name, inv.position), names[: inv.position])
        configs.append(OptConfig(config_label(cfg), cfg.prefix_len, cfg.last_transform, cfg.flags))
    return configs


def parse_label_position(label: str) -> int | None:
    """Recover the prefix length from a label such as ``"sroa - 9"``.

    ``-O0-custom`` maps to 0; labels without a trailing count give None.
    """
    if label == O0_CUSTOM:
        return 0
    m = re.search(r"\s-\s*(\d+)\s*$", label)
    return int(m.group(1)) if m else None


def sanitize_label(label: str) -> str:
    """Shell-safe directory name for a config label (``"sroa - 9"`` -> ``"sroa-9"``)."""
    out = re.sub(r"\s*-\s*(?=\d+$)", "-", label.strip())
    out = re.sub(r"\s+", "-", out)
    out = re.sub(r"[^A-Za-z0-9_.\-]", "_", out)
    return out.lstrip("-") or "_"


# -- shipped data -----------------------------------------------------------

def _data_file(*parts: str):
    return resources.files("passprefix").joinpath("/".join(("data",) + parts))


def read_name_list(text: str) -> list[str]:
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def load_whitelist(version: str = "llvm-6.0") -> frozenset[str]:
    return frozenset(read_name_list(_data_file("whitelists", f"{version}.txt").read_text("utf-8")))


def load_undocumented(version: str = "llvm-6.0") -> frozenset[str]:
    f = _data_file("whitelists", f"{version}.undocumented.txt")
    return frozenset(read_name_list(f.read_text("utf-8"))) if f.is_file() else frozenset()


def fixture_pipeline_text(name: str) -> str:
    """Raw text of a shipped pipeline fixture, e.g. ``"llvm-6.0-O3-x86_64"``."""
    return _data_file("pipelines", f"{name}.txt").read_text("utf-8")


def load_fixture_pipeline(name: str, version: str = "llvm-6.0") -> PassPipeline:
    level = "-" + name.split("-")[2] if name.count("-") >= 2 else "-O3"
    return parse_pipeline(
        fixture_pipeline_text(name),
        load_whitelist(version),
        level,
        undocumented=load_undocumented(version),
    )
