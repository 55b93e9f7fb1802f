"""Model-driver interface, payload assembly, and the scripted driver.

The driver interface is what a remote LLM adapter would implement; only
the deterministic scripted driver is built here, which is what makes the
whole loop testable without a live model.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Protocol, Union

from .protocol import ToolManifestEntry

if TYPE_CHECKING:
    from .maestro import BootstrapMetadata, TaskRecord

EFFORT_LEVELS = ("low", "medium", "high")

SYSTEM_PROMPT = (resources.files(__package__) / "assets" / "system_prompt.txt").read_text("utf-8")
PLANNING_INSTRUCTIONS = (
    resources.files(__package__) / "assets" / "planning_instructions.txt"
).read_text("utf-8")

# Guard against prompt drift: this sentence must stay in the shipped prompt
# verbatim (there is a test for it).
READ_BEFORE_EDIT_RULE = "Always invoke the read tool on a file before calling edit on it"


class BootstrapMissing(Exception):
    """Payload assembly was attempted before the bootstrap phase finished."""


class DriverUnavailable(Exception):
    """The driver cannot produce a turn (transport failure, script exhausted)."""


class MalformedTurn(Exception):
    """The driver produced output that violates its contract."""


class ScriptParseError(Exception):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line


@dataclass(frozen=True)
class FinalText:
    text: str


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    args: dict
    rationale: str | None = None


@dataclass(frozen=True)
class PlanProposal:
    steps: tuple[str, ...]


ModelTurn = Union[FinalText, ToolCall, PlanProposal]


@dataclass(frozen=True)
class HistoryTurn:
    role: str  # user | model | tool
    content: str
    invocation_id: str | None = None


@dataclass(frozen=True)
class ModelPayload:
    system_prompt: str
    history: tuple[HistoryTurn, ...]
    bootstrap: "BootstrapMetadata"
    manifest: tuple[ToolManifestEntry, ...]
    effort: str
    planning_requested: bool


def assemble_payload(
    task: "TaskRecord",
    manifest: tuple[ToolManifestEntry, ...],
    effort: str,
    planning_requested: bool,
) -> ModelPayload:
    """Build the full per-turn payload: system prompt, history, bootstrap
    metadata and the complete tool manifest."""
    if task.bootstrap is None:
        raise BootstrapMissing(f"task {task.task_id} has not completed bootstrap")
    prompt = SYSTEM_PROMPT
    if planning_requested:
        prompt = prompt + "\n" + PLANNING_INSTRUCTIONS
    return ModelPayload(
        system_prompt=prompt,
        history=tuple(task.history),
        bootstrap=task.bootstrap,
        manifest=tuple(manifest),
        effort=effort,
        planning_requested=planning_requested,
    )


class ModelDriver(Protocol):
    async def next_turn(self, payload: ModelPayload) -> ModelTurn: ...


@dataclass(frozen=True)
class ScriptEntry:
    match: str | None
    respond: ModelTurn


@dataclass(frozen=True)
class Script:
    entries: tuple[ScriptEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)


_MATCH_PREFIX = re.compile(r"^match=(.*?)\s*;\s*(.*)$")


def parse_script(text: str) -> Script:
    """Parse the line-oriented script format.

    One entry per line: optional ``match=<pattern> ;`` prefix followed by
    ``final <text>`` | ``call <tool> <json-args>`` | ``plan <step>|<step>``.
    Blank lines and ``#`` comments are skipped.
    """
    entries = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        match = None
        m = _MATCH_PREFIX.match(line)
        if m:
            match, line = m.group(1), m.group(2)
        head, _, rest = line.partition(" ")
        if head == "final":
            respond: ModelTurn = FinalText(rest)
        elif head == "call":
            tool, _, args_text = rest.partition(" ")
            if not tool or not args_text.strip():
                raise ScriptParseError(lineno, "call needs a tool name and a JSON args object")
            try:
                args = json.loads(args_text)
            except json.JSONDecodeError as exc:
                raise ScriptParseError(lineno, f"bad args JSON: {exc}") from exc
            if not isinstance(args, dict):
                raise ScriptParseError(lineno, "args must be a JSON object")
            respond = ToolCall(tool, args)
        elif head == "plan":
            steps = tuple(s.strip() for s in rest.split("|"))
            if not rest.strip() or any(not s for s in steps):
                raise ScriptParseError(lineno, "plan needs non-empty steps separated by |")
            respond = PlanProposal(steps)
        else:
            raise ScriptParseError(lineno, f"unknown entry variant {head!r}")
        entries.append(ScriptEntry(match, respond))
    return Script(tuple(entries))


def load_script(path: str | Path) -> Script:
    return parse_script(Path(path).read_text("utf-8"))


class ScriptedDriver:
    """Plays one script back, strictly in order; drives exactly one task.

    Every payload it is called with is recorded, which lets tests assert
    passthrough properties (effort, history suffixes) after the fact.
    """

    def __init__(self, script: Script):
        self._entries = list(script.entries)
        self._pos = 0
        self.payloads: list[ModelPayload] = []

    async def next_turn(self, payload: ModelPayload) -> ModelTurn:
        self.payloads.append(payload)
        if self._pos >= len(self._entries):
            raise DriverUnavailable(f"script exhausted after {self._pos} entries")
        entry = self._entries[self._pos]
        self._pos += 1
        if entry.match is not None:
            last = payload.history[-1].content if payload.history else ""
            if entry.match not in last:
                raise MalformedTurn(
                    f"script entry {self._pos}: pattern {entry.match!r} not found in "
                    f"last history turn {last[:120]!r}"
                )
        # Contract: while a plan is requested and none is accepted, the
        # scripted driver refuses to emit a tool call (final text stays
        # legal — the model may always terminate).
        if payload.planning_requested and isinstance(entry.respond, ToolCall):
            raise MalformedTurn(
                f"script entry {self._pos}: tool call while a plan proposal is required"
            )
        return entry.respond
