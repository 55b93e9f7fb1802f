"""Wire protocol between orchestrator and executor.

One message per line: a JSON object with top-level fields ``kind``,
``task_id``, ``invocation_id`` (only on invocation-scoped kinds) and
``body``. Control characters are escaped by the JSON encoder, so a frame
never spans lines. Also home of the tool-manifest format shown to the
model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

PROTOCOL_VERSION = 1

# Message kinds (closed set).
HELLO = "Hello"
BOOTSTRAP_REQUEST = "BootstrapRequest"
BOOTSTRAP_RESULT = "BootstrapResult"
TOOL_DISPATCH = "ToolDispatch"
TOOL_RESULT = "ToolResult"
APPROVAL_REQUEST = "ApprovalRequest"
APPROVAL_DECISION = "ApprovalDecision"
PLAN_PROPOSED = "PlanProposed"
PLAN_DECISION = "PlanDecision"
TASK_UPDATE = "TaskUpdate"
ERROR = "Error"
PING = "Ping"
PONG = "Pong"

KINDS = frozenset({
    HELLO, BOOTSTRAP_REQUEST, BOOTSTRAP_RESULT, TOOL_DISPATCH, TOOL_RESULT,
    APPROVAL_REQUEST, APPROVAL_DECISION, PLAN_PROPOSED, PLAN_DECISION,
    TASK_UPDATE, ERROR, PING, PONG,
})

# Kinds that identify one tool invocation; invocation_id is required on
# these and rejected everywhere else (the orchestrator mints the ids).
INVOCATION_KINDS = frozenset({
    TOOL_DISPATCH, TOOL_RESULT, APPROVAL_REQUEST, APPROVAL_DECISION,
})

PARAM_TYPES = ("string", "integer", "boolean")


class ProtocolError(Exception):
    """Base class for every decode/validation failure of this module."""


class MalformedFrame(ProtocolError):
    """The line is not a parseable JSON object."""


class UnknownKind(ProtocolError):
    def __init__(self, kind: str):
        super().__init__(f"unknown message kind: {kind!r}")
        self.kind = kind


class SchemaViolation(ProtocolError):
    def __init__(self, field_name: str, detail: str):
        super().__init__(f"{field_name}: {detail}")
        self.field = field_name


@dataclass(frozen=True)
class ToolParameter:
    name: str
    type: str  # one of PARAM_TYPES
    required: bool
    description: str


@dataclass(frozen=True)
class ToolManifestEntry:
    """Declarative tool spec sent to the model each turn."""

    name: str
    description: str
    parameters: tuple[ToolParameter, ...]
    destructive: bool


@dataclass(frozen=True)
class Message:
    kind: str
    task_id: str
    invocation_id: str | None = None
    body: dict = field(default_factory=dict)


class _Field:
    def __init__(self, ftype: str, required: bool = True, choices: tuple[str, ...] | None = None):
        self.ftype = ftype
        self.required = required
        self.choices = choices


# Per-kind body schemas. Field types: str, int, bool, list_str, dict.
_BODY_SCHEMAS: dict[str, dict[str, _Field]] = {
    HELLO: {"version": _Field("int")},
    BOOTSTRAP_REQUEST: {},
    BOOTSTRAP_RESULT: {
        "os_name": _Field("str"),
        "working_directory": _Field("str"),
        "recent_git_history": _Field("list_str"),
        "project_structure": _Field("list_str"),
    },
    TOOL_DISPATCH: {
        "tool": _Field("str"),
        "args": _Field("dict"),
        "redispatch": _Field("bool", required=False),
        "expected_hash": _Field("str", required=False),
        "enforce_fresh": _Field("bool", required=False),
    },
    TOOL_RESULT: {
        "tool": _Field("str"),
        "status": _Field("str", choices=("ok", "error")),
        "payload": _Field("dict", required=False),
        "error_kind": _Field("str", required=False),
        "message": _Field("str", required=False),
    },
    APPROVAL_REQUEST: {
        "tool": _Field("str"),
        "args": _Field("dict"),
        "matched_rules": _Field("list_str"),
    },
    APPROVAL_DECISION: {
        "decision": _Field("str", choices=("approve", "deny")),
        "reason": _Field("str", required=False),
    },
    PLAN_PROPOSED: {"steps": _Field("list_str")},
    PLAN_DECISION: {
        "decision": _Field("str", choices=("approved", "rejected", "modified")),
        "modified_steps": _Field("list_str", required=False),
    },
    TASK_UPDATE: {
        "status": _Field("str"),
        "detail": _Field("str", required=False),
    },
    ERROR: {"code": _Field("str"), "message": _Field("str")},
    PING: {},
    PONG: {},
}

_TOP_LEVEL_FIELDS = ("kind", "task_id", "invocation_id", "body")


def encode_json_line(obj: dict) -> str:
    """Canonical one-line encoding shared by messages and timeline events.

    ensure_ascii keeps the line free of raw unicode line separators, so
    newline framing is safe for any string content.
    """
    return json.dumps(obj, sort_keys=True, ensure_ascii=True, separators=(",", ":")) + "\n"


def decode_json_line(line: str | bytes) -> dict:
    if isinstance(line, bytes):
        try:
            line = line.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrame(f"not UTF-8: {exc}") from exc
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedFrame(f"not JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedFrame(f"expected a JSON object, got {type(obj).__name__}")
    return obj


def encode_message(msg: Message) -> str:
    """Encode a schema-valid message as one newline-terminated line."""
    obj: dict = {"kind": msg.kind, "task_id": msg.task_id, "body": msg.body}
    if msg.invocation_id is not None:
        obj["invocation_id"] = msg.invocation_id
    return encode_json_line(obj)


def decode_message(line: str | bytes) -> Message:
    """Parse and validate one wire line; raises a ProtocolError subclass."""
    obj = decode_json_line(line)

    for key in obj:
        if key not in _TOP_LEVEL_FIELDS:
            raise SchemaViolation(key, "unknown top-level field")

    kind = obj.get("kind")
    if kind is None:
        raise SchemaViolation("kind", "missing")
    if not isinstance(kind, str):
        raise SchemaViolation("kind", f"must be string, got {type(kind).__name__}")
    if kind not in KINDS:
        raise UnknownKind(kind)

    task_id = obj.get("task_id")
    if task_id is None:
        raise SchemaViolation("task_id", "missing")
    if not isinstance(task_id, str):
        raise SchemaViolation("task_id", f"must be string, got {type(task_id).__name__}")

    invocation_id = obj.get("invocation_id")
    if kind in INVOCATION_KINDS:
        if invocation_id is None:
            raise SchemaViolation("invocation_id", f"required for {kind}")
        if not isinstance(invocation_id, str):
            raise SchemaViolation("invocation_id", "must be string")
    elif invocation_id is not None:
        raise SchemaViolation("invocation_id", f"not allowed on {kind}")

    body = obj.get("body")
    if body is None:
        raise SchemaViolation("body", "missing")
    if not isinstance(body, dict):
        raise SchemaViolation("body", f"must be object, got {type(body).__name__}")
    _validate_body(kind, body)

    return Message(kind=kind, task_id=task_id, invocation_id=invocation_id, body=body)


def _validate_body(kind: str, body: dict) -> None:
    schema = _BODY_SCHEMAS[kind]
    for name in body:
        if name not in schema:
            raise SchemaViolation(f"body.{name}", f"unknown field for {kind}")
    for name, spec in schema.items():
        if name not in body:
            if spec.required:
                raise SchemaViolation(f"body.{name}", "missing")
            continue
        value = body[name]
        if not _type_ok(spec.ftype, value):
            raise SchemaViolation(f"body.{name}", f"must be {spec.ftype}")
        if spec.choices is not None and value not in spec.choices:
            raise SchemaViolation(f"body.{name}", f"must be one of {spec.choices}")


def _type_ok(ftype: str, value) -> bool:
    if ftype == "str":
        return isinstance(value, str)
    if ftype == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if ftype == "bool":
        return isinstance(value, bool)
    if ftype == "list_str":
        return isinstance(value, list) and all(isinstance(v, str) for v in value)
    if ftype == "dict":
        return isinstance(value, dict)
    raise ValueError(f"bad field type {ftype}")


def iter_decode(data: str | bytes):
    """Decode a concatenation of encoded frames, yielding messages in order."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    for line in data.split("\n"):
        if line:
            yield decode_message(line)


def validate_tool_args(entry: ToolManifestEntry, args: dict) -> list[str]:
    """Check args against a manifest entry; returns ALL violations, [] if ok.

    Total by design: a bad call comes back as a violation list the model
    can repair in one retry, never as an exception.
    """
    violations = []
    declared = {p.name: p for p in entry.parameters}
    for param in entry.parameters:
        if param.required and param.name not in args:
            violations.append(f"missing required parameter: {param.name}")
    for name, value in args.items():
        param = declared.get(name)
        if param is None:
            violations.append(f"undeclared parameter: {name}")
            continue
        if not _type_ok(_PARAM_FIELD_TYPES[param.type], value):
            violations.append(
                f"parameter {name} must be {param.type}, got {type(value).__name__}"
            )
    return violations


_PARAM_FIELD_TYPES = {"string": "str", "integer": "int", "boolean": "bool"}


def validate_manifest(entries: tuple[ToolManifestEntry, ...] | list[ToolManifestEntry]) -> list[str]:
    """Manifest sanity: unique names, described required params, and the
    approval asymmetry (read is the only non-destructive core tool)."""
    problems = []
    seen: set[str] = set()
    for entry in entries:
        if not entry.name:
            problems.append("entry with empty name")
            continue
        if entry.name in seen:
            problems.append(f"duplicate tool name: {entry.name}")
        seen.add(entry.name)
        for param in entry.parameters:
            if param.type not in PARAM_TYPES:
                problems.append(f"{entry.name}.{param.name}: bad type {param.type!r}")
            if param.required and not param.description:
                problems.append(f"{entry.name}.{param.name}: required parameter lacks a description")
        if entry.name == "read" and entry.destructive:
            problems.append("read must not be marked destructive")
        if entry.name in ("edit", "shell") and not entry.destructive:
            problems.append(f"{entry.name} must be marked destructive")
    return problems


# Canonical manifest for the three core tools. Names and parameter names
# are bit-exact across manifest, dispatch and executor implementation.
DEFAULT_MANIFEST: tuple[ToolManifestEntry, ...] = (
    ToolManifestEntry(
        name="read",
        description=(
            "Read a file and return its full contents plus a content hash. "
            "Contents beyond the size cap are truncated with an explicit marker. "
            "Always read a file before editing it."
        ),
        parameters=(
            ToolParameter("path", "string", True,
                          "Path of the file to read, relative to the working directory."),
        ),
        destructive=False,
    ),
    ToolManifestEntry(
        name="edit",
        description=(
            "Replace exactly one occurrence of old_string with new_string in a file. "
            "Fails if old_string is absent or matches more than once; in that case "
            "re-read the file and provide a longer, unique snippet."
        ),
        parameters=(
            ToolParameter("file_name", "string", True, "Path of the file to modify."),
            ToolParameter("old_string", "string", True,
                          "Exact text to find; must occur exactly once in the file."),
            ToolParameter("new_string", "string", True, "Replacement text."),
        ),
        destructive=True,
    ),
    ToolManifestEntry(
        name="shell",
        description=(
            "Run a terminal command in the working directory and return its exit "
            "code, stdout and stderr. A non-zero exit code is an ordinary result, "
            "not an error."
        ),
        parameters=(
            ToolParameter("command", "string", True, "Command line to execute."),
            ToolParameter("timeout_seconds", "integer", False,
                          "Kill the command after this many seconds (default 120)."),
        ),
        destructive=True,
    ),
)

MANIFEST_BY_NAME = {entry.name: entry for entry in DEFAULT_MANIFEST}
