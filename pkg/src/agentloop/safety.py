"""Layered guardrail engine.

Every tool call is normalized into a set of capabilities and one policy is
evaluated across all tools, so that blocking file deletion blocks it
whether it arrives as a dedicated tool or inside a shell command. Shell
commands are split on chain operators and each segment is classified by a
conservative static table — no shell semantics are emulated, and anything
unclassifiable is treated as unknown rather than silently allowed.
"""

from __future__ import annotations

import fnmatch
import shlex
from dataclasses import dataclass, field

from .model import ToolCall

# Capability classes.
FS_READ = "FsRead"
FS_WRITE = "FsWrite"
FS_DELETE = "FsDelete"
GIT_PUSH_FORCE = "GitPushForce"
NETWORK_WRITE = "NetworkWrite"
EXEC = "Exec"
UNKNOWN = "Unknown"

CAPABILITIES = frozenset({
    FS_READ, FS_WRITE, FS_DELETE, GIT_PUSH_FORCE, NETWORK_WRITE, EXEC, UNKNOWN,
})

# Rules, by increasing severity; evaluation is deny-dominant.
ALLOW = "allow"
REQUIRE_APPROVAL = "require_approval"
DENY = "deny"
RULES = (ALLOW, REQUIRE_APPROVAL, DENY)
_SEVERITY = {ALLOW: 0, REQUIRE_APPROVAL: 1, DENY: 2}

MODES = ("approval", "autonomous")

# Programs with no write effect on the environment. cat/ls/grep/find are
# the classification-table core; the rest keep everyday no-op commands out
# of the Unknown bucket (Unknown is approval-gated by default).
_READ_ONLY_PROGRAMS = frozenset({
    "cat", "ls", "grep", "find", "echo", "pwd", "head", "tail", "wc",
    "sort", "uniq", "stat", "which", "date", "whoami", "true", "false",
    "sleep", "diff", "file", "basename", "dirname",
})

_FS_WRITE_PROGRAMS = frozenset({"mv", "cp", "touch", "mkdir"})

# Interpreter escapes run arbitrary code; honestly unclassifiable.
_INTERPRETERS = frozenset({
    "bash", "sh", "zsh", "dash", "ksh", "python", "python3", "perl",
    "ruby", "node", "eval", "exec", "source", "xargs", "env", "sudo",
})

_UPLOAD_FLAGS = frozenset({
    "-d", "--data", "--data-raw", "--data-binary", "--data-urlencode",
    "-F", "--form", "-T", "--upload-file", "--post-data", "--post-file",
})
_DOWNLOAD_FLAGS = frozenset({"-o", "-O", "--output", "--output-document"})


class UnknownTool(Exception):
    def __init__(self, name: str):
        super().__init__(f"no capability mapping for tool {name!r}")
        self.tool = name


class PolicyParseError(Exception):
    def __init__(self, line: int, detail: str):
        super().__init__(f"line {line}: {detail}")
        self.line = line


class UnknownRuleValue(PolicyParseError):
    pass


@dataclass
class PolicyConfig:
    tool_rules: dict[str, str] = field(default_factory=dict)
    capability_rules: dict[str, str] = field(default_factory=dict)
    command_blocklist: list[str] = field(default_factory=list)
    unknown_command_rule: str = REQUIRE_APPROVAL


@dataclass(frozen=True)
class PolicyDecision:
    verdict: str  # Allow | RequireApproval | Deny
    matched_rules: tuple[str, ...]


VERDICT_ALLOW = "Allow"
VERDICT_REQUIRE_APPROVAL = "RequireApproval"
VERDICT_DENY = "Deny"

_RULE_TO_VERDICT = {
    ALLOW: VERDICT_ALLOW,
    REQUIRE_APPROVAL: VERDICT_REQUIRE_APPROVAL,
    DENY: VERDICT_DENY,
}


def _split_segments(command: str) -> tuple[list[list[str]], list[str]]:
    """Tokenize and split on ; && || | & — returns (segments, notes).

    Unbalanced quoting never raises; it comes back as a note and the
    caller classifies the command as unknown.
    """
    lex = shlex.shlex(command, posix=True, punctuation_chars=";|&><")
    lex.whitespace_split = True
    try:
        tokens = list(lex)
    except ValueError as exc:
        return [], [f"unparseable command ({exc}): {command!r}"]
    segments: list[list[str]] = []
    current: list[str] = []
    for tok in tokens:
        if tok and all(c in ";|&" for c in tok):
            if current:
                segments.append(current)
                current = []
            continue
        current.append(tok)
    if current:
        segments.append(current)
    return segments, []


def _classify_segment(tokens: list[str]) -> set[str]:
    caps: set[str] = set()
    words = [t for t in tokens if not t.startswith((">", "<"))]
    has_redirect = any(t.startswith(">") for t in tokens)
    if not words:
        return {FS_WRITE} if has_redirect else set()
    head = words[0]
    if head == "rm":
        caps.add(FS_DELETE)
    elif head == "git" and len(words) > 1 and words[1] == "push":
        if any(w in ("--force", "-f", "--force-with-lease") for w in words[2:]):
            caps.add(GIT_PUSH_FORCE)
        else:
            caps.add(NETWORK_WRITE)
    elif head in ("curl", "wget"):
        caps.add(NETWORK_WRITE)
        if any(w in _DOWNLOAD_FLAGS for w in words[1:]):
            caps.add(FS_WRITE)
    elif head in _FS_WRITE_PROGRAMS:
        caps.add(FS_WRITE)
    elif head in _READ_ONLY_PROGRAMS:
        caps.add(FS_READ)
    elif head in _INTERPRETERS:
        caps.update({EXEC, UNKNOWN})
    else:
        caps.update({EXEC, UNKNOWN})
    if has_redirect:
        caps.add(FS_WRITE)
    return caps


def classify_shell(command: str) -> set[str]:
    """Union of per-segment capabilities over the whole command line."""
    if not command.strip():
        return {EXEC, UNKNOWN}
    # Command substitution can run anything, wherever it appears.
    subst = "$(" in command or "`" in command
    segments, notes = _split_segments(command)
    if notes:
        return {EXEC, UNKNOWN}
    caps: set[str] = set()
    for seg in segments:
        caps |= _classify_segment(seg)
    if subst:
        caps.update({EXEC, UNKNOWN})
    return caps


def classify_tool_call(call: ToolCall) -> set[str]:
    if call.tool_name == "read":
        return {FS_READ}
    if call.tool_name == "edit":
        return {FS_WRITE}
    if call.tool_name == "shell":
        return classify_shell(str(call.args.get("command", "")))
    raise UnknownTool(call.tool_name)


def shell_segments(command: str) -> list[str]:
    """Normalized segment texts (tokens re-joined) for blocklist matching."""
    segments, _ = _split_segments(command)
    return [" ".join(seg) for seg in segments]


def evaluate(policy: PolicyConfig, call: ToolCall, mode: str) -> PolicyDecision:
    """Deny-dominant evaluation of every matching rule, then the mode floor.

    Total: never raises, including on unparseable commands and unknown
    tools (both inherit the unknown-command rule).
    """
    matches: list[tuple[str, str]] = []  # (label, rule)

    tool = call.tool_name
    rule = policy.tool_rules.get(tool)
    if rule is not None:
        matches.append((f"tool.{tool} = {rule}", rule))

    try:
        caps = classify_tool_call(call)
    except UnknownTool:
        caps = {EXEC, UNKNOWN}
    for cap in sorted(caps):
        rule = policy.capability_rules.get(cap)
        if rule is not None:
            matches.append((f"capability.{cap} = {rule}", rule))

    if tool == "shell":
        for index, segment in enumerate(shell_segments(str(call.args.get("command", ""))), 1):
            for pattern in policy.command_blocklist:
                if fnmatch.fnmatchcase(segment, pattern):
                    matches.append(
                        (f"block {pattern!r} matched segment {index} {segment!r}", DENY)
                    )

    if UNKNOWN in caps:
        matches.append((f"unknown_command = {policy.unknown_command_rule}",
                        policy.unknown_command_rule))

    verdict_rule = ALLOW
    for _, rule in matches:
        if _SEVERITY[rule] > _SEVERITY[verdict_rule]:
            verdict_rule = rule
    verdict = _RULE_TO_VERDICT[verdict_rule]

    # Approval mode floors destructive tools at RequireApproval and never
    # escalates read-only calls.
    if mode == "approval" and tool != "read" and verdict == VERDICT_ALLOW:
        matches.append(("mode: approval", REQUIRE_APPROVAL))
        verdict = VERDICT_REQUIRE_APPROVAL

    labels = tuple(label for label, _ in matches)
    if verdict != VERDICT_ALLOW and not labels:
        raise AssertionError("non-allow verdict must carry matched rules")
    return PolicyDecision(verdict=verdict, matched_rules=labels)


def load_policy(path) -> PolicyConfig:
    return parse_policy(open(path, encoding="utf-8").read())


def parse_policy(text: str) -> PolicyConfig:
    """Parse the line-oriented policy format.

    ``tool.<name> = <rule>``, ``capability.<Class> = <rule>``,
    ``unknown_command = <rule>``, ``block = <glob-pattern>``. Unknown keys
    are rejected so a typo cannot silently weaken a policy.
    """
    policy = PolicyConfig()
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise PolicyParseError(lineno, "expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "block":
            if not value:
                raise PolicyParseError(lineno, "block needs a glob pattern")
            policy.command_blocklist.append(value)
            continue
        if not value:
            raise PolicyParseError(lineno, "missing value")
        if key == "unknown_command":
            policy.unknown_command_rule = _parse_rule(lineno, value)
        elif key.startswith("tool."):
            name = key[len("tool."):]
            if not name:
                raise PolicyParseError(lineno, "tool rule needs a tool name")
            policy.tool_rules[name] = _parse_rule(lineno, value)
        elif key.startswith("capability."):
            cls = key[len("capability."):]
            if cls not in CAPABILITIES:
                raise PolicyParseError(
                    lineno, f"unknown capability {cls!r}; known: {sorted(CAPABILITIES)}"
                )
            policy.capability_rules[cls] = _parse_rule(lineno, value)
        else:
            raise PolicyParseError(lineno, f"unknown key {key!r}")
    return policy


def _parse_rule(lineno: int, value: str) -> str:
    if value not in RULES:
        raise UnknownRuleValue(lineno, f"unknown rule value {value!r}; legal: {RULES}")
    return value


# What each non-shell tool can do, and what a shell command can be made to
# do, per the classification table above.
TOOL_CAPABILITIES = {"read": {FS_READ}, "edit": {FS_WRITE}}
SHELL_REACHABLE = frozenset({
    FS_READ, FS_WRITE, FS_DELETE, GIT_PUSH_FORCE, NETWORK_WRITE, EXEC, UNKNOWN,
})


def lint_policy(policy: PolicyConfig) -> list[str]:
    """Warn when a tool-level deny is bypassable through the shell.

    Capability-level denies bind every channel by construction, so they
    never produce a warning.
    """
    warnings = []
    shell_denied = policy.tool_rules.get("shell") == DENY
    for tool, rule in sorted(policy.tool_rules.items()):
        if rule != DENY or tool == "shell":
            continue
        for cap in sorted(TOOL_CAPABILITIES.get(tool, set())):
            if policy.capability_rules.get(cap) == DENY:
                continue
            if not shell_denied and cap in SHELL_REACHABLE:
                warnings.append(
                    f"tool.{tool} = deny is bypassable: {cap} remains reachable via shell"
                )
    return warnings
