"""Executor-side tools: read, edit, shell, and the bootstrap probe.

These run on the developer's machine, in the task working directory.
Guardrails are evaluated orchestrator-side before dispatch; the only
policy this module enforces locally is optional edit freshness (the
dispatch may carry the hash the file is expected to have).
"""

from __future__ import annotations

import hashlib
import os
import platform
import signal
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .maestro import BootstrapLimits, BootstrapMetadata

DEFAULT_READ_CAP = 1_000_000  # characters of content per read
DEFAULT_STREAM_CAP = 200_000  # characters of stdout/stderr each
DEFAULT_SHELL_TIMEOUT = 120
TRUNCATION_MARKER = "\n...[truncated]"

_EXCLUDED_DIRS = frozenset({
    ".git", "node_modules", "__pycache__", ".venv", "venv", ".tox",
    ".mypy_cache", ".pytest_cache", "dist", "build", "target", ".idea",
})


@dataclass(frozen=True)
class EditSpec:
    file_name: str
    old_string: str
    new_string: str


@dataclass(frozen=True)
class ShellSpec:
    command: str
    timeout_seconds: int = DEFAULT_SHELL_TIMEOUT


@dataclass(frozen=True)
class ToolOutcome:
    status: str  # ok | error
    payload: dict
    error_kind: str | None = None
    message: str | None = None

    @classmethod
    def ok(cls, **payload) -> "ToolOutcome":
        return cls(status="ok", payload=payload)

    @classmethod
    def error(cls, kind: str, message: str, **payload) -> "ToolOutcome":
        return cls(status="error", payload=payload, error_kind=kind, message=message)

    def to_body(self, tool: str) -> dict:
        body: dict = {"tool": tool, "status": self.status, "payload": self.payload}
        if self.error_kind is not None:
            body["error_kind"] = self.error_kind
        if self.message is not None:
            body["message"] = self.message
        return body


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _cap_text(text: str, cap: int) -> tuple[str, bool]:
    if len(text) > cap:
        return text[:cap] + TRUNCATION_MARKER, True
    return text, False


def tool_read(path: str | Path, cap: int = DEFAULT_READ_CAP) -> ToolOutcome:
    """Full file content plus the hash of its raw bytes.

    The hash always covers the whole file even when the returned content
    is truncated — it records what is on disk, not what the model saw.
    """
    p = Path(path)
    if not p.exists():
        return ToolOutcome.error("NotFound", f"no such file: {path}", path=str(path))
    if p.is_dir():
        return ToolOutcome.error("NotAFile", f"{path} is a directory, not a file",
                                 path=str(path))
    try:
        data = p.read_bytes()
    except PermissionError:
        return ToolOutcome.error("PermissionDenied", f"cannot read {path}", path=str(path))
    except OSError as exc:
        return ToolOutcome.error("NotFound", f"cannot read {path}: {exc}", path=str(path))
    content, truncated = _cap_text(data.decode("utf-8", errors="replace"), cap)
    return ToolOutcome.ok(path=str(path), content=content,
                          hash=content_hash(data), truncated=truncated)


def tool_edit(spec: EditSpec, expected_hash: str | None = None,
              enforce_fresh: bool = False) -> ToolOutcome:
    """Replace exactly one occurrence of old_string, atomically.

    Any error leaves the file byte-identical: the new content is written
    to a temporary file in the same directory and renamed over the
    original only on success. Edit never creates a file.
    """
    if not spec.file_name:
        return ToolOutcome.error("InvalidArguments", "file_name must be non-empty")
    if not spec.old_string:
        return ToolOutcome.error(
            "InvalidArguments",
            "old_string must be non-empty; pass the exact text to replace")
    path = Path(spec.file_name)
    if not path.exists() or not path.is_file():
        return ToolOutcome.error(
            "FileNotFound",
            f"no such file: {spec.file_name} (edit never creates files)",
            file_name=spec.file_name)
    try:
        data = path.read_bytes()
    except OSError as exc:
        return ToolOutcome.error("WriteFailed", f"cannot read {spec.file_name}: {exc}",
                                 file_name=spec.file_name)
    pre_hash = content_hash(data)
    if enforce_fresh and expected_hash is not None and pre_hash != expected_hash:
        return ToolOutcome.error(
            "StaleContent",
            f"{spec.file_name} changed since it was last read; read it again "
            f"before editing", file_name=spec.file_name, pre_hash=pre_hash)
    old = spec.old_string.encode("utf-8")
    new = spec.new_string.encode("utf-8")
    count = data.count(old)
    if count == 0:
        return ToolOutcome.error(
            "OldStringNotFound",
            f"old_string not found in {spec.file_name}; read the file again to "
            f"get its current content", file_name=spec.file_name, pre_hash=pre_hash)
    if count > 1:
        return ToolOutcome.error(
            "AmbiguousMatch",
            f"old_string occurs {count} times in {spec.file_name}; provide a "
            f"longer old_string that matches exactly once",
            file_name=spec.file_name, occurrences=count, pre_hash=pre_hash)
    offset = data.find(old)
    updated = data[:offset] + new + data[offset + len(old):]
    try:
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
        try:
            os.write(fd, updated)
        finally:
            os.close(fd)
        os.chmod(tmp_name, path.stat().st_mode & 0o7777)
        os.replace(tmp_name, path)
    except OSError as exc:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        return ToolOutcome.error("WriteFailed", f"cannot write {spec.file_name}: {exc}",
                                 file_name=spec.file_name, pre_hash=pre_hash)
    summary = (f"replaced {len(old)} bytes with {len(new)} bytes at offset {offset}")
    return ToolOutcome.ok(file_name=spec.file_name, summary=summary,
                          bytes_replaced=len(old), pre_hash=pre_hash,
                          post_hash=content_hash(updated))


def tool_shell(spec: ShellSpec, cwd: str | Path | None = None,
               stream_cap: int = DEFAULT_STREAM_CAP) -> ToolOutcome:
    """Run a command in its own process group; capture exit code and output.

    Non-zero exit codes are ordinary results. Only spawn failure and
    timeout are errors; on timeout the whole process group is killed and
    partial output is returned.
    """
    if not spec.command.strip():
        return ToolOutcome.error("InvalidArguments", "command must be non-empty")
    timeout = spec.timeout_seconds if spec.timeout_seconds > 0 else DEFAULT_SHELL_TIMEOUT
    try:
        proc = subprocess.Popen(
            spec.command, shell=True, cwd=str(cwd) if cwd else None,
            stdout=subprocess.PIPE, stderr=subprocess.PIPE,
            start_new_session=True,
        )
    except OSError as exc:
        return ToolOutcome.error("SpawnFailed", f"cannot spawn shell: {exc}")
    timed_out = False
    try:
        out, err = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
        out, err = proc.communicate()
    stdout, stdout_truncated = _cap_text((out or b"").decode("utf-8", errors="replace"),
                                         stream_cap)
    stderr, stderr_truncated = _cap_text((err or b"").decode("utf-8", errors="replace"),
                                         stream_cap)
    if timed_out:
        return ToolOutcome.error(
            "TimedOut", f"command exceeded {timeout}s and was killed",
            stdout=stdout, stderr=stderr, stdout_truncated=stdout_truncated,
            stderr_truncated=stderr_truncated)
    return ToolOutcome.ok(exit_code=proc.returncode, stdout=stdout, stderr=stderr,
                          stdout_truncated=stdout_truncated,
                          stderr_truncated=stderr_truncated)


def bootstrap_probe(cwd: str | Path | None = None,
                    limits: BootstrapLimits | None = None) -> BootstrapMetadata:
    """Environment metadata for payload assembly.

    Each probe component degrades to empty on its own (no git repository,
    unreadable directories) — the probe itself never fails.
    """
    limits = limits or BootstrapLimits()
    root = Path(cwd) if cwd else Path.cwd()
    return BootstrapMetadata(
        os_name=platform.system(),
        working_directory=str(root.resolve()),
        recent_git_history=tuple(_git_history(root, limits)),
        project_structure=tuple(_project_tree(root, limits)),
    )


def _git_history(root: Path, limits: BootstrapLimits) -> list[str]:
    try:
        proc = subprocess.run(
            ["git", "log", "--oneline", "-n", str(limits.max_commits)],
            cwd=str(root), capture_output=True, text=True,
            timeout=limits.probe_timeout,
        )
    except (OSError, subprocess.SubprocessError):
        return []
    if proc.returncode != 0:
        return []
    return [line for line in proc.stdout.splitlines() if line.strip()]


def _project_tree(root: Path, limits: BootstrapLimits) -> list[str]:
    entries: list[str] = []

    def walk(directory: Path, prefix: str, depth: int) -> None:
        if depth > limits.tree_depth or len(entries) >= limits.tree_max_entries:
            return
        try:
            children = sorted(directory.iterdir(), key=lambda p: (p.is_dir(), p.name))
        except OSError:
            return
        for child in children:
            if len(entries) >= limits.tree_max_entries:
                return
            if child.is_dir():
                if child.name in _EXCLUDED_DIRS:
                    continue
                entries.append(prefix + child.name + "/")
                walk(child, prefix + child.name + "/", depth + 1)
            else:
                entries.append(prefix + child.name)

    walk(root, "", 1)
    return entries
