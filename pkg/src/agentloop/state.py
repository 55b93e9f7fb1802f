"""Event-sourced persistence.

A task's timeline is its source of truth: an append-only, gapless event
sequence that can be replayed into the task record. Session snapshots sit
in a two-tier store (TTL cache over a durable tier) so a task survives
both cache expiry and process restarts. Both tiers have in-memory and
file-backed implementations behind the same interface; external cache or
database adapters would slot in the same way.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

from .protocol import MalformedFrame, decode_json_line, encode_json_line

# Timeline event kinds (closed set).
TASK_CREATED = "TaskCreated"
BOOTSTRAP_COMPLETED = "BootstrapCompleted"
MODEL_RESPONSE = "ModelResponse"
PLAN_PROPOSED = "PlanProposed"
PLAN_APPROVED = "PlanApproved"
PLAN_MODIFIED = "PlanModified"
PLAN_REJECTED = "PlanRejected"
APPROVAL_REQUESTED = "ApprovalRequested"
APPROVAL_GRANTED = "ApprovalGranted"
APPROVAL_DENIED = "ApprovalDenied"
POLICY_DENIED = "PolicyDenied"
TOOL_DISPATCHED = "ToolDispatched"
TOOL_RESULT = "ToolResult"
READ_BEFORE_EDIT_WARNING = "ReadBeforeEditWarning"
DUPLICATE_RESULT_IGNORED = "DuplicateResultIgnored"
CLIENT_DISCONNECTED = "ClientDisconnected"
CLIENT_RECONNECTED = "ClientReconnected"
TASK_COMPLETED = "TaskCompleted"
TASK_FAILED = "TaskFailed"
TASK_CANCELLED = "TaskCancelled"

EVENT_KINDS = frozenset({
    TASK_CREATED, BOOTSTRAP_COMPLETED, MODEL_RESPONSE, PLAN_PROPOSED,
    PLAN_APPROVED, PLAN_MODIFIED, PLAN_REJECTED, APPROVAL_REQUESTED,
    APPROVAL_GRANTED, APPROVAL_DENIED, POLICY_DENIED, TOOL_DISPATCHED,
    TOOL_RESULT, READ_BEFORE_EDIT_WARNING, DUPLICATE_RESULT_IGNORED,
    CLIENT_DISCONNECTED, CLIENT_RECONNECTED, TASK_COMPLETED, TASK_FAILED,
    TASK_CANCELLED,
})

TERMINAL_EVENT_KINDS = frozenset({TASK_COMPLETED, TASK_FAILED, TASK_CANCELLED})


class TaskTerminated(Exception):
    """Append attempted after the task's terminal event."""


class StorageUnavailable(Exception):
    pass


class CorruptTimeline(Exception):
    pass


@dataclass(frozen=True)
class TimelineEvent:
    task_id: str
    seq: int
    timestamp: float
    kind: str
    payload: dict

    def to_line(self) -> str:
        return encode_json_line({
            "task_id": self.task_id, "seq": self.seq,
            "timestamp": self.timestamp, "kind": self.kind,
            "payload": self.payload,
        })

    @classmethod
    def from_line(cls, line: str) -> "TimelineEvent":
        obj = decode_json_line(line)
        try:
            return cls(
                task_id=obj["task_id"], seq=obj["seq"],
                timestamp=obj["timestamp"], kind=obj["kind"],
                payload=obj["payload"],
            )
        except KeyError as exc:
            raise CorruptTimeline(f"event line missing field {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id, "seq": self.seq,
            "timestamp": self.timestamp, "kind": self.kind,
            "payload": self.payload,
        }


class InMemoryTimelineStore:
    def __init__(self, clock=time.time):
        self._clock = clock
        self._events: dict[str, list[TimelineEvent]] = {}

    def append_event(self, task_id: str, kind: str, payload: dict) -> TimelineEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        events = self._events.setdefault(task_id, [])
        if events and events[-1].kind in TERMINAL_EVENT_KINDS:
            raise TaskTerminated(f"task {task_id} already has a terminal event")
        event = TimelineEvent(task_id, len(events) + 1, self._clock(), kind, payload)
        events.append(event)
        return event

    def read_timeline(self, task_id: str, from_seq: int = 1) -> list[TimelineEvent]:
        events = self._events.get(task_id, [])
        return [e for e in events if e.seq >= from_seq]


class FileTimelineStore:
    """One append-only file of encoded event lines per task.

    Existing files are loaded on first touch, so timelines survive a
    process restart; corruption shows up as a seq-gap at load time.
    """

    def __init__(self, directory: str | Path, clock=time.time):
        self._dir = Path(directory)
        self._clock = clock
        self._cache: dict[str, list[TimelineEvent]] = {}
        try:
            self._dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc

    def _path(self, task_id: str) -> Path:
        return self._dir / f"{task_id}.events"

    def _load(self, task_id: str) -> list[TimelineEvent]:
        if task_id in self._cache:
            return self._cache[task_id]
        events: list[TimelineEvent] = []
        path = self._path(task_id)
        if path.exists():
            try:
                text = path.read_text("utf-8")
            except OSError as exc:
                raise StorageUnavailable(str(exc)) from exc
            for line in text.split("\n"):
                if not line:
                    continue
                try:
                    events.append(TimelineEvent.from_line(line))
                except MalformedFrame as exc:
                    raise CorruptTimeline(f"{path}: {exc}") from exc
            for i, event in enumerate(events, 1):
                if event.seq != i:
                    raise CorruptTimeline(f"{path}: expected seq {i}, found {event.seq}")
        self._cache[task_id] = events
        return events

    def append_event(self, task_id: str, kind: str, payload: dict) -> TimelineEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        events = self._load(task_id)
        if events and events[-1].kind in TERMINAL_EVENT_KINDS:
            raise TaskTerminated(f"task {task_id} already has a terminal event")
        event = TimelineEvent(task_id, len(events) + 1, self._clock(), kind, payload)
        try:
            with open(self._path(task_id), "a", encoding="utf-8") as fh:
                fh.write(event.to_line())
                fh.flush()
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc
        events.append(event)
        return event

    def read_timeline(self, task_id: str, from_seq: int = 1) -> list[TimelineEvent]:
        return [e for e in self._load(task_id) if e.seq >= from_seq]


# --- session snapshots -----------------------------------------------------


@dataclass(frozen=True)
class SessionSnapshot:
    """Serialized task state sufficient to resume the loop."""

    task_id: str
    data: dict

    @classmethod
    def from_record(cls, record) -> "SessionSnapshot":
        return cls(task_id=record.task_id, data=record.to_snapshot_data())

    def restore(self):
        from .maestro import TaskRecord  # record type lives with the loop

        return TaskRecord.from_snapshot_data(self.data)

    def to_bytes(self) -> bytes:
        return encode_json_line({"task_id": self.task_id, "data": self.data}).encode("utf-8")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "SessionSnapshot":
        obj = decode_json_line(raw.decode("utf-8"))
        return cls(task_id=obj["task_id"], data=obj["data"])


class TTLCache:
    """Expiring key→bytes map; the clock is injectable so tests can shrink
    the paper-scale TTL to seconds."""

    def __init__(self, ttl_seconds: float, clock=time.time):
        self.ttl_seconds = ttl_seconds
        self._clock = clock
        self._entries: dict[str, tuple[float, bytes]] = {}

    def put(self, key: str, value: bytes) -> None:
        self._entries[key] = (self._clock() + self.ttl_seconds, value)

    def get(self, key: str) -> bytes | None:
        entry = self._entries.get(key)
        if entry is None:
            return None
        expires, value = entry
        if self._clock() > expires:
            del self._entries[key]
            return None
        return value

    def force_expire(self, key: str) -> None:
        self._entries.pop(key, None)

    def __contains__(self, key: str) -> bool:
        return self.get(key) is not None


class InMemoryDurable:
    def __init__(self):
        self._data: dict[str, bytes] = {}

    def put(self, key: str, value: bytes) -> None:
        self._data[key] = value

    def get(self, key: str) -> bytes | None:
        return self._data.get(key)

    def delete(self, key: str) -> None:
        self._data.pop(key, None)


class FileDurable:
    """One file per key; writes are atomic (tmp + rename)."""

    def __init__(self, directory: str | Path):
        self._dir = Path(directory)
        try:
            self._dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc

    def _path(self, key: str) -> Path:
        return self._dir / f"{key}.snapshot"

    def put(self, key: str, value: bytes) -> None:
        tmp = self._dir / f"{key}.snapshot.tmp"
        try:
            tmp.write_bytes(value)
            os.replace(tmp, self._path(key))
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc

    def get(self, key: str) -> bytes | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return path.read_bytes()
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc

    def delete(self, key: str) -> None:
        try:
            self._path(key).unlink(missing_ok=True)
        except OSError as exc:
            raise StorageUnavailable(str(exc)) from exc


DEFAULT_SESSION_TTL = 24 * 3600.0


class TwoTierStore:
    """TTL cache over a durable tier.

    Writes land durably before they are acknowledged; reads fall back to
    the durable tier when the cache entry expired and repopulate the
    cache, so the caller never observes which tier served the value.
    """

    def __init__(self, cache: TTLCache, durable):
        self.cache = cache
        self.durable = durable

    def put(self, key: str, value: bytes) -> None:
        self.durable.put(key, value)
        self.cache.put(key, value)

    def get(self, key: str) -> bytes | None:
        value = self.cache.get(key)
        if value is not None:
            return value
        value = self.durable.get(key)
        if value is not None:
            self.cache.put(key, value)
        return value


class SessionStore:
    """Snapshot persistence for task resumption."""

    def __init__(self, store: TwoTierStore):
        self._store = store

    @classmethod
    def in_memory(cls, ttl_seconds: float = DEFAULT_SESSION_TTL, clock=time.time) -> "SessionStore":
        return cls(TwoTierStore(TTLCache(ttl_seconds, clock), InMemoryDurable()))

    @classmethod
    def file_backed(cls, directory: str | Path, ttl_seconds: float = DEFAULT_SESSION_TTL,
                    clock=time.time) -> "SessionStore":
        return cls(TwoTierStore(TTLCache(ttl_seconds, clock), FileDurable(directory)))

    @property
    def tiers(self) -> TwoTierStore:
        return self._store

    def put_session(self, task_id: str, snapshot: SessionSnapshot) -> None:
        self._store.put(task_id, snapshot.to_bytes())

    def get_session(self, task_id: str) -> SessionSnapshot | None:
        raw = self._store.get(task_id)
        if raw is None:
            return None
        return SessionSnapshot.from_bytes(raw)


# --- replay ------------------------------------------------------------------


def replay(events: list[TimelineEvent]):
    """Fold a timeline prefix back into a task record.

    Returns None for the empty prefix (nothing has been created yet).
    Raises CorruptTimeline on seq gaps, duplicate seqs, events after a
    terminal event, or a timeline that does not start with TaskCreated.
    """
    from . import maestro  # fold targets live with the state machine

    if not events:
        return None
    record = None
    for i, event in enumerate(events, 1):
        if event.seq != i:
            raise CorruptTimeline(f"gap at seq {i}: found {event.seq}")
        if record is None:
            if event.kind != TASK_CREATED:
                raise CorruptTimeline(f"timeline starts with {event.kind}, not {TASK_CREATED}")
            record = maestro.fold_task_created(event)
            continue
        if record.status in maestro.TERMINAL_STATUSES:
            raise CorruptTimeline(f"event {event.kind} at seq {event.seq} after terminal event")
        if event.kind == TASK_CREATED:
            raise CorruptTimeline(f"duplicate {TASK_CREATED} at seq {event.seq}")
        maestro.fold_event(record, event)
    return record
