"""The orchestration engine.

Owns the per-task state machine, runs the agentic loop against a model
driver and an executor link, routes approvals and plan decisions, and is
the sole writer of a task's timeline events. Tool execution itself always
happens executor-side; this module only decides what may run and feeds
results back to the model.
"""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field
from typing import Optional, Union

from . import protocol, safety, state
from .model import (
    EFFORT_LEVELS,
    DriverUnavailable,
    FinalText,
    HistoryTurn,
    MalformedTurn,
    ModelPayload,
    ModelTurn,
    PlanProposal,
    ToolCall,
    assemble_payload,
)
from .protocol import Message

# Task statuses.
CREATED = "Created"
BOOTSTRAPPING = "Bootstrapping"
AWAITING_MODEL = "AwaitingModel"
AWAITING_APPROVAL = "AwaitingApproval"
AWAITING_TOOL_RESULT = "AwaitingToolResult"
AWAITING_PLAN_DECISION = "AwaitingPlanDecision"
COMPLETED = "Completed"
FAILED = "Failed"
CANCELLED = "Cancelled"

STATUSES = (
    CREATED, BOOTSTRAPPING, AWAITING_MODEL, AWAITING_APPROVAL,
    AWAITING_TOOL_RESULT, AWAITING_PLAN_DECISION, COMPLETED, FAILED, CANCELLED,
)
TERMINAL_STATUSES = frozenset({COMPLETED, FAILED, CANCELLED})

MODES = safety.MODES


class ModifiedWithoutSteps(Exception):
    """plan_modify was submitted without a replacement step list."""


@dataclass(frozen=True)
class Plan:
    steps: tuple[str, ...]
    decision: str = "pending"  # pending | approved | rejected | modified
    modified_steps: tuple[str, ...] | None = None

    def effective_steps(self) -> tuple[str, ...]:
        if self.decision == "modified" and self.modified_steps:
            return self.modified_steps
        return self.steps

    def to_data(self) -> dict:
        return {
            "steps": list(self.steps),
            "decision": self.decision,
            "modified_steps": list(self.modified_steps) if self.modified_steps else None,
        }

    @classmethod
    def from_data(cls, data: dict) -> "Plan":
        modified = data.get("modified_steps")
        return cls(
            steps=tuple(data["steps"]),
            decision=data.get("decision", "pending"),
            modified_steps=tuple(modified) if modified else None,
        )


@dataclass(frozen=True)
class BootstrapMetadata:
    os_name: str
    working_directory: str
    recent_git_history: tuple[str, ...]
    project_structure: tuple[str, ...]

    def to_body(self) -> dict:
        return {
            "os_name": self.os_name,
            "working_directory": self.working_directory,
            "recent_git_history": list(self.recent_git_history),
            "project_structure": list(self.project_structure),
        }

    @classmethod
    def from_body(cls, body: dict) -> "BootstrapMetadata":
        return cls(
            os_name=body.get("os_name", ""),
            working_directory=body.get("working_directory", ""),
            recent_git_history=tuple(body.get("recent_git_history", ())),
            project_structure=tuple(body.get("project_structure", ())),
        )


@dataclass
class BootstrapLimits:
    max_commits: int = 10
    tree_depth: int = 3
    tree_max_entries: int = 500
    probe_timeout: float = 5.0


@dataclass
class MaestroConfig:
    max_iterations: int = 50
    read_before_edit_mode: str = "warn"  # warn | enforce
    bootstrap_limits: BootstrapLimits = field(default_factory=BootstrapLimits)


@dataclass
class TaskRecord:
    task_id: str
    status: str
    mode: str
    planning: bool
    effort: str
    policy: str = "default"
    history: list[HistoryTurn] = field(default_factory=list)
    read_set: dict[str, str] = field(default_factory=dict)
    pending_invocation: tuple[str, ToolCall] | None = None
    pending_rules: tuple[str, ...] = ()
    proposed_plan: Plan | None = None
    accepted_plan: Plan | None = None
    iteration_count: int = 0
    final_text: str | None = None
    failure_reason: str | None = None
    bootstrap: BootstrapMetadata | None = None

    def to_snapshot_data(self) -> dict:
        pending = None
        if self.pending_invocation is not None:
            inv, call = self.pending_invocation
            pending = {"invocation_id": inv, "tool": call.tool_name,
                       "args": call.args, "rationale": call.rationale}
        return {
            "task_id": self.task_id,
            "status": self.status,
            "mode": self.mode,
            "planning": self.planning,
            "effort": self.effort,
            "policy": self.policy,
            "history": [[t.role, t.content, t.invocation_id] for t in self.history],
            "read_set": dict(self.read_set),
            "pending_invocation": pending,
            "pending_rules": list(self.pending_rules),
            "proposed_plan": self.proposed_plan.to_data() if self.proposed_plan else None,
            "accepted_plan": self.accepted_plan.to_data() if self.accepted_plan else None,
            "iteration_count": self.iteration_count,
            "final_text": self.final_text,
            "failure_reason": self.failure_reason,
            "bootstrap": self.bootstrap.to_body() if self.bootstrap else None,
        }

    @classmethod
    def from_snapshot_data(cls, data: dict) -> "TaskRecord":
        record = cls(
            task_id=data["task_id"],
            status=data["status"],
            mode=data["mode"],
            planning=data["planning"],
            effort=data["effort"],
            policy=data.get("policy", "default"),
        )
        record.history = [HistoryTurn(r, c, i) for r, c, i in data["history"]]
        record.read_set = dict(data["read_set"])
        pending = data.get("pending_invocation")
        if pending is not None:
            record.pending_invocation = (
                pending["invocation_id"],
                ToolCall(pending["tool"], pending["args"], pending.get("rationale")),
            )
        record.pending_rules = tuple(data.get("pending_rules", ()))
        if data.get("proposed_plan"):
            record.proposed_plan = Plan.from_data(data["proposed_plan"])
        if data.get("accepted_plan"):
            record.accepted_plan = Plan.from_data(data["accepted_plan"])
        record.iteration_count = data["iteration_count"]
        record.final_text = data.get("final_text")
        record.failure_reason = data.get("failure_reason")
        if data.get("bootstrap"):
            record.bootstrap = BootstrapMetadata.from_body(data["bootstrap"])
        return record

    def restore_from(self, other: "TaskRecord") -> None:
        self.status = other.status
        self.mode = other.mode
        self.planning = other.planning
        self.effort = other.effort
        self.policy = other.policy
        self.history = list(other.history)
        self.read_set = dict(other.read_set)
        self.pending_invocation = other.pending_invocation
        self.pending_rules = other.pending_rules
        self.proposed_plan = other.proposed_plan
        self.accepted_plan = other.accepted_plan
        self.iteration_count = other.iteration_count
        self.final_text = other.final_text
        self.failure_reason = other.failure_reason
        self.bootstrap = other.bootstrap

    def observable_state(self) -> dict:
        return {
            "status": self.status,
            "history": [(t.role, t.content, t.invocation_id) for t in self.history],
            "read_set": dict(self.read_set),
            "final_text": self.final_text,
            "iteration_count": self.iteration_count,
        }


# --- directives --------------------------------------------------------------


@dataclass(frozen=True)
class Finalize:
    text: str


@dataclass(frozen=True)
class Dispatch:
    invocation_id: str
    call: ToolCall
    expected_hash: str | None = None
    enforce_fresh: bool = False
    redispatch: bool = False


@dataclass(frozen=True)
class RequestApproval:
    invocation_id: str
    call: ToolCall
    matched_rules: tuple[str, ...]


@dataclass(frozen=True)
class RequestPlanDecision:
    plan: Plan


@dataclass(frozen=True)
class FailTask:
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class Continue:
    note: str = ""


@dataclass(frozen=True)
class Ignored:
    note: str = ""


Directive = Union[Finalize, Dispatch, RequestApproval, RequestPlanDecision,
                  FailTask, Continue, Ignored]


# --- loop inbox items (executor link) ----------------------------------------


@dataclass(frozen=True)
class Attached:
    session_id: str
    channel: object = None  # installed by the loop, never by the transport


@dataclass(frozen=True)
class Detached:
    session_id: str


@dataclass(frozen=True)
class CancelRequested:
    reason: str = ""


@dataclass(frozen=True)
class PostedAction:
    """A user action injected out of band (HTTP), as a protocol message."""

    msg: Message


LoopItem = Union[Message, Attached, Detached, CancelRequested, PostedAction]


# --- rendering ---------------------------------------------------------------


def _numbered(steps) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(steps, 1))


def render_model_turn(turn: ModelTurn) -> str:
    if isinstance(turn, FinalText):
        return turn.text
    if isinstance(turn, ToolCall):
        return f"call {turn.tool_name} " + json.dumps(
            turn.args, sort_keys=True, ensure_ascii=True
        )
    return "plan proposed:\n" + _numbered(turn.steps)


def render_tool_result(tool: str, body: dict) -> str:
    """Turn a ToolResult message body into the text the model sees."""
    payload = body.get("payload") or {}
    if body.get("status") != "ok":
        kind = body.get("error_kind", "Error")
        return f"{tool} error ({kind}): {body.get('message', '')}"
    if tool == "read":
        head = f"read {payload.get('path', '')}: ok"
        if payload.get("truncated"):
            head += " (truncated)"
        return head + "\n" + str(payload.get("content", ""))
    if tool == "edit":
        return f"edit {payload.get('file_name', '')}: {payload.get('summary', 'ok')}"
    if tool == "shell":
        parts = [f"shell exit {payload.get('exit_code')}"]
        if payload.get("stdout"):
            parts.append("stdout:\n" + str(payload["stdout"]))
        if payload.get("stderr"):
            parts.append("stderr:\n" + str(payload["stderr"]))
        return "\n".join(parts)
    return f"{tool}: ok " + json.dumps(payload, sort_keys=True, ensure_ascii=True)


def render_plan_acceptance(steps, modified: bool) -> str:
    head = "plan modified and accepted:" if modified else "plan approved:"
    return head + "\n" + _numbered(steps)


def read_before_edit_check(task: TaskRecord, path: str, current_hash: str) -> str:
    """fresh | stale | unread, against the hashes recorded by read results."""
    recorded = task.read_set.get(path)
    if recorded is None:
        return "unread"
    return "fresh" if recorded == current_hash else "stale"


# --- the engine ---------------------------------------------------------------


class Maestro:
    """One engine serves many tasks; each task is driven by its own loop.

    ``events`` must provide ``append_event(task_id, kind, payload)`` and is
    the only place timeline events are written. ``sessions`` persists
    resumable snapshots at every status transition.
    """

    def __init__(self, events, sessions, policies: dict[str, safety.PolicyConfig] | None = None,
                 config: MaestroConfig | None = None,
                 manifest: tuple[protocol.ToolManifestEntry, ...] = protocol.DEFAULT_MANIFEST):
        self.events = events
        self.sessions = sessions
        self.policies = policies or {"default": safety.PolicyConfig()}
        self.config = config or MaestroConfig()
        self.manifest = tuple(manifest)
        self._by_name = {entry.name: entry for entry in self.manifest}

    # -- lifecycle --

    def create_task(self, prompt: str, mode: str = "approval", planning: bool = False,
                    effort: str = "medium", policy: str = "default") -> TaskRecord:
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be non-empty")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {list(MODES)}, got {mode!r}")
        if effort not in EFFORT_LEVELS:
            raise ValueError(f"effort must be one of {list(EFFORT_LEVELS)}, got {effort!r}")
        if policy not in self.policies:
            raise ValueError(f"unknown policy {policy!r}; configured: {sorted(self.policies)}")
        task = TaskRecord(task_id=uuid.uuid4().hex, status=CREATED, mode=mode,
                          planning=planning, effort=effort, policy=policy)
        task.history.append(HistoryTurn("user", prompt))
        self.events.append_event(task.task_id, state.TASK_CREATED, {
            "prompt": prompt, "mode": mode, "planning": planning,
            "effort": effort, "policy": policy,
        })
        self._snapshot(task)
        return task

    def executor_attached(self, task: TaskRecord) -> None:
        if task.status == CREATED:
            self._set_status(task, BOOTSTRAPPING)

    def complete_bootstrap(self, task: TaskRecord, metadata: BootstrapMetadata) -> None:
        if task.status != BOOTSTRAPPING:
            return
        task.bootstrap = metadata
        self.events.append_event(task.task_id, state.BOOTSTRAP_COMPLETED, metadata.to_body())
        self._set_status(task, AWAITING_MODEL)

    def payload_for(self, task: TaskRecord) -> ModelPayload:
        planning_requested = task.planning and task.accepted_plan is None
        return assemble_payload(task, self.manifest, task.effort, planning_requested)

    # -- the state machine --

    def step(self, task: TaskRecord, turn: ModelTurn) -> Directive:
        if task.status != AWAITING_MODEL:
            return self.fail_task(task, "InvalidTurnForState",
                              f"model turn while status is {task.status}")
        if task.iteration_count >= self.config.max_iterations:
            return self.fail_task(task, "IterationLimit",
                              f"exceeded max_iterations={self.config.max_iterations}")
        task.iteration_count += 1

        invocation_id = uuid.uuid4().hex if isinstance(turn, ToolCall) else None
        content = render_model_turn(turn)
        task.history.append(HistoryTurn("model", content, invocation_id))
        self.events.append_event(task.task_id, state.MODEL_RESPONSE,
                                 self._model_response_payload(turn, content, invocation_id))

        if isinstance(turn, FinalText):
            return self._finalize(task, turn.text)

        if isinstance(turn, PlanProposal):
            if not task.planning:
                return self.fail_task(task, "InvalidTurnForState",
                                  "plan proposed but planning mode is off")
            if task.accepted_plan is not None:
                return self.fail_task(task, "InvalidTurnForState",
                                  "a plan was already accepted for this task")
            if not turn.steps:
                return self.fail_task(task, "InvalidTurnForState", "plan proposal with no steps")
            plan = Plan(steps=tuple(turn.steps))
            task.proposed_plan = plan
            self.events.append_event(task.task_id, state.PLAN_PROPOSED,
                                     {"steps": list(turn.steps)})
            self._set_status(task, AWAITING_PLAN_DECISION)
            return RequestPlanDecision(plan)

        call = turn
        if task.planning and task.accepted_plan is None:
            return self.fail_task(task, "InvalidTurnForState",
                              "tool call before a plan was approved")

        entry = self._by_name.get(call.tool_name)
        if entry is None:
            return self._reject_call(
                task, call, invocation_id, "UnknownTool",
                f"unknown tool {call.tool_name!r}; available tools: "
                + ", ".join(sorted(self._by_name)))
        violations = protocol.validate_tool_args(entry, call.args)
        if violations:
            return self._reject_call(task, call, invocation_id, "InvalidArguments",
                                     "; ".join(violations))

        if call.tool_name == "edit":
            rejected = self._pre_edit_check(task, call, invocation_id)
            if rejected is not None:
                return rejected

        decision = safety.evaluate(self.policies[task.policy], call, task.mode)
        if decision.verdict == safety.VERDICT_DENY:
            text = (f"{call.tool_name} error (PolicyDenied): denied by policy: "
                    + "; ".join(decision.matched_rules))
            task.history.append(HistoryTurn("tool", text, invocation_id))
            self.events.append_event(task.task_id, state.POLICY_DENIED, {
                "invocation_id": invocation_id, "tool": call.tool_name,
                "args": call.args, "matched_rules": list(decision.matched_rules),
                "text": text,
            })
            self._snapshot(task)
            return Continue("policy denial fed back to the model")

        if decision.verdict == safety.VERDICT_REQUIRE_APPROVAL:
            task.pending_invocation = (invocation_id, call)
            task.pending_rules = tuple(decision.matched_rules)
            self.events.append_event(task.task_id, state.APPROVAL_REQUESTED, {
                "invocation_id": invocation_id, "tool": call.tool_name,
                "args": call.args, "matched_rules": list(decision.matched_rules),
            })
            self._set_status(task, AWAITING_APPROVAL)
            return RequestApproval(invocation_id, call, tuple(decision.matched_rules))

        return self._dispatch(task, invocation_id, call)

    def handle_tool_result(self, task: TaskRecord, invocation_id: str, body: dict) -> Directive:
        if task.status in TERMINAL_STATUSES:
            return Ignored("task is terminal")
        pending = task.pending_invocation
        if task.status != AWAITING_TOOL_RESULT or pending is None or pending[0] != invocation_id:
            self.events.append_event(task.task_id, state.DUPLICATE_RESULT_IGNORED,
                                     {"invocation_id": invocation_id, "kind": "tool_result"})
            return Ignored("stale or duplicate tool result")
        _, call = pending
        tool = call.tool_name
        payload = body.get("payload") or {}
        if tool == "edit":
            self._post_edit_freshness(task, call, body)
        text = render_tool_result(tool, body)
        event_payload = {
            "invocation_id": invocation_id, "tool": tool,
            "status": body.get("status", "error"), "text": text,
        }
        if tool == "read" and body.get("status") == "ok" and "path" in payload and "hash" in payload:
            task.read_set[str(payload["path"])] = str(payload["hash"])
            event_payload["path"] = str(payload["path"])
            event_payload["hash"] = str(payload["hash"])
        task.history.append(HistoryTurn("tool", text, invocation_id))
        task.pending_invocation = None
        task.pending_rules = ()
        self.events.append_event(task.task_id, state.TOOL_RESULT, event_payload)
        self._set_status(task, AWAITING_MODEL)
        return Continue("tool result applied")

    def handle_approval(self, task: TaskRecord, invocation_id: str,
                        decision: str, reason: str | None = None) -> Directive:
        if task.status in TERMINAL_STATUSES:
            return Ignored("task is terminal")
        pending = task.pending_invocation
        if task.status != AWAITING_APPROVAL or pending is None or pending[0] != invocation_id:
            self.events.append_event(task.task_id, state.DUPLICATE_RESULT_IGNORED,
                                     {"invocation_id": invocation_id, "kind": "approval_decision"})
            return Ignored("stale or duplicate approval decision")
        inv, call = pending
        if decision == "approve":
            self.events.append_event(task.task_id, state.APPROVAL_GRANTED,
                                     {"invocation_id": inv})
            return self._dispatch(task, inv, call)
        if decision != "deny":
            raise ValueError(f"decision must be approve or deny, got {decision!r}")
        text = f"{call.tool_name} error (ApprovalDenied): the developer denied this invocation"
        if reason:
            text += f": {reason}"
        task.history.append(HistoryTurn("tool", text, inv))
        task.pending_invocation = None
        task.pending_rules = ()
        self.events.append_event(task.task_id, state.APPROVAL_DENIED,
                                 {"invocation_id": inv, "reason": reason or "", "text": text})
        self._set_status(task, AWAITING_MODEL)
        return Continue("approval denial fed back to the model")

    def handle_plan_decision(self, task: TaskRecord, decision: str,
                             modified_steps: list[str] | None = None) -> Directive:
        if task.status != AWAITING_PLAN_DECISION or task.proposed_plan is None:
            return Ignored("no plan awaiting a decision")
        plan = task.proposed_plan
        if decision == "approved":
            task.accepted_plan = Plan(plan.steps, "approved", None)
            text = render_plan_acceptance(plan.steps, modified=False)
            task.history.append(HistoryTurn("user", text))
            self.events.append_event(task.task_id, state.PLAN_APPROVED,
                                     {"steps": list(plan.steps), "text": text})
        elif decision == "modified":
            steps = tuple(modified_steps or ())
            if not steps:
                raise ModifiedWithoutSteps("plan_modify requires a non-empty step list")
            task.accepted_plan = Plan(plan.steps, "modified", steps)
            text = render_plan_acceptance(steps, modified=True)
            task.history.append(HistoryTurn("user", text))
            self.events.append_event(task.task_id, state.PLAN_MODIFIED,
                                     {"steps": list(steps), "text": text})
        elif decision == "rejected":
            text = "plan rejected"
            task.history.append(HistoryTurn("user", text))
            self.events.append_event(task.task_id, state.PLAN_REJECTED, {"text": text})
        else:
            raise ValueError(f"unknown plan decision {decision!r}")
        task.proposed_plan = None
        self._set_status(task, AWAITING_MODEL)
        return Continue(f"plan {decision}")

    def cancel(self, task: TaskRecord) -> bool:
        if task.status in TERMINAL_STATUSES:
            return False
        self.events.append_event(task.task_id, state.TASK_CANCELLED, {})
        self._set_status(task, CANCELLED)
        return True

    # -- parking and resumption --

    def park(self, task: TaskRecord, session_id: str) -> None:
        if task.status in TERMINAL_STATUSES:
            return
        self.events.append_event(task.task_id, state.CLIENT_DISCONNECTED,
                                 {"session_id": session_id})
        self._snapshot(task)

    def resume(self, task: TaskRecord, session_id: str) -> Optional[Directive]:
        """Reload the snapshot and re-present whatever was pending.

        Re-dispatch reuses the original invocation_id and is recorded only
        on the ClientReconnected event — the ToolDispatched event is never
        duplicated.
        """
        if task.status in TERMINAL_STATUSES:
            return None
        snap = self.sessions.get_session(task.task_id)
        if snap is None:
            return self.fail_task(task, "Unrecoverable", "no snapshot found on resume")
        task.restore_from(snap.restore())
        redispatch = (task.status == AWAITING_TOOL_RESULT
                      and task.pending_invocation is not None)
        payload: dict = {"session_id": session_id, "redispatch": redispatch}
        if redispatch:
            payload["invocation_id"] = task.pending_invocation[0]
        self.events.append_event(task.task_id, state.CLIENT_RECONNECTED, payload)
        if redispatch:
            inv, call = task.pending_invocation
            expected, enforce = self._edit_freshness_extras(task, call)
            return Dispatch(inv, call, expected, enforce, redispatch=True)
        if task.status == AWAITING_APPROVAL and task.pending_invocation is not None:
            inv, call = task.pending_invocation
            return RequestApproval(inv, call, task.pending_rules)
        if task.status == AWAITING_PLAN_DECISION and task.proposed_plan is not None:
            return RequestPlanDecision(task.proposed_plan)
        return None

    # -- internals --

    def _pre_edit_check(self, task: TaskRecord, call: ToolCall,
                        invocation_id: str) -> Optional[Directive]:
        """Unread files are detectable before dispatch; staleness needs the
        disk hash and is handled around the edit result instead."""
        path = str(call.args.get("file_name", ""))
        if path in task.read_set:
            return None
        enforced = self.config.read_before_edit_mode == "enforce"
        payload: dict = {"path": path, "freshness": "unread", "enforced": enforced}
        if enforced:
            text = (f"edit error (ReadBeforeEdit): {path} has not been read in this "
                    f"task; call read on it first, then retry the edit")
            payload["text"] = text
            payload["invocation_id"] = invocation_id
            self.events.append_event(task.task_id, state.READ_BEFORE_EDIT_WARNING, payload)
            task.history.append(HistoryTurn("tool", text, invocation_id))
            self._snapshot(task)
            return Continue("edit rejected: file never read")
        self.events.append_event(task.task_id, state.READ_BEFORE_EDIT_WARNING, payload)
        return None

    def _post_edit_freshness(self, task: TaskRecord, call: ToolCall, body: dict) -> None:
        path = str(call.args.get("file_name", ""))
        payload = body.get("payload") or {}
        if body.get("status") == "ok":
            pre_hash = payload.get("pre_hash")
            if pre_hash is not None and read_before_edit_check(task, path, pre_hash) == "stale":
                self.events.append_event(task.task_id, state.READ_BEFORE_EDIT_WARNING,
                                         {"path": path, "freshness": "stale", "enforced": False})
        elif body.get("error_kind") == "StaleContent":
            self.events.append_event(task.task_id, state.READ_BEFORE_EDIT_WARNING,
                                     {"path": path, "freshness": "stale", "enforced": True})

    def _edit_freshness_extras(self, task: TaskRecord, call: ToolCall):
        if call.tool_name != "edit":
            return None, False
        expected = task.read_set.get(str(call.args.get("file_name", "")))
        return expected, self.config.read_before_edit_mode == "enforce"

    def _dispatch(self, task: TaskRecord, invocation_id: str, call: ToolCall) -> Dispatch:
        expected, enforce = self._edit_freshness_extras(task, call)
        task.pending_invocation = (invocation_id, call)
        self.events.append_event(task.task_id, state.TOOL_DISPATCHED, {
            "invocation_id": invocation_id, "tool": call.tool_name,
            "args": call.args, "redispatch": False,
        })
        self._set_status(task, AWAITING_TOOL_RESULT)
        return Dispatch(invocation_id, call, expected, enforce)

    def _reject_call(self, task: TaskRecord, call: ToolCall, invocation_id: str,
                     error_kind: str, message: str) -> Directive:
        # Model-recoverable rejection: recorded as an orchestrator-made
        # error result (nothing was dispatched).
        text = f"{call.tool_name} error ({error_kind}): {message}"
        task.history.append(HistoryTurn("tool", text, invocation_id))
        self.events.append_event(task.task_id, state.TOOL_RESULT, {
            "invocation_id": invocation_id, "tool": call.tool_name,
            "status": "error", "error_kind": error_kind, "text": text,
        })
        self._snapshot(task)
        return Continue(error_kind)

    def _model_response_payload(self, turn: ModelTurn, content: str,
                                invocation_id: str | None) -> dict:
        if isinstance(turn, FinalText):
            return {"variant": "final", "text": turn.text, "content": content}
        if isinstance(turn, ToolCall):
            payload = {"variant": "tool_call", "tool": turn.tool_name, "args": turn.args,
                       "content": content, "invocation_id": invocation_id}
            if turn.rationale:
                payload["rationale"] = turn.rationale
            return payload
        return {"variant": "plan", "steps": list(turn.steps), "content": content}

    def _finalize(self, task: TaskRecord, text: str) -> Finalize:
        task.final_text = text
        self.events.append_event(task.task_id, state.TASK_COMPLETED, {"final_text": text})
        self._set_status(task, COMPLETED)
        return Finalize(text)

    def fail_task(self, task: TaskRecord, reason: str, detail: str = "") -> FailTask:
        task.failure_reason = reason
        self.events.append_event(task.task_id, state.TASK_FAILED,
                                 {"reason": reason, "detail": detail})
        self._set_status(task, FAILED)
        return FailTask(reason, detail)

    def _set_status(self, task: TaskRecord, status: str) -> None:
        task.status = status
        self._snapshot(task)

    def _snapshot(self, task: TaskRecord) -> None:
        self.sessions.put_session(task.task_id, state.SessionSnapshot.from_record(task))

    # -- the loop --

    async def run_loop(self, task: TaskRecord, driver, link) -> str:
        """Drive one task to a terminal status.

        ``link`` is the executor link: ``send(msg) -> bool`` (False when no
        live channel) and ``recv() -> LoopItem``. An executor drop parks
        the task (snapshot + ClientDisconnected) and the loop waits for a
        new attach; it never fails the task for a disconnect.
        """
        session_id = ""
        bootstrap_requested = False
        while task.status not in TERMINAL_STATUSES:
            if task.status == AWAITING_MODEL:
                await self._model_step(task, driver, link)
                continue
            if task.status == BOOTSTRAPPING and not bootstrap_requested:
                if await link.send(Message(protocol.BOOTSTRAP_REQUEST, task.task_id)):
                    bootstrap_requested = True
                else:
                    session_id = await self._reattach(task, link, session_id)
                continue
            item = await link.recv()
            if isinstance(item, CancelRequested):
                self.cancel(task)
            elif isinstance(item, Detached):
                session_id = await self._reattach(task, link, session_id)
                bootstrap_requested = False
            elif isinstance(item, Attached):
                link.install(item.channel)
                session_id = item.session_id
                if task.status == CREATED:
                    self.executor_attached(task)
            elif isinstance(item, PostedAction):
                await self._route_message(task, link, item.msg)
            elif isinstance(item, Message):
                await self._route_message(task, link, item)
        detail = task.final_text or task.failure_reason or ""
        await link.send(Message(protocol.TASK_UPDATE, task.task_id,
                                body={"status": task.status, "detail": detail}))
        return task.status

    async def _model_step(self, task: TaskRecord, driver, link) -> None:
        payload = self.payload_for(task)
        try:
            turn = await driver.next_turn(payload)
        except DriverUnavailable as exc:
            self.fail_task(task, "DriverUnavailable", str(exc))
            return
        except MalformedTurn as exc:
            self.fail_task(task, "MalformedTurn", str(exc))
            return
        directive = self.step(task, turn)
        await link.send(Message(protocol.TASK_UPDATE, task.task_id, body={
            "status": task.status, "detail": _turn_summary(turn),
        }))
        await self._perform(task, link, directive)

    async def _perform(self, task: TaskRecord, link, directive: Directive) -> None:
        if isinstance(directive, Dispatch):
            await link.send(self.dispatch_message(task, directive))
        elif isinstance(directive, RequestApproval):
            await link.send(Message(protocol.APPROVAL_REQUEST, task.task_id,
                                    directive.invocation_id, {
                                        "tool": directive.call.tool_name,
                                        "args": directive.call.args,
                                        "matched_rules": list(directive.matched_rules),
                                    }))
        elif isinstance(directive, RequestPlanDecision):
            await link.send(Message(protocol.PLAN_PROPOSED, task.task_id,
                                    body={"steps": list(directive.plan.steps)}))
        # Finalize/FailTask end the loop via status; Continue/Ignored send nothing.
        # A failed send is handled by the Detached item the link queues.

    def dispatch_message(self, task: TaskRecord, directive: Dispatch) -> Message:
        body: dict = {"tool": directive.call.tool_name, "args": directive.call.args}
        if directive.redispatch:
            body["redispatch"] = True
        if directive.expected_hash is not None:
            body["expected_hash"] = directive.expected_hash
        if directive.enforce_fresh:
            body["enforce_fresh"] = True
        return Message(protocol.TOOL_DISPATCH, task.task_id, directive.invocation_id, body)

    async def _route_message(self, task: TaskRecord, link, msg: Message) -> None:
        if msg.kind == protocol.BOOTSTRAP_RESULT and task.status == BOOTSTRAPPING:
            self.complete_bootstrap(task, BootstrapMetadata.from_body(msg.body))
        elif msg.kind == protocol.TOOL_RESULT:
            self.handle_tool_result(task, msg.invocation_id, msg.body)
        elif msg.kind == protocol.APPROVAL_DECISION:
            directive = self.handle_approval(task, msg.invocation_id,
                                             msg.body["decision"], msg.body.get("reason"))
            await self._perform(task, link, directive)
        elif msg.kind == protocol.PLAN_DECISION:
            try:
                directive = self.handle_plan_decision(task, msg.body["decision"],
                                                      msg.body.get("modified_steps"))
            except ModifiedWithoutSteps as exc:
                await link.send(Message(protocol.ERROR, task.task_id, body={
                    "code": "ModifiedWithoutSteps", "message": str(exc)}))
                return
            await self._perform(task, link, directive)
        elif msg.kind == protocol.PING:
            await link.send(Message(protocol.PONG, task.task_id))
        # Pong/Hello and anything else carry no loop semantics here.

    async def _reattach(self, task: TaskRecord, link, old_session_id: str) -> str:
        """Park, then block until a new executor attaches and resume it.

        While parked, raw channel messages are dropped (their channel is
        gone; re-dispatch re-delivers anything lost), but user actions
        posted over HTTP still apply.
        """
        self.park(task, old_session_id)
        while True:
            item = await link.recv()
            if isinstance(item, Attached):
                link.install(item.channel)
                new_session = item.session_id
                break
            if isinstance(item, CancelRequested):
                self.cancel(task)
                return old_session_id
            if isinstance(item, PostedAction):
                await self._route_message(task, link, item.msg)
                if task.status in TERMINAL_STATUSES:
                    return old_session_id
        directive = self.resume(task, new_session)
        if directive is not None:
            await self._perform(task, link, directive)
        return new_session


def _turn_summary(turn: ModelTurn) -> str:
    if isinstance(turn, FinalText):
        return turn.text
    if isinstance(turn, ToolCall):
        return f"call {turn.tool_name}"
    return f"plan proposed ({len(turn.steps)} steps)"


# --- replay fold targets (used by state.replay) -------------------------------


def fold_task_created(event: state.TimelineEvent) -> TaskRecord:
    p = event.payload
    record = TaskRecord(task_id=event.task_id, status=CREATED, mode=p["mode"],
                        planning=p["planning"], effort=p["effort"],
                        policy=p.get("policy", "default"))
    record.history.append(HistoryTurn("user", p["prompt"]))
    return record


def fold_event(record: TaskRecord, event: state.TimelineEvent) -> None:
    kind, p = event.kind, event.payload
    if kind == state.BOOTSTRAP_COMPLETED:
        record.bootstrap = BootstrapMetadata.from_body(p)
        record.status = AWAITING_MODEL
    elif kind == state.MODEL_RESPONSE:
        record.iteration_count += 1
        record.history.append(HistoryTurn("model", p["content"], p.get("invocation_id")))
    elif kind == state.PLAN_PROPOSED:
        record.proposed_plan = Plan(tuple(p["steps"]))
        record.status = AWAITING_PLAN_DECISION
    elif kind == state.PLAN_APPROVED:
        record.accepted_plan = Plan(tuple(p["steps"]), "approved", None)
        record.history.append(HistoryTurn("user", p["text"]))
        record.proposed_plan = None
        record.status = AWAITING_MODEL
    elif kind == state.PLAN_MODIFIED:
        original = record.proposed_plan.steps if record.proposed_plan else tuple(p["steps"])
        record.accepted_plan = Plan(original, "modified", tuple(p["steps"]))
        record.history.append(HistoryTurn("user", p["text"]))
        record.proposed_plan = None
        record.status = AWAITING_MODEL
    elif kind == state.PLAN_REJECTED:
        record.history.append(HistoryTurn("user", p.get("text", "plan rejected")))
        record.proposed_plan = None
        record.status = AWAITING_MODEL
    elif kind == state.APPROVAL_REQUESTED:
        record.pending_invocation = (p["invocation_id"], ToolCall(p["tool"], p["args"]))
        record.pending_rules = tuple(p.get("matched_rules", ()))
        record.status = AWAITING_APPROVAL
    elif kind == state.APPROVAL_GRANTED:
        pass  # the ToolDispatched event that follows carries the transition
    elif kind == state.APPROVAL_DENIED:
        record.history.append(HistoryTurn("tool", p["text"], p.get("invocation_id")))
        record.pending_invocation = None
        record.pending_rules = ()
        record.status = AWAITING_MODEL
    elif kind == state.POLICY_DENIED:
        record.history.append(HistoryTurn("tool", p["text"], p.get("invocation_id")))
    elif kind == state.TOOL_DISPATCHED:
        record.pending_invocation = (p["invocation_id"], ToolCall(p["tool"], p["args"]))
        record.status = AWAITING_TOOL_RESULT
    elif kind == state.TOOL_RESULT:
        record.history.append(HistoryTurn("tool", p["text"], p.get("invocation_id")))
        if p.get("path") and p.get("hash"):
            record.read_set[p["path"]] = p["hash"]
        if record.pending_invocation and record.pending_invocation[0] == p.get("invocation_id"):
            record.pending_invocation = None
            record.pending_rules = ()
        record.status = AWAITING_MODEL
    elif kind == state.READ_BEFORE_EDIT_WARNING:
        if "text" in p:
            record.history.append(HistoryTurn("tool", p["text"], p.get("invocation_id")))
    elif kind in (state.DUPLICATE_RESULT_IGNORED, state.CLIENT_DISCONNECTED,
                  state.CLIENT_RECONNECTED):
        pass
    elif kind == state.TASK_COMPLETED:
        record.final_text = p.get("final_text", "")
        record.status = COMPLETED
    elif kind == state.TASK_FAILED:
        record.failure_reason = p.get("reason", "")
        record.status = FAILED
    elif kind == state.TASK_CANCELLED:
        record.status = CANCELLED
    else:
        raise state.CorruptTimeline(f"unknown event kind {kind!r} at seq {event.seq}")
