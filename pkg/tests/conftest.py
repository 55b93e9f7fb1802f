"""Shared test machinery.

Most scenario tests run the real server core, maestro loop and executor
engine in-process over memory channels, driven by the scripted model
driver — the same code paths the wire transports use, minus the sockets.
End-to-end tests start a real uvicorn server on an ephemeral port and run
the installed CLI against it.
"""

from __future__ import annotations

import asyncio
import random
import string
import threading
import time

import pytest

from agentloop import protocol
from agentloop.cli import ExecutorEngine
from agentloop.maestro import TERMINAL_STATUSES
from agentloop.model import Script, ScriptedDriver, parse_script
from agentloop.protocol import Message
from agentloop.server import ServerConfig, ServerCore, memory_channel_pair


def run(coro):
    return asyncio.run(coro)


async def wait_until(predicate, timeout: float = 5.0, interval: float = 0.001):
    deadline = asyncio.get_event_loop().time() + timeout
    while not predicate():
        if asyncio.get_event_loop().time() > deadline:
            raise AssertionError("condition not met in time")
        await asyncio.sleep(interval)


# --- scripted session harness ---------------------------------------------------


class ScriptedResponder:
    """Plays back a fixed list of approval or plan answers, in order."""

    def __init__(self, answers):
        self._answers = list(answers)
        self.asked: list[Message] = []

    async def __call__(self, msg: Message):
        self.asked.append(msg)
        if not self._answers:
            raise AssertionError(f"responder exhausted; unexpected question {msg.kind}")
        answer = self._answers.pop(0)
        if callable(answer):
            return await answer(msg)
        return answer


class HarnessEngine(ExecutorEngine):
    """Executor engine with kill points for fault injection.

    Ordinals are 1-based and count tool dispatches / approval requests as
    they arrive. A kill closes the live channel, which is exactly what a
    dropped WebSocket looks like to both sides.
    """

    def __init__(self, *args, kill_before_execute=(), kill_before_result=(),
                 kill_after_result=(), kill_on_approval=(), **kwargs):
        super().__init__(*args, **kwargs)
        self.kill_before_execute = set(kill_before_execute)
        self.kill_before_result = set(kill_before_result)
        self.kill_after_result = set(kill_after_result)
        self.kill_on_approval = set(kill_on_approval)
        self._dispatch_count = 0
        self._approval_count = 0
        self.current_channel = None

    async def run(self, channel):
        self.current_channel = channel
        return await super().run(channel)

    async def _kill(self):
        if self.current_channel is not None:
            await self.current_channel.close()

    async def _answer_dispatch(self, channel, msg):
        if msg.invocation_id not in self._completed and msg.invocation_id not in self._inflight:
            self._dispatch_count += 1
            ordinal = self._dispatch_count
            if ordinal in self.kill_before_execute:
                self.kill_before_execute.discard(ordinal)
                await self._kill()
                return
            if ordinal in self.kill_before_result:
                self.kill_before_result.discard(ordinal)
                await self._compute(msg)  # executed, result cached, never sent
                await self._kill()
                return
            await super()._answer_dispatch(channel, msg)
            if ordinal in self.kill_after_result:
                self.kill_after_result.discard(ordinal)
                await self._kill()
            return
        await super()._answer_dispatch(channel, msg)

    async def _answer_approval(self, channel, msg):
        self._approval_count += 1
        if self._approval_count in self.kill_on_approval:
            self.kill_on_approval.discard(self._approval_count)
            await self._kill()
            return
        await super()._answer_approval(channel, msg)


class Session:
    """One task run end to end against an in-process server core."""

    def __init__(self, script, *, workdir, prompt="do the task", mode="autonomous",
                 planning=False, effort="medium", policies=None, config=None,
                 approvals=(), plans=(), engine_kwargs=None, clock=None):
        script_obj = script if isinstance(script, Script) else parse_script(script)
        self.core = ServerCore(
            config or ServerConfig(heartbeat_interval=3600, inactivity_timeout=3600),
            policies, driver_factory=lambda record: ScriptedDriver(script_obj),
            **({"clock": clock} if clock else {}))
        self.prompt = prompt
        self.mode = mode
        self.planning = planning
        self.effort = effort
        self.workdir = workdir
        self.approvals = ScriptedResponder(approvals)
        self.plans = ScriptedResponder(plans)
        self.engine_kwargs = engine_kwargs or {}
        self.record = None
        self.engine = None
        self.attach_count = 0

    async def start(self):
        self.record = self.core.create_task(self.prompt, self.mode, self.planning,
                                            self.effort)
        self.engine = HarnessEngine(self.record.task_id, workdir=self.workdir,
                                    approval_responder=self.approvals,
                                    plan_responder=self.plans, **self.engine_kwargs)
        return self.record

    @property
    def host(self):
        return self.core.tasks[self.record.task_id]

    async def attach(self):
        server_end, client_end = memory_channel_pair()
        try:
            self.core.attach_executor(self.record.task_id, server_end)
        except Exception:
            await client_end.close()
            raise
        self.attach_count += 1
        return client_end

    async def run(self, max_attaches: int = 60) -> str:
        """Attach (and re-attach after kills) until the task terminates."""
        from agentloop.server import TaskAlreadyTerminal

        if self.record is None:
            await self.start()
        while True:
            if self.host.record.status in TERMINAL_STATUSES:
                break
            await wait_until(lambda: self.host.session is None)
            if self.host.record.status in TERMINAL_STATUSES:
                break
            if self.attach_count >= max_attaches:
                raise AssertionError("too many reattaches")
            try:
                channel = await self.attach()
            except TaskAlreadyTerminal:
                break
            status = await self.engine.run(channel)
            if status is not None:
                break
        return await asyncio.wait_for(self.host.loop_task, timeout=10)

    @property
    def events(self):
        return self.core.bus.read_timeline(self.record.task_id)

    @property
    def kinds(self):
        return [e.kind for e in self.events]


async def run_session(script, **kwargs) -> Session:
    session = Session(script, **kwargs)
    await session.run()
    return session


# --- golden fixtures --------------------------------------------------------------


GOLDEN_SCRIPT = """\
call read {"path": "a.txt"}
call edit {"file_name": "a.txt", "old_string": "world", "new_string": "agent"}
call shell {"command": "echo ok"}
final done
"""

GOLDEN_FILE_BEFORE = "hello world\n"
GOLDEN_FILE_AFTER = "hello agent\n"

GOLDEN_KINDS = [
    "TaskCreated", "BootstrapCompleted",
    "ModelResponse", "ToolDispatched", "ToolResult",
    "ModelResponse", "ToolDispatched", "ToolResult",
    "ModelResponse", "ToolDispatched", "ToolResult",
    "ModelResponse", "TaskCompleted",
]

GOLDEN_KINDS_APPROVAL = [
    "TaskCreated", "BootstrapCompleted",
    "ModelResponse", "ToolDispatched", "ToolResult",
    "ModelResponse", "ApprovalRequested", "ApprovalGranted", "ToolDispatched", "ToolResult",
    "ModelResponse", "ApprovalRequested", "ApprovalGranted", "ToolDispatched", "ToolResult",
    "ModelResponse", "TaskCompleted",
]


def write_golden_workdir(path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / "a.txt").write_text(GOLDEN_FILE_BEFORE, encoding="utf-8")


# --- real-socket server for end-to-end CLI runs -------------------------------------


class RealServer:
    """uvicorn on an ephemeral port, in a daemon thread."""

    def __init__(self, core):
        import uvicorn
        from agentloop.server import create_app

        self.core = core
        config = uvicorn.Config(create_app(core), host="127.0.0.1", port=0,
                                log_level="warning", lifespan="on")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.base_url = ""

    def __enter__(self) -> "RealServer":
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.01)
        port = self.server.servers[0].sockets[0].getsockname()[1]
        self.base_url = f"http://127.0.0.1:{port}"
        return self

    def __exit__(self, *exc) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10)


def real_server(script_text: str, *, policies=None, **config_kwargs) -> RealServer:
    script = parse_script(script_text)
    config = ServerConfig(heartbeat_interval=3600, inactivity_timeout=3600,
                          **config_kwargs)
    core = ServerCore(config, policies,
                      driver_factory=lambda record: ScriptedDriver(script))
    return RealServer(core)


# --- random message generation (round-trip and fuzz corpora) -----------------------

_CHAR_POOL = (string.ascii_letters + string.digits + " \n\t\r\"'\\{}[]:,;|&<>$`"
              + "áßçδ中文🙂")


def random_text(rng: random.Random, max_len: int = 14) -> str:
    return "".join(rng.choice(_CHAR_POOL) for _ in range(rng.randint(0, max_len)))


def random_json_value(rng: random.Random, depth: int = 0):
    choices = ["str", "int", "bool"]
    if depth < 2:
        choices += ["list", "dict"]
    kind = rng.choice(choices)
    if kind == "str":
        return random_text(rng)
    if kind == "int":
        return rng.randint(-10**6, 10**6)
    if kind == "bool":
        return rng.random() < 0.5
    if kind == "list":
        return [random_json_value(rng, depth + 1) for _ in range(rng.randint(0, 3))]
    return {random_text(rng, 6) or "k": random_json_value(rng, depth + 1)
            for _ in range(rng.randint(0, 3))}


def random_args(rng: random.Random) -> dict:
    return {f"p{i}": random_json_value(rng) for i in range(rng.randint(0, 3))}


def make_random_message(rng: random.Random) -> Message:
    kind = rng.choice(sorted(protocol.KINDS))
    task_id = f"task-{rng.randint(0, 999)}"
    inv = f"inv-{rng.randint(0, 999)}" if kind in protocol.INVOCATION_KINDS else None
    if kind == protocol.HELLO:
        body = {"version": rng.randint(0, 99)}
    elif kind == protocol.BOOTSTRAP_RESULT:
        body = {
            "os_name": random_text(rng),
            "working_directory": random_text(rng),
            "recent_git_history": [random_text(rng) for _ in range(rng.randint(0, 3))],
            "project_structure": [random_text(rng) for _ in range(rng.randint(0, 3))],
        }
    elif kind == protocol.TOOL_DISPATCH:
        body = {"tool": rng.choice(["read", "edit", "shell"]), "args": random_args(rng)}
        if rng.random() < 0.3:
            body["redispatch"] = True
        if rng.random() < 0.3:
            body["expected_hash"] = random_text(rng)
        if rng.random() < 0.3:
            body["enforce_fresh"] = rng.random() < 0.5
    elif kind == protocol.TOOL_RESULT:
        body = {"tool": rng.choice(["read", "edit", "shell"]),
                "status": rng.choice(["ok", "error"])}
        if rng.random() < 0.7:
            body["payload"] = random_args(rng)
        if body["status"] == "error":
            body["error_kind"] = random_text(rng) or "E"
            body["message"] = random_text(rng)
    elif kind == protocol.APPROVAL_REQUEST:
        body = {"tool": rng.choice(["edit", "shell"]), "args": random_args(rng),
                "matched_rules": [random_text(rng) for _ in range(rng.randint(0, 3))]}
    elif kind == protocol.APPROVAL_DECISION:
        body = {"decision": rng.choice(["approve", "deny"])}
        if rng.random() < 0.5:
            body["reason"] = random_text(rng)
    elif kind == protocol.PLAN_PROPOSED:
        body = {"steps": [random_text(rng) for _ in range(rng.randint(1, 4))]}
    elif kind == protocol.PLAN_DECISION:
        body = {"decision": rng.choice(["approved", "rejected", "modified"])}
        if rng.random() < 0.5:
            body["modified_steps"] = [random_text(rng) for _ in range(rng.randint(1, 3))]
    elif kind == protocol.TASK_UPDATE:
        body = {"status": random_text(rng) or "s"}
        if rng.random() < 0.5:
            body["detail"] = random_text(rng)
    elif kind == protocol.ERROR:
        body = {"code": random_text(rng) or "E", "message": random_text(rng)}
    else:  # Ping, Pong, BootstrapRequest
        body = {}
    return Message(kind=kind, task_id=task_id, invocation_id=inv, body=body)


def mutate_line(rng: random.Random, msg: Message):
    """Derive a provably invalid wire line (or bytes) from a valid message."""
    import json as _json

    line = protocol.encode_message(msg).rstrip("\n")
    obj = _json.loads(line)
    op = rng.choice(["truncate", "prefix", "unknown_kind", "drop_kind", "drop_task",
                     "bad_body", "extra_top", "bad_invocation", "bad_kind_type",
                     "not_object", "not_utf8"])
    if op == "truncate":
        return line[: rng.randint(0, len(line) - 1)]
    if op == "prefix":
        return "x" + line
    if op == "unknown_kind":
        obj["kind"] = "Teleport" + str(rng.randint(0, 9))
    elif op == "drop_kind":
        obj.pop("kind")
    elif op == "drop_task":
        obj.pop("task_id")
    elif op == "bad_body":
        obj["body"] = rng.choice(["nope", 7, [1, 2]])
    elif op == "extra_top":
        obj["surprise"] = 1
    elif op == "bad_invocation":
        if msg.kind in protocol.INVOCATION_KINDS:
            obj.pop("invocation_id")
        else:
            obj["invocation_id"] = "inv-x"
    elif op == "bad_kind_type":
        obj["kind"] = 42
    elif op == "not_object":
        return _json.dumps([1, 2, 3])
    elif op == "not_utf8":
        return b"\xff\xfe" + line.encode("utf-8")
    return _json.dumps(obj)


# --- acceptance reporting -----------------------------------------------------------


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(n, title): acceptance criterion, printed pass/fail")


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    n, title = marker
    outcome = "PASS" if report.passed else "FAIL"
    print(f"\n[criterion {n:>2}] {outcome} — {title}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        report._criterion = (marker.args[0], marker.args[1])
