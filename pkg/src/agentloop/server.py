"""The backend service.

Task lifecycle over REST, a bidirectional executor channel speaking the
wire protocol (WebSocket, or an in-process channel pair for embedding and
tests), a read-only server-push event stream per task, heartbeat and
inactivity sweeping, and reconnection with idempotent re-dispatch.
"""

import argparse
import asyncio
import json
import logging
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path

from . import maestro, protocol, safety, state
from .maestro import Maestro, MaestroConfig, TaskRecord, TERMINAL_STATUSES
from .model import ScriptedDriver, load_script
from .protocol import Message

log = logging.getLogger("agentloop.server")

DEFAULT_PORT = 8765


class ChannelClosed(Exception):
    pass


class TaskNotFound(Exception):
    pass


class ExecutorAlreadyAttached(Exception):
    pass


class TaskAlreadyTerminal(Exception):
    def __init__(self, status: str, detail: str):
        super().__init__(f"task is terminal: {status}")
        self.status = status
        self.detail = detail


class ActionIllegalInState(Exception):
    pass


# --- channels -----------------------------------------------------------------

_CLOSED = object()


class MemoryChannel:
    """One endpoint of an in-process duplex line channel.

    Closing either endpoint kills both directions; queued lines are still
    delivered before the peer sees the closure (matching a TCP FIN).
    """

    def __init__(self):
        self._in: asyncio.Queue = asyncio.Queue()
        self._peer: "MemoryChannel | None" = None
        self._closed = False

    async def send_line(self, line: str) -> None:
        if self._closed:
            raise ChannelClosed()
        self._peer._in.put_nowait(line)

    async def recv_line(self) -> str:
        if self._closed and self._in.empty():
            raise ChannelClosed()
        item = await self._in.get()
        if item is _CLOSED:
            raise ChannelClosed()
        return item

    async def close(self) -> None:
        for end in (self, self._peer):
            if end is not None and not end._closed:
                end._closed = True
                end._in.put_nowait(_CLOSED)


def memory_channel_pair() -> tuple[MemoryChannel, MemoryChannel]:
    a, b = MemoryChannel(), MemoryChannel()
    a._peer, b._peer = b, a
    return a, b


class WebSocketChannel:
    """Adapter from a server-side WebSocket to the line-channel interface;
    one WS text frame carries one wire line."""

    def __init__(self, websocket):
        self._ws = websocket

    async def send_line(self, line: str) -> None:
        try:
            await self._ws.send_text(line)
        except Exception as exc:
            raise ChannelClosed() from exc

    async def recv_line(self) -> str:
        try:
            return await self._ws.receive_text()
        except Exception as exc:
            raise ChannelClosed() from exc

    async def close(self) -> None:
        try:
            await self._ws.close()
        except Exception:
            pass


# --- executor link -------------------------------------------------------------


class TaskLink:
    """The loop-facing side of the executor connection.

    A new channel is handed over inside the Attached inbox item and becomes
    live only when the loop installs it — otherwise a message decided
    against a dead channel could slip onto its successor before the loop
    has processed the disconnect, and the resume re-dispatch would then
    duplicate it. Sends return False when no live channel exists.
    """

    def __init__(self):
        self.channel = None
        self._inbox: asyncio.Queue = asyncio.Queue()

    def install(self, channel) -> None:
        self.channel = channel

    async def send(self, msg: Message) -> bool:
        channel = self.channel
        if channel is None:
            return False
        try:
            await channel.send_line(protocol.encode_message(msg))
            return True
        except ChannelClosed:
            return False

    async def recv(self):
        return await self._inbox.get()

    def post(self, item) -> None:
        self._inbox.put_nowait(item)


@dataclass
class ExecutorSession:
    session_id: str
    task_id: str
    last_activity: float
    channel: object
    pump_task: asyncio.Task | None = None


@dataclass
class TaskHost:
    record: TaskRecord
    link: TaskLink
    driver: object
    loop_task: asyncio.Task | None = None
    session: ExecutorSession | None = None


class EventBus:
    """The single append path for timeline events, with observer fanout."""

    def __init__(self, store):
        self._store = store
        self._subs: dict[str, list[asyncio.Queue]] = {}

    def append_event(self, task_id: str, kind: str, payload: dict) -> state.TimelineEvent:
        event = self._store.append_event(task_id, kind, payload)
        for queue in self._subs.get(task_id, []):
            queue.put_nowait(event)
        return event

    def read_timeline(self, task_id: str, from_seq: int = 1) -> list[state.TimelineEvent]:
        return self._store.read_timeline(task_id, from_seq)

    def subscribe(self, task_id: str) -> asyncio.Queue:
        queue: asyncio.Queue = asyncio.Queue()
        self._subs.setdefault(task_id, []).append(queue)
        return queue

    def unsubscribe(self, task_id: str, queue: asyncio.Queue) -> None:
        queues = self._subs.get(task_id, [])
        if queue in queues:
            queues.remove(queue)


@dataclass
class ServerConfig:
    data_dir: str | None = None
    token: str | None = None
    heartbeat_interval: float = 30.0
    inactivity_timeout: float = 1200.0  # 20 minutes
    session_ttl: float = state.DEFAULT_SESSION_TTL
    max_iterations: int = 50
    read_before_edit_mode: str = "warn"
    protocol_version: int = protocol.PROTOCOL_VERSION


class ServerCore:
    """Transport-agnostic server: task registry, executor sessions,
    observer streams. The HTTP/WS layer is a thin adapter over this."""

    def __init__(self, config: ServerConfig | None = None,
                 policies: dict[str, safety.PolicyConfig] | None = None,
                 driver_factory=None, clock=time.time):
        self.config = config or ServerConfig()
        self._clock = clock
        if self.config.data_dir:
            base = Path(self.config.data_dir)
            store = state.FileTimelineStore(base / "timelines", clock=clock)
            sessions = state.SessionStore.file_backed(
                base / "sessions", self.config.session_ttl, clock=clock)
        else:
            store = state.InMemoryTimelineStore(clock=clock)
            sessions = state.SessionStore.in_memory(self.config.session_ttl, clock=clock)
        self.bus = EventBus(store)
        self.session_store = sessions
        self.maestro = Maestro(
            self.bus, sessions, policies,
            MaestroConfig(max_iterations=self.config.max_iterations,
                          read_before_edit_mode=self.config.read_before_edit_mode))
        self.driver_factory = driver_factory
        self.tasks: dict[str, TaskHost] = {}
        self.sessions: dict[str, ExecutorSession] = {}
        self._background: list[asyncio.Task] = []

    # -- task lifecycle --

    def create_task(self, prompt: str, mode: str = "approval", planning: bool = False,
                    effort: str = "medium", policy: str = "default") -> TaskRecord:
        if self.driver_factory is None:
            raise RuntimeError("ServerCore needs a driver_factory to run tasks")
        record = self.maestro.create_task(prompt, mode, planning, effort, policy)
        host = TaskHost(record=record, link=TaskLink(),
                        driver=self.driver_factory(record))
        host.loop_task = asyncio.ensure_future(self._run(host))
        self.tasks[record.task_id] = host
        return record

    async def _run(self, host: TaskHost) -> str:
        try:
            return await self.maestro.run_loop(host.record, host.driver, host.link)
        except Exception:
            log.exception("task loop crashed: %s", host.record.task_id)
            if host.record.status not in TERMINAL_STATUSES:
                self.maestro.fail_task(host.record, "InternalError",
                                       "task loop crashed; see server log")
        finally:
            session = host.session
            if session is not None:
                await session.channel.close()
        return host.record.status

    def get_host(self, task_id: str) -> TaskHost:
        host = self.tasks.get(task_id)
        if host is None:
            raise TaskNotFound(task_id)
        return host

    def knows_task(self, task_id: str) -> bool:
        return task_id in self.tasks or bool(self.bus.read_timeline(task_id, 1))

    # -- executor sessions --

    def attach_executor(self, task_id: str, channel) -> ExecutorSession:
        host = self.get_host(task_id)
        if host.record.status in TERMINAL_STATUSES:
            raise TaskAlreadyTerminal(
                host.record.status,
                host.record.final_text or host.record.failure_reason or "")
        if host.session is not None:
            raise ExecutorAlreadyAttached(task_id)
        session = ExecutorSession(uuid.uuid4().hex[:12], task_id,
                                  self._clock(), channel)
        host.session = session
        self.sessions[session.session_id] = session
        session.pump_task = asyncio.ensure_future(self._pump(host, session))
        host.link.post(maestro.Attached(session.session_id, channel))
        return session

    async def _pump(self, host: TaskHost, session: ExecutorSession) -> None:
        channel = session.channel
        try:
            while True:
                line = await channel.recv_line()
                session.last_activity = self._clock()
                try:
                    msg = protocol.decode_message(line)
                except protocol.ProtocolError as exc:
                    try:
                        await channel.send_line(protocol.encode_message(Message(
                            protocol.ERROR, session.task_id,
                            body={"code": type(exc).__name__, "message": str(exc)})))
                    except ChannelClosed:
                        break
                    continue
                host.link.post(msg)
        except ChannelClosed:
            pass
        finally:
            self.sessions.pop(session.session_id, None)
            if host.link.channel is session.channel:
                host.link.channel = None  # fast-fail sends on the dead channel
            if host.session is session:
                host.session = None
                host.link.post(maestro.Detached(session.session_id))

    async def inactivity_sweep(self, now: float | None = None) -> list[ExecutorSession]:
        """Close sessions idle past the timeout; their tasks park, they are
        never failed."""
        now = self._clock() if now is None else now
        dropped = []
        for session in list(self.sessions.values()):
            if now - session.last_activity > self.config.inactivity_timeout:
                dropped.append(session)
                await session.channel.close()
        return dropped

    # -- user actions --

    def post_action(self, task_id: str, action: str, body: dict) -> dict:
        host = self.get_host(task_id)
        record = host.record
        if action == "cancel":
            if record.status in TERMINAL_STATUSES:
                raise ActionIllegalInState(f"cannot cancel a {record.status} task")
            host.link.post(maestro.CancelRequested(str(body.get("reason", ""))))
        elif action in ("approve", "deny"):
            if record.status != maestro.AWAITING_APPROVAL or record.pending_invocation is None:
                raise ActionIllegalInState(
                    f"{action} needs status AwaitingApproval, task is {record.status}")
            msg_body: dict = {"decision": "approve" if action == "approve" else "deny"}
            if body.get("reason"):
                msg_body["reason"] = str(body["reason"])
            host.link.post(maestro.PostedAction(Message(
                protocol.APPROVAL_DECISION, task_id,
                record.pending_invocation[0], msg_body)))
        elif action in ("plan_approve", "plan_modify", "plan_reject"):
            if record.status != maestro.AWAITING_PLAN_DECISION:
                raise ActionIllegalInState(
                    f"{action} needs status AwaitingPlanDecision, task is {record.status}")
            decision = {"plan_approve": "approved", "plan_modify": "modified",
                        "plan_reject": "rejected"}[action]
            msg_body = {"decision": decision}
            if action == "plan_modify":
                steps = body.get("steps")
                if (not isinstance(steps, list) or not steps
                        or not all(isinstance(s, str) and s for s in steps)):
                    raise maestro.ModifiedWithoutSteps(
                        "plan_modify requires steps: a non-empty list of strings")
                msg_body["modified_steps"] = steps
            host.link.post(maestro.PostedAction(Message(
                protocol.PLAN_DECISION, task_id, None, msg_body)))
        else:
            raise ValueError(
                f"unknown action {action!r}; legal: approve, deny, plan_approve, "
                f"plan_modify, plan_reject, cancel")
        return {"task_id": task_id, "status": record.status}

    # -- observers --

    async def observer_stream(self, task_id: str, from_seq: int = 1):
        """Backlog then live tail, strictly in seq order; ends after the
        terminal event. Read-only by construction."""
        if not self.knows_task(task_id):
            raise TaskNotFound(task_id)
        queue = self.bus.subscribe(task_id)
        try:
            last = from_seq - 1
            for event in self.bus.read_timeline(task_id, from_seq):
                yield event
                last = event.seq
                if event.kind in state.TERMINAL_EVENT_KINDS:
                    return
            while True:
                event = await queue.get()
                if event.seq <= last:
                    continue
                yield event
                last = event.seq
                if event.kind in state.TERMINAL_EVENT_KINDS:
                    return
        finally:
            self.bus.unsubscribe(task_id, queue)

    # -- background upkeep --

    def start_background(self) -> None:
        self._background.append(asyncio.ensure_future(self._heartbeat_forever()))
        self._background.append(asyncio.ensure_future(self._sweep_forever()))

    async def stop_background(self) -> None:
        for task in self._background:
            task.cancel()
        for task in self._background:
            try:
                await task
            except (asyncio.CancelledError, Exception):
                pass
        self._background.clear()

    async def _heartbeat_forever(self) -> None:
        while True:
            await asyncio.sleep(self.config.heartbeat_interval)
            for host in list(self.tasks.values()):
                if host.session is not None:
                    await host.link.send(Message(protocol.PING, host.record.task_id))

    async def _sweep_forever(self) -> None:
        interval = min(max(self.config.inactivity_timeout / 4, 0.2), 5.0)
        while True:
            await asyncio.sleep(interval)
            await self.inactivity_sweep()


def task_view(record: TaskRecord) -> dict:
    return {
        "task_id": record.task_id,
        "status": record.status,
        "mode": record.mode,
        "planning": record.planning,
        "effort": record.effort,
        "policy": record.policy,
        "iteration_count": record.iteration_count,
        "final_text": record.final_text,
        "failure_reason": record.failure_reason,
    }


# --- HTTP / WS adapter ----------------------------------------------------------


def create_app(core: ServerCore):
    from fastapi import FastAPI, Query, Request, WebSocket
    from fastapi.responses import JSONResponse, StreamingResponse

    @asynccontextmanager
    async def lifespan(app):
        core.start_background()
        yield
        await core.stop_background()

    app = FastAPI(title="agentloop", lifespan=lifespan)

    def auth_error(request) -> JSONResponse | None:
        if core.config.token is None:
            return None
        header = request.headers.get("authorization", "")
        if header != f"Bearer {core.config.token}":
            return JSONResponse({"detail": "missing or invalid bearer token"},
                                status_code=401)
        return None

    @app.post("/tasks")
    async def create_task(request: Request):
        denied = auth_error(request)
        if denied:
            return denied
        try:
            body = await request.json()
            if not isinstance(body, dict):
                raise ValueError("body must be a JSON object")
        except Exception:
            return JSONResponse({"detail": "body must be a JSON object"}, status_code=400)
        try:
            record = core.create_task(
                prompt=str(body.get("prompt", "")),
                mode=body.get("mode", "approval"),
                planning=bool(body.get("planning", False)),
                effort=body.get("effort", "medium"),
                policy=body.get("policy", "default"),
            )
        except ValueError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=400)
        return JSONResponse({"task_id": record.task_id}, status_code=201)

    @app.get("/tasks/{task_id}")
    async def get_task(task_id: str, request: Request):
        denied = auth_error(request)
        if denied:
            return denied
        try:
            host = core.get_host(task_id)
        except TaskNotFound:
            return JSONResponse({"detail": "unknown task"}, status_code=404)
        return task_view(host.record)

    @app.get("/tasks/{task_id}/events")
    async def get_events(task_id: str, request: Request, from_seq: int = 1):
        denied = auth_error(request)
        if denied:
            return denied
        if not core.knows_task(task_id):
            return JSONResponse({"detail": "unknown task"}, status_code=404)
        events = core.bus.read_timeline(task_id, from_seq)
        return {"task_id": task_id, "events": [e.to_dict() for e in events]}

    @app.post("/tasks/{task_id}/actions")
    async def post_action(task_id: str, request: Request):
        denied = auth_error(request)
        if denied:
            return denied
        try:
            body = await request.json()
            if not isinstance(body, dict):
                raise ValueError
        except Exception:
            return JSONResponse({"detail": "body must be a JSON object"}, status_code=400)
        action = body.get("action", "")
        try:
            ack = core.post_action(task_id, action, body)
        except TaskNotFound:
            return JSONResponse({"detail": "unknown task"}, status_code=404)
        except ActionIllegalInState as exc:
            return JSONResponse({"detail": str(exc)}, status_code=409)
        except (ValueError, maestro.ModifiedWithoutSteps) as exc:
            return JSONResponse({"detail": str(exc)}, status_code=400)
        return ack

    @app.get("/tasks/{task_id}/stream")
    async def stream_events(task_id: str, request: Request, from_seq: int = 1):
        denied = auth_error(request)
        if denied:
            return denied
        if not core.knows_task(task_id):
            return JSONResponse({"detail": "unknown task"}, status_code=404)

        async def sse():
            async for event in core.observer_stream(task_id, from_seq):
                yield f"data: {json.dumps(event.to_dict())}\n\n"

        return StreamingResponse(sse(), media_type="text/event-stream")

    @app.websocket("/attach")
    async def attach(websocket: WebSocket, task_id: str = Query(...)):
        await websocket.accept()
        channel = WebSocketChannel(websocket)

        async def reject(code: str, message: str) -> None:
            try:
                await channel.send_line(protocol.encode_message(Message(
                    protocol.ERROR, task_id, body={"code": code, "message": message})))
            except ChannelClosed:
                pass
            await channel.close()

        if core.config.token is not None:
            header = websocket.headers.get("authorization", "")
            if header != f"Bearer {core.config.token}":
                await reject("Unauthorized", "missing or invalid bearer token")
                return
        try:
            first = await asyncio.wait_for(channel.recv_line(), timeout=10)
            hello = protocol.decode_message(first)
        except (ChannelClosed, asyncio.TimeoutError, protocol.ProtocolError):
            await channel.close()
            return
        if hello.kind != protocol.HELLO:
            await reject("ProtocolError", "first message must be Hello")
            return
        if hello.body.get("version") != core.config.protocol_version:
            await reject("VersionMismatch",
                         f"server speaks version {core.config.protocol_version}")
            return
        try:
            session = core.attach_executor(task_id, channel)
        except TaskNotFound:
            await reject("TaskNotFound", f"unknown task {task_id}")
            return
        except ExecutorAlreadyAttached:
            await reject("ExecutorAlreadyAttached",
                         "another executor is already attached to this task")
            return
        except TaskAlreadyTerminal as exc:
            try:
                await channel.send_line(protocol.encode_message(Message(
                    protocol.TASK_UPDATE, task_id,
                    body={"status": exc.status, "detail": exc.detail})))
            except ChannelClosed:
                pass
            await channel.close()
            return
        try:
            await channel.send_line(protocol.encode_message(Message(
                protocol.HELLO, task_id,
                body={"version": core.config.protocol_version})))
        except ChannelClosed:
            return
        await session.pump_task

    return app


# --- entrypoint -----------------------------------------------------------------


def build_core(args) -> ServerCore:
    policies = {"default": safety.PolicyConfig()}
    if args.policy_file:
        policies["default"] = safety.load_policy(args.policy_file)
    config = ServerConfig(
        data_dir=args.data_dir,
        token=args.token,
        heartbeat_interval=args.heartbeat_interval,
        inactivity_timeout=args.inactivity_timeout,
        session_ttl=args.session_ttl,
        max_iterations=args.max_iterations,
        read_before_edit_mode=args.read_before_edit,
    )
    script_path = args.script

    def driver_factory(record: TaskRecord) -> ScriptedDriver:
        return ScriptedDriver(load_script(script_path))

    return ServerCore(config, policies, driver_factory)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="agentloop-server",
        description="Coding-agent orchestration server (scripted model driver)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=DEFAULT_PORT)
    parser.add_argument("--script", required=True,
                        help="scripted-driver file; each task plays it back")
    parser.add_argument("--policy-file", default=None)
    parser.add_argument("--data-dir", default=None,
                        help="durable storage directory (default: in-memory)")
    parser.add_argument("--token", default=None, help="static bearer token")
    parser.add_argument("--max-iterations", type=int, default=50)
    parser.add_argument("--read-before-edit", choices=("warn", "enforce"), default="warn")
    parser.add_argument("--inactivity-timeout", type=float, default=1200.0)
    parser.add_argument("--heartbeat-interval", type=float, default=30.0)
    parser.add_argument("--session-ttl", type=float, default=state.DEFAULT_SESSION_TTL)
    args = parser.parse_args(argv)

    import uvicorn

    core = build_core(args)
    app = create_app(core)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
