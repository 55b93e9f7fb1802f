"""The executor client and human steering surface.

`run` creates (or resumes) a task, attaches over the executor channel,
performs dispatched tools on this machine, and collects live approval and
plan decisions from the developer. `logs` prints a task's timeline.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys
from collections import OrderedDict
from pathlib import Path

import httpx

from . import protocol, tools
from .maestro import BootstrapLimits
from .protocol import Message
from .server import ChannelClosed
from .tools import EditSpec, ShellSpec, ToolOutcome

EXIT_COMPLETED = 0
EXIT_FAILED = 1
EXIT_CANCELLED = 2
EXIT_TRANSPORT = 3

_EXIT_CODES = {"Completed": EXIT_COMPLETED, "Failed": EXIT_FAILED,
               "Cancelled": EXIT_CANCELLED}

DEFAULT_SERVER = "http://127.0.0.1:8765"
_COMPLETED_CACHE_SIZE = 64


class AttachRejected(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def exit_code_for(status: str | None) -> int:
    if status is None:
        return EXIT_TRANSPORT
    return _EXIT_CODES.get(status, EXIT_TRANSPORT)


# --- rendering and prompting ---------------------------------------------------


def render_approval_request(msg: Message) -> str:
    """Byte-exact view of what would execute, plus the policy audit trail.

    Argument values are JSON-encoded so that newlines and exotic
    characters in edit strings survive the terminal unambiguously.
    """
    body = msg.body
    lines = [f"approval required: {body.get('tool', '?')} (invocation {msg.invocation_id})"]
    for name in sorted(body.get("args", {})):
        lines.append(f"  {name}: {json.dumps(body['args'][name], ensure_ascii=False)}")
    for rule in body.get("matched_rules", []):
        lines.append(f"  matched: {rule}")
    return "\n".join(lines)


def render_plan(steps: list[str]) -> str:
    lines = ["proposed plan:"]
    lines += [f"  {i}. {step}" for i, step in enumerate(steps, 1)]
    return "\n".join(lines)


def prompt_approval(msg: Message, *, interactive: bool,
                    input_fn=input, print_fn=print) -> tuple[str, str | None]:
    """Ask the developer; fail safe to deny when there is no terminal."""
    print_fn(render_approval_request(msg))
    if not interactive:
        print_fn("non-interactive session: denying")
        return "deny", "non-interactive session"
    while True:
        answer = input_fn("approve or deny [a/d]? ").strip().lower()
        if answer in ("a", "approve", "y", "yes"):
            return "approve", None
        if answer in ("d", "deny", "n", "no"):
            reason = input_fn("reason (optional): ").strip()
            return "deny", reason or None
        print_fn("please answer a or d")


def prompt_plan(msg: Message, *, interactive: bool,
                input_fn=input, print_fn=print) -> tuple[str, list[str] | None]:
    steps = list(msg.body.get("steps", []))
    print_fn(render_plan(steps))
    if not interactive:
        print_fn("non-interactive session: rejecting plan")
        return "rejected", None
    while True:
        answer = input_fn("approve, modify or reject [a/m/r]? ").strip().lower()
        if answer in ("a", "approve", "y", "yes"):
            return "approved", None
        if answer in ("r", "reject", "n", "no"):
            return "rejected", None
        if answer in ("m", "modify"):
            print_fn("enter replacement steps, one per line; blank line to finish")
            new_steps: list[str] = []
            while True:
                line = input_fn(f"  {len(new_steps) + 1}. ").strip()
                if not line:
                    break
                new_steps.append(line)
            if not new_steps:
                print_fn("no steps entered; rejecting")
                return "rejected", None
            return "modified", new_steps
        print_fn("please answer a, m or r")


# --- tool execution --------------------------------------------------------------


def _resolve(workdir: Path, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else workdir / p


def execute_tool(tool: str, args: dict, workdir: Path,
                 expected_hash: str | None = None,
                 enforce_fresh: bool = False) -> ToolOutcome:
    """Run one dispatched tool; always answers, never raises."""
    try:
        if tool == "read":
            outcome = tools.tool_read(_resolve(workdir, str(args["path"])))
            outcome.payload["path"] = str(args["path"])  # keep the caller's name
            return outcome
        if tool == "edit":
            spec = EditSpec(str(_resolve(workdir, str(args["file_name"]))),
                            str(args["old_string"]), str(args["new_string"]))
            outcome = tools.tool_edit(spec, expected_hash, enforce_fresh)
            outcome.payload["file_name"] = str(args["file_name"])
            return outcome
        if tool == "shell":
            spec = ShellSpec(str(args["command"]),
                             int(args.get("timeout_seconds", tools.DEFAULT_SHELL_TIMEOUT)))
            return tools.tool_shell(spec, cwd=workdir)
        return ToolOutcome.error(
            "UnknownTool", f"this executor does not implement {tool!r}")
    except Exception as exc:  # defensive: the orchestrator must get an answer
        return ToolOutcome.error("ExecutorFailure", f"{type(exc).__name__}: {exc}")


# --- the executor engine ----------------------------------------------------------


async def _auto_deny(msg: Message) -> tuple[str, str | None]:
    return "deny", "non-interactive session"


async def _auto_reject(msg: Message) -> tuple[str, list[str] | None]:
    return "rejected", None


class ExecutorEngine:
    """Executor-side message handler, independent of the transport.

    Keeps a completed-invocation cache so a re-dispatched invocation_id is
    answered from cache instead of re-executing (shell commands are not
    idempotent); the cache survives reconnects because the engine does.
    """

    def __init__(self, task_id: str, workdir: str | Path | None = None,
                 approval_responder=None, plan_responder=None,
                 on_update=None, limits: BootstrapLimits | None = None):
        self.task_id = task_id
        self.workdir = Path(workdir) if workdir else Path.cwd()
        self.approval_responder = approval_responder or _auto_deny
        self.plan_responder = plan_responder or _auto_reject
        self.on_update = on_update
        self.limits = limits or BootstrapLimits()
        self.terminal_status: str | None = None
        self.final_detail: str = ""
        self.last_error: Message | None = None
        self._completed: OrderedDict[str, Message] = OrderedDict()
        self._inflight: dict[str, asyncio.Task] = {}
        self._aux: set[asyncio.Task] = set()

    async def run(self, channel) -> str | None:
        """Drive one connection; returns the terminal status, or None when
        the channel closed first (reconnect and call run again)."""
        try:
            while True:
                line = await channel.recv_line()
                try:
                    msg = protocol.decode_message(line)
                except protocol.ProtocolError:
                    continue
                if await self._handle(channel, msg):
                    return self.terminal_status
        except ChannelClosed:
            return None

    async def _handle(self, channel, msg: Message) -> bool:
        if msg.kind == protocol.BOOTSTRAP_REQUEST:
            metadata = await asyncio.to_thread(tools.bootstrap_probe, self.workdir, self.limits)
            await self._send(channel, Message(protocol.BOOTSTRAP_RESULT, self.task_id,
                                              body=metadata.to_body()))
        elif msg.kind == protocol.TOOL_DISPATCH:
            self._spawn(self._answer_dispatch(channel, msg))
        elif msg.kind == protocol.APPROVAL_REQUEST:
            self._spawn(self._answer_approval(channel, msg))
        elif msg.kind == protocol.PLAN_PROPOSED:
            self._spawn(self._answer_plan(channel, msg))
        elif msg.kind == protocol.PING:
            await self._send(channel, Message(protocol.PONG, self.task_id))
        elif msg.kind == protocol.TASK_UPDATE:
            status = msg.body.get("status", "")
            detail = msg.body.get("detail") or ""
            if self.on_update:
                self.on_update(status, detail)
            if status in _EXIT_CODES:
                self.terminal_status = status
                self.final_detail = detail
                return True
        elif msg.kind == protocol.ERROR:
            self.last_error = msg
        return False

    def _spawn(self, coro) -> None:
        task = asyncio.ensure_future(coro)
        self._aux.add(task)
        task.add_done_callback(self._aux.discard)

    async def _send(self, channel, msg: Message) -> None:
        try:
            await channel.send_line(protocol.encode_message(msg))
        except ChannelClosed:
            pass  # the orchestrator re-delivers on reconnect

    async def _answer_dispatch(self, channel, msg: Message) -> None:
        inv = msg.invocation_id
        result = self._completed.get(inv)
        if result is None:
            compute = self._inflight.get(inv)
            if compute is None:
                compute = asyncio.ensure_future(self._compute(msg))
                self._inflight[inv] = compute
            result = await compute
        await self._send(channel, result)

    async def _compute(self, msg: Message) -> Message:
        inv = msg.invocation_id
        body = msg.body
        outcome = await asyncio.to_thread(
            execute_tool, body["tool"], body.get("args", {}), self.workdir,
            body.get("expected_hash"), bool(body.get("enforce_fresh")))
        result = Message(protocol.TOOL_RESULT, self.task_id, inv,
                         outcome.to_body(body["tool"]))
        self._completed[inv] = result
        while len(self._completed) > _COMPLETED_CACHE_SIZE:
            self._completed.popitem(last=False)
        self._inflight.pop(inv, None)
        return result

    async def _answer_approval(self, channel, msg: Message) -> None:
        decision, reason = await self.approval_responder(msg)
        body: dict = {"decision": decision}
        if reason:
            body["reason"] = reason
        await self._send(channel, Message(protocol.APPROVAL_DECISION, self.task_id,
                                          msg.invocation_id, body))

    async def _answer_plan(self, channel, msg: Message) -> None:
        decision, steps = await self.plan_responder(msg)
        body: dict = {"decision": decision}
        if steps:
            body["modified_steps"] = list(steps)
        await self._send(channel, Message(protocol.PLAN_DECISION, self.task_id,
                                          body=body))


# --- transport -----------------------------------------------------------------


class ClientWebSocketChannel:
    def __init__(self, ws):
        self._ws = ws

    async def send_line(self, line: str) -> None:
        try:
            await self._ws.send(line)
        except Exception as exc:
            raise ChannelClosed() from exc

    async def recv_line(self) -> str:
        try:
            data = await self._ws.recv()
        except Exception as exc:
            raise ChannelClosed() from exc
        return data if isinstance(data, str) else data.decode("utf-8")

    async def close(self) -> None:
        try:
            await self._ws.close()
        except Exception:
            pass


async def attach_ws(server_url: str, task_id: str, token: str | None):
    """Open the executor channel and run the Hello handshake.

    Returns (channel, None) on success, or (None, terminal_update_body)
    when the server reports the task already finished.
    """
    import websockets

    base = server_url.rstrip("/")
    ws_url = base.replace("http://", "ws://").replace("https://", "wss://")
    ws_url += f"/attach?task_id={task_id}"
    headers = {"Authorization": f"Bearer {token}"} if token else None
    try:
        ws = await websockets.connect(ws_url, additional_headers=headers)
    except Exception as exc:
        raise AttachRejected("ConnectionFailed", str(exc)) from exc
    channel = ClientWebSocketChannel(ws)
    await channel.send_line(protocol.encode_message(Message(
        protocol.HELLO, task_id, body={"version": protocol.PROTOCOL_VERSION})))
    try:
        reply = protocol.decode_message(await channel.recv_line())
    except (ChannelClosed, protocol.ProtocolError) as exc:
        await channel.close()
        raise AttachRejected("ConnectionFailed", "handshake failed") from exc
    if reply.kind == protocol.ERROR:
        await channel.close()
        raise AttachRejected(reply.body.get("code", "Error"),
                             reply.body.get("message", ""))
    if reply.kind == protocol.TASK_UPDATE:
        await channel.close()
        return None, reply.body
    if reply.kind != protocol.HELLO:
        await channel.close()
        raise AttachRejected("ProtocolError", f"unexpected {reply.kind} during handshake")
    return channel, None


# --- commands ---------------------------------------------------------------------


def _auth_headers(token: str | None) -> dict:
    return {"Authorization": f"Bearer {token}"} if token else {}


def cmd_run(args) -> int:
    interactive = sys.stdin.isatty()

    async def approval_responder(msg: Message):
        return await asyncio.to_thread(
            lambda: prompt_approval(msg, interactive=interactive))

    async def plan_responder(msg: Message):
        return await asyncio.to_thread(
            lambda: prompt_plan(msg, interactive=interactive))

    def on_update(status: str, detail: str) -> None:
        line = f"[{status}] {detail}" if detail else f"[{status}]"
        print(line)

    async def go() -> int:
        headers = _auth_headers(args.token)
        if args.resume:
            task_id = args.resume
        else:
            try:
                async with httpx.AsyncClient(base_url=args.server, headers=headers,
                                             timeout=30.0) as client:
                    resp = await client.post("/tasks", json={
                        "prompt": args.prompt, "mode": args.mode,
                        "planning": args.plan, "effort": args.effort,
                        **({"policy": args.policy} if args.policy else {}),
                    })
            except httpx.HTTPError as exc:
                print(f"cannot reach server: {exc}", file=sys.stderr)
                return EXIT_TRANSPORT
            if resp.status_code != 201:
                print(f"task creation failed ({resp.status_code}): {resp.text}",
                      file=sys.stderr)
                return EXIT_TRANSPORT
            task_id = resp.json()["task_id"]
            print(f"task {task_id} created")

        engine = ExecutorEngine(task_id, workdir=os.getcwd(),
                                approval_responder=approval_responder,
                                plan_responder=plan_responder,
                                on_update=on_update)
        try:
            channel, terminal = await attach_ws(args.server, task_id, args.token)
        except AttachRejected as exc:
            print(f"attach rejected: {exc}", file=sys.stderr)
            return EXIT_TRANSPORT
        if terminal is not None:
            status = terminal.get("status", "")
            print(f"task already {status}: {terminal.get('detail') or ''}")
            return exit_code_for(status)
        status = await engine.run(channel)
        await channel.close()
        if status is None:
            if engine.last_error is not None:
                print(f"server error: {engine.last_error.body}", file=sys.stderr)
            else:
                print("connection lost; resume with: "
                      f"agentloop resume {task_id}", file=sys.stderr)
            return EXIT_TRANSPORT
        if engine.final_detail:
            print(engine.final_detail)
        return exit_code_for(status)

    return asyncio.run(go())


def event_summary(event: dict) -> str:
    kind = event.get("kind", "")
    p = event.get("payload", {})
    if kind == "TaskCreated":
        return _clip(p.get("prompt", ""))
    if kind == "ModelResponse":
        return _clip(p.get("content", ""))
    if kind in ("ToolDispatched", "ApprovalRequested", "PolicyDenied"):
        return _clip(f"{p.get('tool', '')} {json.dumps(p.get('args', {}), sort_keys=True)}")
    if kind == "ToolResult":
        return _clip(f"{p.get('status', '')}: {p.get('text', '')}")
    if kind in ("PlanProposed", "PlanApproved", "PlanModified"):
        steps = p.get("steps", [])
        return _clip(f"{len(steps)} steps: " + " | ".join(steps))
    if kind == "TaskCompleted":
        return _clip(p.get("final_text", ""))
    if kind == "TaskFailed":
        return _clip(f"{p.get('reason', '')} {p.get('detail', '')}")
    if kind == "ReadBeforeEditWarning":
        return _clip(f"{p.get('path', '')} is {p.get('freshness', '')}")
    return _clip(json.dumps(p, sort_keys=True)) if p else ""


def _clip(text: str, width: int = 100) -> str:
    text = " ".join(text.split())
    return text if len(text) <= width else text[: width - 3] + "..."


def format_event_line(event: dict) -> str:
    return f"{event.get('seq', 0):>4}  {event.get('kind', ''):<24} {event_summary(event)}"


def cmd_logs(args) -> int:
    async def go() -> int:
        headers = _auth_headers(args.token)
        try:
            async with httpx.AsyncClient(base_url=args.server, headers=headers,
                                         timeout=30.0) as client:
                if not args.follow:
                    resp = await client.get(f"/tasks/{args.task_id}/events",
                                            params={"from_seq": 1})
                    if resp.status_code == 404:
                        print(f"unknown task: {args.task_id}", file=sys.stderr)
                        return EXIT_TRANSPORT
                    resp.raise_for_status()
                    for event in resp.json()["events"]:
                        print(format_event_line(event))
                    return 0
                async with client.stream(
                        "GET", f"/tasks/{args.task_id}/stream",
                        params={"from_seq": 1}, timeout=None) as resp:
                    if resp.status_code == 404:
                        print(f"unknown task: {args.task_id}", file=sys.stderr)
                        return EXIT_TRANSPORT
                    async for line in resp.aiter_lines():
                        if line.startswith("data: "):
                            print(format_event_line(json.loads(line[len("data: "):])))
                    return 0
        except httpx.HTTPError as exc:
            print(f"cannot reach server: {exc}", file=sys.stderr)
            return EXIT_TRANSPORT

    return asyncio.run(go())


def _add_connection_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--server",
                        default=os.environ.get("AGENTLOOP_SERVER", DEFAULT_SERVER))
    parser.add_argument("--token", default=os.environ.get("AGENTLOOP_TOKEN"))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="agentloop",
                                     description="Coding-agent executor client")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="create a task and execute it here")
    run_p.add_argument("prompt", nargs="?", default=None)
    run_p.add_argument("--mode", choices=("approval", "autonomous"), default="approval")
    run_p.add_argument("--plan", action="store_true",
                       help="require an approved plan before execution")
    run_p.add_argument("--effort", choices=("low", "medium", "high"), default="medium")
    run_p.add_argument("--policy", default=None,
                       help="server-side policy name hint")
    run_p.add_argument("--resume", metavar="TASK_ID", default=None)
    _add_connection_args(run_p)

    logs_p = sub.add_parser("logs", help="print a task's timeline")
    logs_p.add_argument("task_id")
    logs_p.add_argument("--follow", action="store_true")
    _add_connection_args(logs_p)

    resume_p = sub.add_parser("resume", help="reattach to an in-progress task")
    resume_p.add_argument("task_id")
    resume_p.add_argument("--mode", choices=("approval", "autonomous"), default="approval")
    resume_p.add_argument("--plan", action="store_true")
    resume_p.add_argument("--effort", choices=("low", "medium", "high"), default="medium")
    resume_p.add_argument("--policy", default=None)
    _add_connection_args(resume_p)

    args = parser.parse_args(argv)
    if args.command == "logs":
        return cmd_logs(args)
    if args.command == "resume":
        args.resume = args.task_id
        args.prompt = None
        return cmd_run(args)
    if not args.resume and not args.prompt:
        run_p.error("a prompt is required unless --resume is given")
    return cmd_run(args)


if __name__ == "__main__":
    raise SystemExit(main())
