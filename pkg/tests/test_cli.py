"""Executor client: rendering, prompting, dedup, tool routing, and real
end-to-end runs against a live server."""

import asyncio
import json
import subprocess
import sys

import pytest

from agentloop import protocol
from agentloop.cli import (
    EXIT_CANCELLED,
    EXIT_COMPLETED,
    EXIT_FAILED,
    EXIT_TRANSPORT,
    ExecutorEngine,
    event_summary,
    execute_tool,
    exit_code_for,
    format_event_line,
    prompt_approval,
    prompt_plan,
    render_approval_request,
    render_plan,
)
from agentloop.protocol import Message, decode_message, encode_message
from agentloop.server import memory_channel_pair

from conftest import GOLDEN_SCRIPT, real_server, run, write_golden_workdir


def approval_msg():
    return Message(protocol.APPROVAL_REQUEST, "t1", "inv-9", {
        "tool": "shell", "args": {"command": "rm -rf build"},
        "matched_rules": ["capability.FsDelete = deny", "mode: approval"],
    })


def test_render_approval_request_snapshot():
    expected = (
        "approval required: shell (invocation inv-9)\n"
        '  command: "rm -rf build"\n'
        "  matched: capability.FsDelete = deny\n"
        "  matched: mode: approval"
    )
    assert render_approval_request(approval_msg()) == expected


def test_render_shows_exact_edit_strings():
    msg = Message(protocol.APPROVAL_REQUEST, "t1", "inv-1", {
        "tool": "edit",
        "args": {"file_name": "a.py", "old_string": "x = 1\ny = 2", "new_string": "x = 3"},
        "matched_rules": ["mode: approval"],
    })
    rendered = render_approval_request(msg)
    assert '"x = 1\\ny = 2"' in rendered  # byte-recoverable, still one line each
    assert "a.py" in rendered


def test_prompt_approval_interactive_deny_with_reason():
    answers = iter(["d", "too risky"])
    outputs = []
    decision = prompt_approval(approval_msg(), interactive=True,
                               input_fn=lambda _: next(answers),
                               print_fn=outputs.append)
    assert decision == ("deny", "too risky")
    assert "rm -rf build" in outputs[0]


def test_prompt_approval_interactive_approve_after_garbage():
    answers = iter(["what", "a"])
    decision = prompt_approval(approval_msg(), interactive=True,
                               input_fn=lambda _: next(answers),
                               print_fn=lambda _: None)
    assert decision == ("approve", None)


def test_prompt_approval_non_interactive_fails_safe():
    decision = prompt_approval(approval_msg(), interactive=False,
                               input_fn=None, print_fn=lambda _: None)
    assert decision == ("deny", "non-interactive session")


def plan_msg():
    return Message(protocol.PLAN_PROPOSED, "t1", None,
                   {"steps": ["read the file", "edit the file", "run tests"]})


def test_prompt_plan_approve_and_reject():
    decision = prompt_plan(plan_msg(), interactive=True,
                           input_fn=lambda _: "a", print_fn=lambda _: None)
    assert decision == ("approved", None)
    decision = prompt_plan(plan_msg(), interactive=True,
                           input_fn=lambda _: "r", print_fn=lambda _: None)
    assert decision == ("rejected", None)


def test_prompt_plan_modify_deletes_a_step():
    answers = iter(["m", "read the file", "run tests", ""])
    decision = prompt_plan(plan_msg(), interactive=True,
                           input_fn=lambda _: next(answers), print_fn=lambda _: None)
    assert decision == ("modified", ["read the file", "run tests"])


def test_prompt_plan_non_interactive_rejects():
    assert prompt_plan(plan_msg(), interactive=False, input_fn=None,
                       print_fn=lambda _: None) == ("rejected", None)


def test_render_plan_numbers_steps():
    rendered = render_plan(["one", "two"])
    assert "1. one" in rendered and "2. two" in rendered


def test_exit_code_contract():
    assert exit_code_for("Completed") == EXIT_COMPLETED == 0
    assert exit_code_for("Failed") == EXIT_FAILED == 1
    assert exit_code_for("Cancelled") == EXIT_CANCELLED == 2
    assert exit_code_for(None) == EXIT_TRANSPORT == 3


# --- tool routing -------------------------------------------------------------------


def test_execute_tool_resolves_paths_against_workdir(tmp_path):
    (tmp_path / "a.txt").write_text("hello")
    outcome = execute_tool("read", {"path": "a.txt"}, tmp_path)
    assert outcome.status == "ok"
    assert outcome.payload["path"] == "a.txt"  # caller's name, not the resolved one
    outcome = execute_tool("edit", {"file_name": "a.txt", "old_string": "hello",
                                    "new_string": "bye"}, tmp_path)
    assert outcome.status == "ok"
    assert (tmp_path / "a.txt").read_text() == "bye"


def test_execute_tool_unknown_and_defensive(tmp_path):
    assert execute_tool("teleport", {}, tmp_path).error_kind == "UnknownTool"
    # missing argument key must come back as an error, not an exception
    outcome = execute_tool("read", {}, tmp_path)
    assert outcome.status == "error"
    assert outcome.error_kind == "ExecutorFailure"


# --- engine dedup --------------------------------------------------------------------


def test_engine_answers_redispatch_from_cache(tmp_path):
    (tmp_path / "log.txt").write_text("")

    async def scenario():
        engine = ExecutorEngine("t1", workdir=tmp_path)
        server_end, client_end = memory_channel_pair()
        runner = asyncio.ensure_future(engine.run(client_end))
        dispatch = Message(protocol.TOOL_DISPATCH, "t1", "inv-1", {
            "tool": "shell", "args": {"command": "echo once >> log.txt"}})
        await server_end.send_line(encode_message(dispatch))
        first = decode_message(await server_end.recv_line())
        await server_end.send_line(encode_message(dispatch))
        second = decode_message(await server_end.recv_line())
        await server_end.close()
        assert await runner is None
        assert first == second
        assert first.invocation_id == "inv-1"

    run(scenario())
    assert (tmp_path / "log.txt").read_text() == "once\n"  # executed exactly once


def test_engine_answers_ping_and_bootstrap(tmp_path):
    async def scenario():
        engine = ExecutorEngine("t1", workdir=tmp_path)
        server_end, client_end = memory_channel_pair()
        runner = asyncio.ensure_future(engine.run(client_end))
        await server_end.send_line(encode_message(Message(protocol.PING, "t1")))
        pong = decode_message(await server_end.recv_line())
        assert pong.kind == protocol.PONG
        await server_end.send_line(encode_message(
            Message(protocol.BOOTSTRAP_REQUEST, "t1")))
        result = decode_message(await server_end.recv_line())
        assert result.kind == protocol.BOOTSTRAP_RESULT
        assert result.body["working_directory"] == str(tmp_path.resolve())
        await server_end.close()
        await runner

    run(scenario())


# --- logs formatting ------------------------------------------------------------------


def test_event_line_formatting():
    event = {"seq": 3, "kind": "ToolDispatched",
             "payload": {"tool": "read", "args": {"path": "a.txt"},
                         "invocation_id": "i", "redispatch": False}}
    line = format_event_line(event)
    assert line.startswith("   3  ToolDispatched")
    assert "read" in line and "a.txt" in line


def test_event_summary_clips_long_content():
    event = {"seq": 1, "kind": "ModelResponse", "payload": {"content": "x" * 500}}
    assert len(event_summary(event)) <= 100


# --- real end-to-end runs ---------------------------------------------------------------


def cli(*args, cwd, stdin_text="", env_extra=None):
    import os

    env = dict(os.environ)
    env.update(env_extra or {})
    return subprocess.run(
        [sys.executable, "-m", "agentloop.cli", *args],
        cwd=cwd, input=stdin_text, text=True, capture_output=True,
        timeout=60, env=env)


def test_cli_autonomous_golden_run_and_logs(tmp_path):
    write_golden_workdir(tmp_path)
    with real_server(GOLDEN_SCRIPT) as server:
        proc = cli("run", "fix the greeting", "--mode", "autonomous",
                   "--server", server.base_url, cwd=tmp_path)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "a.txt").read_text() == "hello agent\n"
        assert "done" in proc.stdout

        task_id = next(iter(server.core.tasks))
        logs = cli("logs", task_id, "--server", server.base_url, cwd=tmp_path)
        assert logs.returncode == 0
        lines = [line for line in logs.stdout.splitlines() if line.strip()]
        kinds = [line.split()[1] for line in lines]
        assert kinds == [e.kind for e in server.core.bus.read_timeline(task_id)]

        follow = cli("logs", task_id, "--follow", "--server", server.base_url,
                     cwd=tmp_path)
        assert follow.returncode == 0
        assert follow.stdout.splitlines()[-1].split()[1] == "TaskCompleted"


def test_cli_approval_mode_auto_denies_when_piped(tmp_path):
    write_golden_workdir(tmp_path)
    script = (
        'call read {"path": "a.txt"}\n'
        'call edit {"file_name": "a.txt", "old_string": "world", "new_string": "agent"}\n'
        "match=denied ; final stopped after denial\n"
    )
    with real_server(script) as server:
        proc = cli("run", "edit the file", "--mode", "approval",
                   "--server", server.base_url, cwd=tmp_path)
        assert proc.returncode == 0, proc.stderr
        # fail-safe: the edit never ran
        assert (tmp_path / "a.txt").read_text() == "hello world\n"
        task_id = next(iter(server.core.tasks))
        events = server.core.bus.read_timeline(task_id)
        denied = [e for e in events if e.kind == "ApprovalDenied"]
        assert len(denied) == 1
        assert denied[0].payload["reason"] == "non-interactive session"
        assert "ToolDispatched" not in [e.kind for e in events[5:]]


def test_cli_resume_unknown_task_exits_3(tmp_path):
    with real_server("final done\n") as server:
        proc = cli("resume", "not-a-task", "--server", server.base_url, cwd=tmp_path)
        assert proc.returncode == 3
        assert "TaskNotFound" in proc.stderr


def test_cli_unreachable_server_exits_3(tmp_path):
    proc = cli("run", "x", "--server", "http://127.0.0.1:9", cwd=tmp_path)
    assert proc.returncode == 3
    assert "cannot reach server" in proc.stderr


def test_cli_logs_unknown_task_exits_3(tmp_path):
    with real_server("final done\n") as server:
        proc = cli("logs", "ghost", "--server", server.base_url, cwd=tmp_path)
        assert proc.returncode == 3


def test_cli_token_env_override(tmp_path):
    with real_server("final done\n", token="sekrit") as server:
        proc = cli("run", "x", "--server", server.base_url, cwd=tmp_path)
        assert proc.returncode == 3  # unauthorized
        proc = cli("run", "x", "--server", server.base_url, cwd=tmp_path,
                   env_extra={"AGENTLOOP_TOKEN": "sekrit"})
        assert proc.returncode == 0, proc.stderr
