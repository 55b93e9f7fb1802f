"""Executor-side tools: read caps, edit semantics, shell, bootstrap probe."""

import random
import string
import subprocess
import time

from agentloop.maestro import BootstrapLimits
from agentloop.tools import (
    DEFAULT_READ_CAP,
    TRUNCATION_MARKER,
    EditSpec,
    ShellSpec,
    bootstrap_probe,
    content_hash,
    tool_edit,
    tool_read,
    tool_shell,
)


def count_occurrences(haystack: bytes, needle: bytes) -> int:
    """Independent oracle: scan with find instead of bytes.count."""
    count, start = 0, 0
    while True:
        idx = haystack.find(needle, start)
        if idx < 0:
            return count
        count += 1
        start = idx + len(needle)


# --- read -------------------------------------------------------------------


def test_read_existing_file(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("hello")
    outcome = tool_read(p)
    assert outcome.status == "ok"
    assert outcome.payload["content"] == "hello"
    assert outcome.payload["hash"] == content_hash(b"hello")
    assert outcome.payload["truncated"] is False


def test_read_missing_path_echoes_path(tmp_path):
    outcome = tool_read(tmp_path / "nope.txt")
    assert outcome.status == "error"
    assert outcome.error_kind == "NotFound"
    assert "nope.txt" in outcome.message


def test_read_directory_is_not_a_file(tmp_path):
    outcome = tool_read(tmp_path)
    assert outcome.error_kind == "NotAFile"


def test_read_truncation_exact_length(tmp_path):
    cap = 1000
    p = tmp_path / "big.txt"
    p.write_text("x" * (10 * cap))
    outcome = tool_read(p, cap=cap)
    assert outcome.status == "ok"
    assert outcome.payload["truncated"] is True
    assert len(outcome.payload["content"]) == cap + len(TRUNCATION_MARKER)
    assert outcome.payload["content"].endswith(TRUNCATION_MARKER)
    # hash still covers the whole file
    assert outcome.payload["hash"] == content_hash(b"x" * (10 * cap))


def test_read_default_cap_is_one_megabyte():
    assert DEFAULT_READ_CAP == 1_000_000


# --- edit -------------------------------------------------------------------


def test_edit_direct_substitution(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("foo bar baz")
    outcome = tool_edit(EditSpec(str(p), "bar", "qux"))
    assert outcome.status == "ok"
    assert p.read_text() == "foo qux baz"
    assert outcome.payload["bytes_replaced"] == 3
    assert outcome.payload["pre_hash"] == content_hash(b"foo bar baz")
    assert outcome.payload["post_hash"] == content_hash(b"foo qux baz")


def test_edit_old_string_absent(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("foo bar baz")
    outcome = tool_edit(EditSpec(str(p), "zap", "qux"))
    assert outcome.error_kind == "OldStringNotFound"
    assert "read the file again" in outcome.message
    assert p.read_text() == "foo bar baz"


def test_edit_ambiguous_match_counts(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("x x")
    outcome = tool_edit(EditSpec(str(p), "x", "y"))
    assert outcome.error_kind == "AmbiguousMatch"
    assert outcome.payload["occurrences"] == 2
    assert "longer old_string" in outcome.message
    assert p.read_text() == "x x"


def test_edit_never_creates_files(tmp_path):
    p = tmp_path / "new.txt"
    outcome = tool_edit(EditSpec(str(p), "a", "b"))
    assert outcome.error_kind == "FileNotFound"
    assert not p.exists()


def test_edit_empty_old_string_rejected(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("abc")
    outcome = tool_edit(EditSpec(str(p), "", "b"))
    assert outcome.error_kind == "InvalidArguments"
    assert p.read_text() == "abc"


def test_edit_stale_enforcement(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("version one")
    recorded = content_hash(b"version one")
    p.write_text("version two")  # changed after the recorded read
    outcome = tool_edit(EditSpec(str(p), "version", "v"),
                        expected_hash=recorded, enforce_fresh=True)
    assert outcome.error_kind == "StaleContent"
    assert p.read_text() == "version two"
    # warn-mode call (enforce off) proceeds and reports the pre-edit hash
    outcome = tool_edit(EditSpec(str(p), "version", "v"), expected_hash=recorded)
    assert outcome.status == "ok"
    assert outcome.payload["pre_hash"] == content_hash(b"version two")


def _random_blob(rng: random.Random, size: int) -> bytes:
    alphabet = (string.ascii_letters + string.digits + " \n").encode()
    return bytes(rng.choice(alphabet) for _ in range(size))


def test_edit_locality_and_failure_idempotence_randomized(tmp_path):
    """Locality: bytes outside the replaced span never change. Errors leave
    the file byte-identical. Error kind follows the occurrence count."""
    rng = random.Random(424242)
    p = tmp_path / "blob.bin"
    for i in range(300):
        body = _random_blob(rng, rng.randint(10, 400))
        if rng.random() < 0.5:
            # plant a unique needle
            needle = b"<<" + str(i).encode() + b">>"
            pos = rng.randint(0, len(body))
            data = body[:pos] + needle + body[pos:]
        else:
            needle = _random_blob(rng, rng.randint(1, 6))
            data = body
        p.write_bytes(data)
        new = _random_blob(rng, rng.randint(0, 12))
        occurrences = count_occurrences(data, needle)
        outcome = tool_edit(EditSpec(str(p), needle.decode(), new.decode()))
        if occurrences == 0:
            assert outcome.error_kind == "OldStringNotFound"
            assert p.read_bytes() == data
        elif occurrences > 1:
            assert outcome.error_kind == "AmbiguousMatch"
            assert outcome.payload["occurrences"] == occurrences
            assert p.read_bytes() == data
        else:
            assert outcome.status == "ok"
            idx = data.find(needle)
            expected = data[:idx] + new + data[idx + len(needle):]
            assert p.read_bytes() == expected
            assert p.read_bytes()[:idx] == data[:idx]
            assert content_hash(expected) == outcome.payload["post_hash"]


def test_read_edit_read_coherence(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("alpha beta gamma")
    first = tool_read(p)
    outcome = tool_edit(EditSpec(str(p), "beta", "BETA"))
    assert outcome.payload["pre_hash"] == first.payload["hash"]
    second = tool_read(p)
    assert second.payload["hash"] == outcome.payload["post_hash"]


# --- shell ------------------------------------------------------------------


def test_shell_echo(tmp_path):
    outcome = tool_shell(ShellSpec("echo hi"), cwd=tmp_path)
    assert outcome.status == "ok"
    assert outcome.payload["exit_code"] == 0
    assert outcome.payload["stdout"] == "hi\n"


def test_shell_nonzero_exit_is_a_result(tmp_path):
    outcome = tool_shell(ShellSpec("exit 3"), cwd=tmp_path)
    assert outcome.status == "ok"
    assert outcome.payload["exit_code"] == 3


def test_shell_runs_in_working_directory(tmp_path):
    (tmp_path / "marker.txt").write_text("here")
    outcome = tool_shell(ShellSpec("ls"), cwd=tmp_path)
    assert "marker.txt" in outcome.payload["stdout"]


def test_shell_timeout_kills_process_group(tmp_path):
    start = time.monotonic()
    outcome = tool_shell(ShellSpec("echo partial; sleep 60", timeout_seconds=1),
                         cwd=tmp_path)
    elapsed = time.monotonic() - start
    assert elapsed < 10
    assert outcome.status == "error"
    assert outcome.error_kind == "TimedOut"
    assert "partial" in outcome.payload["stdout"]


def test_shell_output_caps(tmp_path):
    outcome = tool_shell(ShellSpec("yes x | head -c 100000"), cwd=tmp_path,
                         stream_cap=5000)
    assert outcome.payload["stdout_truncated"] is True
    assert len(outcome.payload["stdout"]) == 5000 + len(TRUNCATION_MARKER)


def test_shell_empty_command_rejected(tmp_path):
    outcome = tool_shell(ShellSpec("   "), cwd=tmp_path)
    assert outcome.error_kind == "InvalidArguments"


# --- bootstrap probe ----------------------------------------------------------


def test_probe_non_git_dir(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "b.txt").write_text("y")
    meta = bootstrap_probe(tmp_path)
    assert meta.recent_git_history == ()
    assert "a.txt" in meta.project_structure
    assert "sub/" in meta.project_structure
    assert "sub/b.txt" in meta.project_structure
    assert meta.working_directory == str(tmp_path.resolve())
    assert meta.os_name


def test_probe_git_history_newest_first(tmp_path):
    def git(*args):
        subprocess.run(["git", *args], cwd=tmp_path, check=True, capture_output=True,
                       env={"GIT_AUTHOR_NAME": "t", "GIT_AUTHOR_EMAIL": "t@x",
                            "GIT_COMMITTER_NAME": "t", "GIT_COMMITTER_EMAIL": "t@x",
                            "PATH": "/usr/bin:/bin:/usr/local/bin", "HOME": str(tmp_path)})

    git("init", "-q")
    (tmp_path / "f").write_text("1")
    git("add", "f")
    git("commit", "-qm", "first commit")
    (tmp_path / "f").write_text("2")
    git("commit", "-aqm", "second commit")
    meta = bootstrap_probe(tmp_path)
    assert len(meta.recent_git_history) == 2
    assert "second commit" in meta.recent_git_history[0]
    assert "first commit" in meta.recent_git_history[1]
    assert ".git/" not in meta.project_structure


def test_probe_depth_and_entry_limits(tmp_path):
    deep = tmp_path / "l1" / "l2" / "l3" / "l4"
    deep.mkdir(parents=True)
    (deep / "too_deep.txt").write_text("x")
    meta = bootstrap_probe(tmp_path, BootstrapLimits(tree_depth=3))
    assert "l1/l2/l3/" in meta.project_structure
    assert not any("too_deep" in entry for entry in meta.project_structure)

    many = tmp_path / "many"
    many.mkdir()
    for i in range(50):
        (many / f"f{i:03}.txt").write_text("x")
    meta = bootstrap_probe(tmp_path, BootstrapLimits(tree_max_entries=20))
    assert len(meta.project_structure) <= 20
