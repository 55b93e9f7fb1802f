"""Coding-agent orchestration: server-side agentic loop, terminal executor
client, layered command guardrails, and a deterministic scripted model
driver for hermetic testing."""

__version__ = "0.1.0"
