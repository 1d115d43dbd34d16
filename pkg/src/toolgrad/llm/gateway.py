"""Chat-completion gateway: ledger accounting, transport retries, schema re-asks, tool sessions."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

from ..models import ApiSpec, CostLedger, ExecutionStep, ToolCallRequest, ToolResponse
from .schema import SchemaError, StructuredSchema

log = logging.getLogger(__name__)

MESSAGE_ROLES = ("system", "user", "assistant", "tool")


class GatewayError(RuntimeError):
    """Non-recoverable backend failure."""


class TransportError(GatewayError):
    """Network-level failure worth retrying."""


class BackendUnavailable(GatewayError):
    """Transport kept failing after every retry."""


class StructuredOutputError(GatewayError):
    def __init__(self, role: str, detail: str) -> None:
        super().__init__(f"{role}: reply did not match schema after re-ask: {detail}")
        self.role = role


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str = ""
    tool_calls: tuple[ToolCallRequest, ...] = ()
    tool_call_id: str | None = None

    def __post_init__(self) -> None:
        if self.role not in MESSAGE_ROLES:
            raise ValueError(f"unknown message role {self.role!r}")
        if self.role == "tool" and not self.tool_call_id:
            raise ValueError("tool messages need a tool_call_id")
        object.__setattr__(self, "tool_calls", tuple(self.tool_calls))

    def to_wire(self) -> dict[str, Any]:
        d: dict[str, Any] = {"role": self.role, "content": self.content}
        if self.tool_calls:
            d["tool_calls"] = [
                {
                    "id": c.call_id,
                    "type": "function",
                    "function": {"name": c.api_id, "arguments": json.dumps(dict(c.arguments), sort_keys=True)},
                }
                for c in self.tool_calls
            ]
        if self.tool_call_id:
            d["tool_call_id"] = self.tool_call_id
        return d


def system(content: str) -> ChatMessage:
    return ChatMessage("system", content)


def user(content: str) -> ChatMessage:
    return ChatMessage("user", content)


class Backend(Protocol):
    identity: str

    def complete(
        self,
        messages: Sequence[ChatMessage],
        tools: Sequence[ApiSpec] | None = None,
        json_schema: dict[str, Any] | None = None,
    ) -> ChatMessage: ...


ToolExecutor = Callable[[ToolCallRequest], ToolResponse]


@dataclass
class SessionResult:
    history: list[ExecutionStep] = field(default_factory=list)
    final_text: str = ""
    cap_exhausted: bool = False
    turns: int = 0


def render_tool_response(resp: ToolResponse) -> str:
    return json.dumps({"status": resp.status, "body": resp.body}, sort_keys=True, ensure_ascii=False)


class Gateway:
    """Wraps a backend with the accounting and recovery rules every module relies on.

    Every backend round-trip adds 1 to ``ledger.backend_calls``. Plain
    :meth:`chat` calls also add 1 to the caller's role per round-trip, so a
    call that needed two transport retries costs 3.
    """

    def __init__(
        self,
        backend: Backend,
        *,
        max_retries: int = 2,
        backoff_s: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.backend = backend
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._sleep = sleep

    @property
    def identity(self) -> str:
        return getattr(self.backend, "identity", type(self.backend).__name__)

    def _round_trip(
        self,
        messages: Sequence[ChatMessage],
        ledger: CostLedger,
        role: str | None,
        tools: Sequence[ApiSpec] | None = None,
        json_schema: dict[str, Any] | None = None,
    ) -> ChatMessage:
        attempt = 0
        while True:
            ledger.backend_calls += 1
            if role is not None:
                ledger.charge(role)
            try:
                return self.backend.complete(messages, tools=tools, json_schema=json_schema)
            except TransportError as exc:
                if attempt >= self.max_retries:
                    raise BackendUnavailable(f"backend failed after {attempt + 1} attempts: {exc}") from exc
                delay = self.backoff_s * (2**attempt)
                log.warning("transport error (%s); retrying in %.2fs", exc, delay)
                self._sleep(delay)
                attempt += 1

    def chat(
        self,
        messages: Sequence[ChatMessage],
        schema: StructuredSchema | None = None,
        *,
        role: str,
        ledger: CostLedger,
        tools: Sequence[ApiSpec] | None = None,
    ) -> Any:
        """Send one conversation; return the assistant message, or the parsed value when ``schema`` is set."""
        if not messages:
            raise ValueError("chat needs at least one message")
        if schema is None:
            return self._round_trip(messages, ledger, role, tools=tools)

        convo = _with_schema_instructions(messages, schema)
        reply = self._round_trip(convo, ledger, role, tools=tools, json_schema=schema.json_schema())
        try:
            return schema.parse(reply.content)
        except SchemaError as first:
            log.warning("%s reply failed schema %s: %s; re-asking", role, schema.name, first)
            convo = convo + [
                ChatMessage("assistant", reply.content),
                user(f"Your previous reply did not match the required schema ({first}). "
                     "Reply again with only the JSON object."),
            ]
            reply = self._round_trip(convo, ledger, role, tools=tools, json_schema=schema.json_schema())
            try:
                return schema.parse(reply.content)
            except SchemaError as second:
                raise StructuredOutputError(role, str(second)) from second

    def tool_session(
        self,
        system_prompt: str,
        task: str,
        tools: Sequence[ApiSpec],
        executor: ToolExecutor,
        *,
        max_tool_calls: int,
        role: str,
        ledger: CostLedger,
        charge: str = "session",
    ) -> SessionResult:
        """Alternate model turns and tool executions until plain text or the cap.

        ``charge="session"`` bills ``role`` once for the whole session (one
        module invocation); ``charge="turn"`` bills every round-trip.
        """
        if not tools:
            raise ValueError("tool_session needs at least one tool")
        if max_tool_calls < 1:
            raise ValueError("max_tool_calls must be >= 1")
        if charge not in ("session", "turn"):
            raise ValueError(f"unknown charge mode {charge!r}")
        known = {t.id for t in tools}
        if charge == "session":
            ledger.charge(role)
        messages = [system(system_prompt), user(task)]
        result = SessionResult()
        while True:
            reply = self._round_trip(messages, ledger, role if charge == "turn" else None, tools=tools)
            result.turns += 1
            if not reply.tool_calls:
                result.final_text = reply.content
                return result
            calls = [
                ToolCallRequest(c.api_id, dict(c.arguments), c.call_id or f"call_{result.turns}_{i}")
                for i, c in enumerate(reply.tool_calls)
            ]
            messages.append(ChatMessage("assistant", reply.content, tuple(calls)))
            for call in calls:
                if len(result.history) >= max_tool_calls:
                    break
                if call.api_id in known:
                    resp = executor(ToolCallRequest(call.api_id, call.arguments))
                    ledger.tool_calls += 1
                else:
                    resp = ToolResponse("error", f"unknown tool {call.api_id!r}")
                result.history.append(
                    ExecutionStep(ToolCallRequest(call.api_id, call.arguments), resp, len(result.history))
                )
                messages.append(ChatMessage("tool", render_tool_response(resp), tool_call_id=call.call_id))
            if len(result.history) >= max_tool_calls:
                result.cap_exhausted = True
                return result


def _with_schema_instructions(messages: Sequence[ChatMessage], schema: StructuredSchema) -> list[ChatMessage]:
    note = schema.instructions()
    msgs = list(messages)
    if msgs and msgs[0].role == "system":
        return [system(msgs[0].content + "\n\n" + note)] + msgs[1:]
    return [system(note)] + msgs
