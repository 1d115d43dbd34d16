"""Chat backends: an OpenAI-compatible HTTP client and a closed-world scripted double."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx

from ..models import ApiSpec, ToolCallRequest
from .gateway import ChatMessage, GatewayError, TransportError

MATCH_KINDS = ("exact", "prefix", "contains", "regex", "digest")
MATCH_TARGETS = ("last", "first", "system", "any")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "scripted"
    model: str = "gpt-4.1-mini"
    base_url: str | None = None
    api_key_env: str = "LLM_API_KEY"
    temperature: float = 0.0
    max_output_tokens: int = 2048
    request_timeout_ms: int = 60_000
    script: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("http", "scripted"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.base_url:
            raise ValueError("http backend needs base_url")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> BackendConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def public_dict(self) -> dict[str, Any]:
        # env var name only; the key itself never leaves the process
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def tool_wire(spec: ApiSpec) -> dict[str, Any]:
    return {
        "type": "function",
        "function": {"name": spec.id, "description": spec.description, "parameters": spec.json_schema()},
    }


class HttpBackend:
    """POSTs to ``{base_url}/chat/completions`` with bearer auth from the configured env var."""

    def __init__(self, config: BackendConfig, client: httpx.Client | None = None) -> None:
        self.config = config
        self.identity = f"http:{config.model}@{config.base_url}"
        self._client = client or httpx.Client(timeout=config.request_timeout_ms / 1000)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(
        self,
        messages: Sequence[ChatMessage],
        tools: Sequence[ApiSpec] | None = None,
        json_schema: dict[str, Any] | None = None,
    ) -> ChatMessage:
        body: dict[str, Any] = {
            "model": self.config.model,
            "messages": [m.to_wire() for m in messages],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        }
        if tools:
            body["tools"] = [tool_wire(t) for t in tools]
        if json_schema is not None and not tools:
            body["response_format"] = {"type": "json_object"}
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._client.post(url, json=body, headers=self._headers())
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:300]}")
        return parse_completion(resp.json())


def parse_completion(payload: Mapping[str, Any]) -> ChatMessage:
    try:
        msg = payload["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise GatewayError(f"malformed completion payload: {exc}") from exc
    calls = []
    for c in msg.get("tool_calls") or ():
        fn = c.get("function") or {}
        raw = fn.get("arguments") or "{}"
        try:
            args = json.loads(raw) if isinstance(raw, str) else dict(raw)
        except json.JSONDecodeError:
            args = {"_raw": raw}
        if not isinstance(args, dict):
            args = {"_raw": args}
        calls.append(ToolCallRequest(str(fn.get("name", "")), args, str(c.get("id", ""))))
    return ChatMessage("assistant", msg.get("content") or "", tuple(calls))


# ---------------------------------------------------------------------------
# scripted backend


class ScriptError(ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ScriptMiss(GatewayError):
    def __init__(self, digest: str, preview: str) -> None:
        super().__init__(f"no script rule matches prompt digest={digest} ({preview!r})")
        self.digest = digest


Policy = Callable[[Sequence[ChatMessage], Sequence[ApiSpec], Mapping[str, Any]], ChatMessage]


def prompt_digest(messages: Sequence[ChatMessage]) -> str:
    canon = json.dumps([m.to_wire() for m in messages], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _target_text(messages: Sequence[ChatMessage], target: str) -> list[str]:
    if target == "any":
        return [m.content for m in messages]
    if target == "system":
        return [m.content for m in messages if m.role == "system"][:1]
    if target == "first":
        return [m.content for m in messages if m.role == "user"][:1]
    for m in reversed(messages):
        if m.role in ("user", "tool"):
            return [m.content]
    return []


@dataclass(frozen=True)
class Rule:
    match: str
    pattern: str
    target: str = "last"
    reply: str | None = None
    tool_calls: tuple[ToolCallRequest, ...] = ()
    policy: str | None = None
    options: Mapping[str, Any] = field(default_factory=dict)
    line: int = 0

    def matches(self, messages: Sequence[ChatMessage], digest: str) -> bool:
        if self.match == "digest":
            return digest == self.pattern
        for text in _target_text(messages, self.target):
            if self.match == "exact" and text == self.pattern:
                return True
            if self.match == "prefix" and text.startswith(self.pattern):
                return True
            if self.match == "contains" and self.pattern in text:
                return True
            if self.match == "regex" and re.search(self.pattern, text, re.S):
                return True
        return False


class ScriptedBackend:
    """Answers by the first rule (in file order) that matches the conversation.

    Holds no mutable state: the reply is a pure function of the rules and
    the messages, so concurrent callers see identical bytes.
    """

    def __init__(self, rules: Sequence[Rule], policies: Mapping[str, Policy] | None = None, name: str = "inline") -> None:
        if policies is None:
            from .policies import POLICIES

            policies = POLICIES
        for r in rules:
            if r.policy is not None and r.policy not in policies:
                raise ScriptError(f"unknown policy {r.policy!r}", r.line)
        self.rules = tuple(rules)
        self.policies = dict(policies)
        digest = hashlib.sha256(json.dumps([_rule_key(r) for r in self.rules], sort_keys=True).encode()).hexdigest()
        self.identity = f"scripted:{name}:{digest[:12]}"

    @classmethod
    def from_rules(cls, raw: Sequence[Mapping[str, Any]], **kw: Any) -> ScriptedBackend:
        return cls([_parse_rule(r, i + 1) for i, r in enumerate(raw)], **kw)

    def complete(
        self,
        messages: Sequence[ChatMessage],
        tools: Sequence[ApiSpec] | None = None,
        json_schema: dict[str, Any] | None = None,
    ) -> ChatMessage:
        digest = prompt_digest(messages)
        for rule in self.rules:
            if not rule.matches(messages, digest):
                continue
            if rule.policy is not None:
                return self.policies[rule.policy](messages, tools or (), rule.options)
            calls = tuple(
                ToolCallRequest(c.api_id, dict(c.arguments), f"call_{digest[:8]}_{i}") for i, c in enumerate(rule.tool_calls)
            )
            return ChatMessage("assistant", rule.reply or "", calls)
        last = _target_text(messages, "last")
        raise ScriptMiss(digest, (last[0] if last else "")[:80])


def _rule_key(r: Rule) -> list[Any]:
    return [r.match, r.pattern, r.target, r.reply, [c.to_dict() for c in r.tool_calls], r.policy, dict(r.options)]


def _parse_rule(raw: Any, line: int) -> Rule:
    if not isinstance(raw, Mapping):
        raise ScriptError("rule must be an object", line)
    match = raw.get("match")
    if match not in MATCH_KINDS:
        raise ScriptError(f"'match' must be one of {MATCH_KINDS}", line)
    pattern = raw.get("pattern", raw.get("value"))
    if not isinstance(pattern, str):
        raise ScriptError("'pattern' must be a string", line)
    if match == "regex":
        try:
            re.compile(pattern)
        except re.error as exc:
            raise ScriptError(f"bad regex: {exc}", line) from exc
    target = raw.get("target", "last")
    if target not in MATCH_TARGETS:
        raise ScriptError(f"'target' must be one of {MATCH_TARGETS}", line)
    actions = [k for k in ("reply", "tool_call", "tool_calls", "policy") if k in raw]
    if len(actions) != 1:
        raise ScriptError("rule needs exactly one of reply, tool_call, tool_calls, policy", line)
    reply = raw.get("reply")
    if reply is not None and not isinstance(reply, str):
        reply = json.dumps(reply, sort_keys=True, ensure_ascii=False)
    raw_calls = raw.get("tool_calls") or ([raw["tool_call"]] if "tool_call" in raw else [])
    calls = []
    for c in raw_calls:
        if not isinstance(c, Mapping) or not isinstance(c.get("name"), str):
            raise ScriptError("tool call needs a string 'name'", line)
        args = c.get("arguments", {})
        if not isinstance(args, Mapping):
            raise ScriptError("tool call 'arguments' must be an object", line)
        calls.append(ToolCallRequest(c["name"], dict(args)))
    return Rule(
        match=match,
        pattern=pattern,
        target=target,
        reply=reply,
        tool_calls=tuple(calls),
        policy=raw.get("policy"),
        options=dict(raw.get("options") or {}),
        line=line,
    )


def _element_lines(text: str) -> list[int]:
    """1-based line of each top-level element of a JSON array document."""
    decoder = json.JSONDecoder()
    pos = text.index("[") + 1
    lines = []
    while True:
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        if pos >= len(text) or text[pos] == "]":
            return lines
        lines.append(text.count("\n", 0, pos) + 1)
        _, pos = decoder.raw_decode(text, pos)


def load_script(path: str | Path, policies: Mapping[str, Policy] | None = None) -> ScriptedBackend:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScriptError(exc.msg, exc.lineno) from exc
    if not isinstance(raw, list):
        raise ScriptError("script must be a JSON array of rules", 1)
    lines = _element_lines(text)
    rules = [_parse_rule(r, lines[i]) for i, r in enumerate(raw)]
    return ScriptedBackend(rules, policies=policies, name=path.name)


def make_backend(config: BackendConfig, base_dir: Path | None = None):
    if config.kind == "http":
        return HttpBackend(config)
    if not config.script:
        raise ValueError("scripted backend needs a script path")
    script = Path(config.script)
    if base_dir is not None and not script.is_absolute():
        script = base_dir / script
    return load_script(script)
