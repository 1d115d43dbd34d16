"""API registry, quality filtering, and tool execution (simulated or live HTTP)."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import string
import time
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Protocol

import httpx

from . import prompts
from .llm.gateway import Gateway, GatewayError, user
from .llm.schema import Boolean, String, StructuredSchema
from .models import ApiSpec, CostLedger, ToolCallRequest, ToolResponse

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 10_000


class RegistryError(ValueError):
    def __init__(self, message: str, indices: Iterable[int] = ()) -> None:
        self.indices = sorted(set(indices))
        if self.indices:
            message = f"{message} (entries {self.indices[:20]}{'...' if len(self.indices) > 20 else ''})"
        super().__init__(message)


class UnknownApiError(KeyError):
    pass


@dataclass(frozen=True)
class Registry:
    apis: Mapping[str, ApiSpec]
    source_meta: str = ""

    def __len__(self) -> int:
        return len(self.apis)

    def __iter__(self) -> Iterator[ApiSpec]:
        return iter(self.apis.values())

    def __contains__(self, api_id: object) -> bool:
        return api_id in self.apis

    def __getitem__(self, api_id: str) -> ApiSpec:
        try:
            return self.apis[api_id]
        except KeyError:
            raise UnknownApiError(api_id) from None

    def ids(self) -> list[str]:
        return sorted(self.apis)

    @classmethod
    def of(cls, apis: Iterable[ApiSpec], source_meta: str = "") -> Registry:
        out: dict[str, ApiSpec] = {}
        for a in apis:
            if a.id in out:
                raise RegistryError(f"duplicate api id {a.id!r}")
            out[a.id] = a
        return cls(out, source_meta)

    def subset(self, ids: Iterable[str], source_meta: str | None = None) -> Registry:
        keep = set(ids)
        return Registry({k: v for k, v in self.apis.items() if k in keep}, source_meta or self.source_meta)

    def to_list(self) -> list[dict[str, Any]]:
        return [a.to_dict() for a in self.apis.values()]

    def digest(self) -> str:
        h = hashlib.sha256()
        for d in self.to_list():
            h.update(json.dumps(d, sort_keys=True).encode())
            h.update(b"\n")
        return h.hexdigest()


def load_registry(path: str | Path) -> Registry:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RegistryError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, list):
        raise RegistryError(f"{path}: registry must be a JSON array")
    apis: dict[str, ApiSpec] = {}
    bad: list[int] = []
    dup: list[int] = []
    for i, entry in enumerate(raw):
        try:
            if not isinstance(entry, dict) or not (entry.get("id") or entry.get("name")):
                raise ValueError("entry needs an id or name")
            api = ApiSpec.from_dict(entry)
        except (ValueError, TypeError, KeyError):
            bad.append(i)
            continue
        if api.id in apis:
            dup.append(i)
            continue
        apis[api.id] = api
    if bad:
        raise RegistryError(f"{path}: malformed registry entries", bad)
    if dup:
        raise RegistryError(f"{path}: duplicate api ids", dup)
    log.info("loaded %d apis from %s", len(apis), path)
    return Registry(apis, f"{path.name}:{len(apis)}")


def save_registry(reg: Registry, path: str | Path) -> None:
    lines = [json.dumps(d, ensure_ascii=False) for d in reg.to_list()]
    Path(path).write_text("[\n" + ",\n".join(lines) + ("\n]\n" if lines else "]\n"), encoding="utf-8")


# ---------------------------------------------------------------------------
# filtering

FILTER_SCHEMA = StructuredSchema.of("filter_verdict", keep=Boolean(), reason=String())

_PLACEHOLDER_TOKENS = {
    "test", "tests", "testing", "for", "demo", "sample", "example", "dummy", "foo", "bar", "baz",
    "tmp", "temp", "todo", "my", "new", "api", "default", "untitled", "hello", "world", "copy",
}


def heuristic_reject(api: ApiSpec) -> str | None:
    """Cheap reason to drop an obviously junk entry, or None."""
    if not api.description.strip():
        return "empty description"
    tokens = [t for t in re.split(r"[^a-z0-9]+", api.name.lower()) if t]
    if not tokens or all(t in _PLACEHOLDER_TOKENS or re.fullmatch(r"v?\d+", t) for t in tokens):
        return "placeholder name"
    return None


@dataclass
class FilterResult:
    kept: Registry
    rejected: list[tuple[str, str]]


class FilterAborted(RuntimeError):
    def __init__(self, done: int, total: int, cause: Exception) -> None:
        super().__init__(f"filtering aborted after {done}/{total} apis: {cause}")
        self.done = done


def filter_registry(
    reg: Registry,
    gateway: Gateway,
    ledger: CostLedger | None = None,
    progress_path: str | Path | None = None,
) -> FilterResult:
    """Split ``reg`` into kept and rejected APIs.

    Heuristics short-circuit obvious junk; everything else gets an LLM verdict.
    With ``progress_path``, each decision is appended as a JSON line before
    moving on, and decisions already in the file are reused.
    """
    ledger = ledger if ledger is not None else CostLedger()
    decided: dict[str, tuple[bool, str]] = {}
    progress = Path(progress_path) if progress_path else None
    if progress and progress.exists():
        for line in progress.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                decided[rec["id"]] = (bool(rec["keep"]), str(rec.get("reason", "")))
    handle = progress.open("a", encoding="utf-8") if progress else None
    try:
        for n, api in enumerate(reg):
            if api.id in decided:
                continue
            reason = heuristic_reject(api)
            if reason is not None:
                verdict, source = (False, reason), "heuristic"
            else:
                msgs = [user(prompts.render("filter", api=prompts.block(prompts.api_view(api))))]
                try:
                    out = gateway.chat(msgs, FILTER_SCHEMA, role="filter", ledger=ledger)
                except GatewayError as exc:
                    raise FilterAborted(len(decided), len(reg), exc) from exc
                verdict, source = (out["keep"], out["reason"]), "llm"
            decided[api.id] = verdict
            if handle:
                handle.write(json.dumps({"id": api.id, "keep": verdict[0], "reason": verdict[1], "source": source}) + "\n")
                handle.flush()
    finally:
        if handle:
            handle.close()
    kept = [a for a in reg if decided[a.id][0]]
    rejected = [(a.id, decided[a.id][1]) for a in reg if not decided[a.id][0]]
    return FilterResult(Registry.of(kept, f"{reg.source_meta}|filtered"), rejected)


# ---------------------------------------------------------------------------
# execution


def canonicalize(value: Any) -> Any:
    """Normalize arguments so semantically equal inputs key the same simulated response."""
    if isinstance(value, Mapping):
        return {str(k): canonicalize(value[k]) for k in sorted(value, key=str)}
    if isinstance(value, (list, tuple)):
        return [canonicalize(v) for v in value]
    if isinstance(value, bool) or value is None:
        return value
    if isinstance(value, (int, float)):
        if isinstance(value, float) and math.isfinite(value) and value.is_integer():
            return int(value)
        return value
    if isinstance(value, str):
        return " ".join(value.split())
    return str(value)


def canonical_json(args: Mapping[str, Any]) -> str:
    return json.dumps(canonicalize(dict(args)), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


class ToolEnvironment(Protocol):
    registry: Registry

    def execute(self, req: ToolCallRequest, timeout_ms: int = DEFAULT_TIMEOUT_MS, ledger: CostLedger | None = None) -> ToolResponse: ...


@dataclass(frozen=True)
class SimBehavior:
    template: Any = None
    failure_rate: float = 0.0
    latency_ms: tuple[int, int] = (5, 50)
    unsolvable: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.failure_rate <= 1.0:
            raise ValueError("failure_rate must lie in [0, 1]")
        lo, hi = self.latency_ms
        if lo < 0 or hi < lo:
            raise ValueError("latency_ms must be a nondecreasing nonnegative pair")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base: SimBehavior | None = None) -> SimBehavior:
        base = base or cls()
        lat = d.get("latency_ms", base.latency_ms)
        if isinstance(lat, (int, float)):
            lat = (int(lat), int(lat))
        return cls(
            template=d.get("template", base.template),
            failure_rate=float(d.get("failure_rate", base.failure_rate)),
            latency_ms=(int(lat[0]), int(lat[1])),
            unsolvable=bool(d.get("unsolvable", base.unsolvable)),
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"failure_rate": self.failure_rate, "latency_ms": list(self.latency_ms), "unsolvable": self.unsolvable}
        if self.template is not None:
            d["template"] = self.template
        return d


@dataclass(frozen=True)
class SimProfile:
    """Per-API simulated behaviour; the ``"*"`` key of the file sets defaults."""

    behaviors: Mapping[str, SimBehavior] = field(default_factory=dict)
    default: SimBehavior = SimBehavior()

    def behavior(self, api_id: str) -> SimBehavior:
        return self.behaviors.get(api_id, self.default)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SimProfile:
        default = SimBehavior.from_dict(d.get("*", {}))
        return cls({k: SimBehavior.from_dict(v, default) for k, v in d.items() if k != "*"}, default)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"*": self.default.to_dict()}
        out.update({k: v.to_dict() for k, v in self.behaviors.items()})
        return out


def load_sim_profile(path: str | Path) -> SimProfile:
    return SimProfile.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class _Lenient(dict):
    def __missing__(self, key: str) -> str:
        return "{" + key + "}"


def _fill(template: Any, args: Mapping[str, Any]) -> Any:
    if isinstance(template, str):
        try:
            return string.Formatter().vformat(template, (), _Lenient(args))
        except (ValueError, IndexError):
            return template
    if isinstance(template, Mapping):
        return {k: _fill(v, args) for k, v in template.items()}
    if isinstance(template, list):
        return [_fill(v, args) for v in template]
    return template


class SimEnvironment:
    """Deterministic stand-in for live APIs.

    The outcome of a call is a pure function of ``(seed, api_id, canonical
    arguments)``: failures, latency and the response token are all drawn from
    one hash of that triple, so concurrency cannot perturb results.
    """

    def __init__(self, registry: Registry, profile: SimProfile | None = None, seed: int = 0) -> None:
        self.registry = registry
        self.profile = profile or SimProfile()
        self.seed = seed

    def execute(self, req: ToolCallRequest, timeout_ms: int = DEFAULT_TIMEOUT_MS, ledger: CostLedger | None = None) -> ToolResponse:
        api = self.registry[req.api_id]
        if ledger is not None:
            ledger.tool_calls += 1
        beh = self.profile.behavior(api.id)
        canon = canonical_json(req.arguments)
        h = hashlib.sha256(f"{self.seed}|{api.id}|{canon}".encode()).hexdigest()
        lo, hi = beh.latency_ms
        latency = lo + int(h[16:24], 16) % (hi - lo + 1)
        if latency >= timeout_ms:
            return ToolResponse("timeout", f"no response within {timeout_ms} ms", max(latency, timeout_ms))
        if beh.unsolvable:
            return ToolResponse("error", "503 Service Unavailable", latency)
        args = canonicalize(dict(req.arguments))
        missing = [p.name for p in api.params if p.required and args.get(p.name) in (None, "")]
        if missing:
            return ToolResponse("error", f"missing required parameter(s): {', '.join(missing)}", latency)
        if int(h[:16], 16) / 2**64 < beh.failure_rate:
            return ToolResponse("error", "500 Internal Server Error", latency)
        token = f"tok-{h[:10]}"
        if beh.template is not None:
            body = _fill(beh.template, {**args, "token": token})
        else:
            body = {"api": api.id, "input": args, "result": f"{api.name} result {token}"}
        if isinstance(body, dict):
            body = {**body, "token": token}
        return ToolResponse("success", body, latency)


def _expand_env(value: str) -> str:
    return re.sub(r"\$\{([A-Z0-9_]+)\}", lambda m: os.environ.get(m.group(1), ""), value)


class LiveEnvironment:
    """Calls each API's HTTP endpoint (``extensions.endpoint``) under a wall-clock timeout."""

    def __init__(self, registry: Registry, max_workers: int = 32, client_factory=httpx.Client) -> None:
        self.registry = registry
        self._pool = ThreadPoolExecutor(max_workers=max_workers, thread_name_prefix="live-tool")
        self._client_factory = client_factory

    def _request(self, api: ApiSpec, args: Mapping[str, Any], timeout_s: float) -> httpx.Response:
        ext = api.extensions
        endpoint = ext.get("endpoint")
        if not endpoint:
            raise ValueError(f"api {api.id!r} has no endpoint for live execution")
        url = _fill(endpoint, args)
        method = str(ext.get("method", "GET")).upper()
        headers = {k: _expand_env(str(v)) for k, v in (ext.get("headers") or {}).items()}
        with self._client_factory(timeout=timeout_s) as client:
            if method == "GET":
                return client.request(method, url, params=dict(args), headers=headers)
            return client.request(method, url, json=dict(args), headers=headers)

    def execute(self, req: ToolCallRequest, timeout_ms: int = DEFAULT_TIMEOUT_MS, ledger: CostLedger | None = None) -> ToolResponse:
        api = self.registry[req.api_id]
        if ledger is not None:
            ledger.tool_calls += 1
        timeout_s = timeout_ms / 1000
        start = time.monotonic()
        future = self._pool.submit(self._request, api, dict(req.arguments), timeout_s)
        try:
            resp = future.result(timeout=timeout_s)
        except (FutureTimeout, httpx.TimeoutException):
            elapsed = int((time.monotonic() - start) * 1000)
            return ToolResponse("timeout", f"no response within {timeout_ms} ms", max(elapsed, timeout_ms))
        except (httpx.HTTPError, ValueError) as exc:
            return ToolResponse("error", f"{type(exc).__name__}: {exc}", int((time.monotonic() - start) * 1000))
        latency = int((time.monotonic() - start) * 1000)
        try:
            body: Any = resp.json()
        except ValueError:
            body = resp.text
        if 200 <= resp.status_code < 300:
            return ToolResponse("success", body, latency)
        return ToolResponse("error", f"HTTP {resp.status_code}: {str(body)[:500]}", latency)

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)
