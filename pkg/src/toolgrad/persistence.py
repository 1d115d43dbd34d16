"""Flat-file persistence: versioned JSONL records, run manifests and run configuration."""

from __future__ import annotations

import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

from .models import Sample, sample_validate

SAMPLE_SCHEMA = "toolgrad.sample/v1"
EVAL_SCHEMA = "toolgrad.eval/v1"
BASELINE_SCHEMA = "toolgrad.baseline/v1"
MANIFEST_SCHEMA = "toolgrad.manifest/v1"

_SECRETISH = re.compile(r"(api_?key|secret|token|password|authorization)$", re.I)


class DatasetError(ValueError):
    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None) -> None:
        where = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(where + message)
        self.line = line


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# JSONL


def dump_line(schema_id: str, record: Mapping[str, Any]) -> str:
    """One compact JSON line; field order follows ``record`` so equal runs give equal bytes."""
    return json.dumps({"schema_id": schema_id, **record}, ensure_ascii=False, separators=(",", ":"))


def iter_jsonl(path: str | Path, schema_id: str | None = None) -> Iterator[tuple[int, dict[str, Any]]]:
    """(line number, record) for every nonblank line; raises :class:`DatasetError` on bad lines."""
    with Path(path).open(encoding="utf-8") as fh:
        for no, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"invalid JSON ({exc.msg})", path, no) from exc
            if not isinstance(rec, dict):
                raise DatasetError("record is not an object", path, no)
            if schema_id is not None and rec.get("schema_id") != schema_id:
                raise DatasetError(f"schema_id {rec.get('schema_id')!r}, expected {schema_id!r}", path, no)
            yield no, rec


def read_jsonl(path: str | Path, schema_id: str | None = None) -> list[dict[str, Any]]:
    return [rec for _, rec in iter_jsonl(path, schema_id)]


def write_lines(path: str | Path, lines: Iterable[str]) -> None:
    """Write atomically: a sibling temp file is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    os.replace(tmp, path)


def completed_prefix(path: str | Path, schema_id: str, key: str = "index") -> int:
    """Count the leading complete records whose ``key`` runs 0, 1, 2, ...

    Anything after the first torn or out-of-sequence line is cut off, so a
    resumed writer can append without ever duplicating an index.
    """
    path = Path(path)
    if not path.exists():
        return 0
    good = 0
    offset = 0
    with path.open("rb") as fh:
        for raw in fh:
            if not raw.endswith(b"\n"):
                break
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError:
                break
            if not isinstance(rec, dict) or rec.get("schema_id") != schema_id or rec.get(key) != good:
                break
            good += 1
            offset += len(raw)
    with path.open("r+b") as fh:
        fh.truncate(offset)
    return good


class OrderedWriter:
    """Single owner of an output file; accepts records in any order, writes them by index."""

    def __init__(self, path: str | Path, start: int = 0, append: bool = False) -> None:
        self._fh = Path(path).open("a" if append else "w", encoding="utf-8")
        self._next = start
        self._pending: dict[int, str] = {}

    @property
    def written(self) -> int:
        return self._next

    def put(self, index: int, line: str) -> None:
        if index < self._next or index in self._pending:
            raise ValueError(f"index {index} already written")
        self._pending[index] = line
        while self._next in self._pending:
            self._fh.write(self._pending.pop(self._next) + "\n")
            self._next += 1
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> OrderedWriter:
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


# ---------------------------------------------------------------------------
# samples


def sample_record(index: int, sample: Sample) -> dict[str, Any]:
    return {"index": index, **sample.to_dict()}


def sample_line(index: int, sample: Sample) -> str:
    return dump_line(SAMPLE_SCHEMA, sample_record(index, sample))


def parse_sample(rec: Mapping[str, Any]) -> Sample:
    body = {k: v for k, v in rec.items() if k not in ("schema_id", "index")}
    return Sample.from_dict(body)


def read_samples(path: str | Path) -> list[tuple[int, Sample]]:
    out = []
    for no, rec in iter_jsonl(path, SAMPLE_SCHEMA):
        try:
            out.append((int(rec.get("index", len(out))), parse_sample(rec)))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"not a sample: {exc}", path, no) from exc
    return out


_SAMPLE_KEYS = ("schema_id", "index", "sample_id", "generator", "seed", "passed", "query", "workflow",
                "response", "negative_api_ids", "ledger")


def validate_sample_record(rec: Mapping[str, Any], p: int | None = None, library_size: int | None = None) -> list[str]:
    """Schema, round-trip and domain checks for one dataset line; empty means valid."""
    problems = []
    if rec.get("schema_id") != SAMPLE_SCHEMA:
        problems.append(f"schema_id {rec.get('schema_id')!r}")
    missing = [k for k in _SAMPLE_KEYS if k not in rec]
    if missing:
        return problems + [f"missing fields {missing}"]
    try:
        sample = parse_sample(rec)
    except (KeyError, TypeError, ValueError) as exc:
        return problems + [f"unparsable sample: {exc}"]
    if sample_record(rec["index"], sample) != {k: v for k, v in rec.items() if k != "schema_id"}:
        problems.append("record does not round-trip")
    problems.extend(sample_validate(sample, p if sample.passed else None, library_size))
    return problems


_EVAL_KEYS = ("sample_id", "framework", "recall", "success_rate", "qor", "llm_steps", "tool_calls", "flags", "ledger")


def validate_eval_record(rec: Mapping[str, Any]) -> list[str]:
    problems = []
    if rec.get("schema_id") != EVAL_SCHEMA:
        problems.append(f"schema_id {rec.get('schema_id')!r}")
    problems += [f"missing field {k}" for k in _EVAL_KEYS if k not in rec]
    if problems:
        return problems
    if rec["framework"] not in ("standard", "react", "dfs"):
        problems.append(f"unknown framework {rec['framework']!r}")
    for k in ("recall", "success_rate"):
        if not 0.0 <= float(rec[k]) <= 100.0:
            problems.append(f"{k} out of range")
    if float(rec["success_rate"]) > float(rec["recall"]) + 1e-9:
        problems.append("success_rate exceeds recall")
    if rec["qor"] is not None and not 0.0 <= float(rec["qor"]) <= 100.0:
        problems.append("qor out of range")
    return problems


# ---------------------------------------------------------------------------
# manifests


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def scrub(value: Any) -> Any:
    """Drop anything that looks like a credential from a config snapshot."""
    if isinstance(value, Mapping):
        return {k: scrub(v) for k, v in value.items() if not _SECRETISH.search(str(k))}
    if isinstance(value, list):
        return [scrub(v) for v in value]
    return value


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    registry_digest: str
    prompt_versions: dict[str, str]
    backend_identities: dict[str, str]
    started_at: str
    finished_at: str = ""
    output: str = ""
    output_digest: str = ""
    ledger: dict[str, Any] = field(default_factory=dict)
    stats: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_id": MANIFEST_SCHEMA,
            "command": self.command,
            "config": scrub(self.config),
            "registry_digest": self.registry_digest,
            "prompt_versions": dict(self.prompt_versions),
            "backend_identities": dict(self.backend_identities),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "output": self.output,
            "output_digest": self.output_digest,
            "ledger": dict(self.ledger),
            "stats": dict(self.stats),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunManifest:
        if d.get("schema_id") != MANIFEST_SCHEMA:
            raise DatasetError(f"not a manifest: schema_id {d.get('schema_id')!r}")
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def write(self, path: str | Path) -> None:
        write_lines(path, [json.dumps(self.to_dict(), indent=2, ensure_ascii=False)])

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def manifest_path(output: str | Path) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def verify_manifest(manifest: RunManifest, output: str | Path, registry_digest: str | None = None) -> list[str]:
    problems = []
    if file_digest(output) != manifest.output_digest:
        problems.append("output digest mismatch")
    if registry_digest is not None and registry_digest != manifest.registry_digest:
        problems.append("registry digest mismatch")
    return problems


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Config:
    """A JSON run configuration; relative paths resolve against the file's directory."""

    raw: dict[str, Any]
    base_dir: Path

    def section(self, name: str) -> dict[str, Any]:
        value = self.raw.get(name) or {}
        if not isinstance(value, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        return dict(value)

    def path(self, value: str | Path) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def required_path(self, key: str) -> Path:
        if key not in self.raw:
            raise ConfigError(f"config is missing {key!r}")
        return self.path(self.raw[key])


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config({}, Path.cwd())
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return Config(raw, path.resolve().parent)
