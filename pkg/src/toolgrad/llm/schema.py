"""Closed set of structured-output slot types with JSON (de)serialization.

A :class:`StructuredSchema` is a named record of typed slots. It renders to a
JSON-schema dict for the wire, parses model text back into plain Python
values, and can serialize any value it accepts so that
``parse(serialize(v)) == v``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping


class SchemaError(ValueError):
    """Model output does not fit the requested schema."""


class Slot:
    def json_schema(self) -> dict[str, Any]:
        raise NotImplementedError

    def coerce(self, value: Any, path: str) -> Any:
        raise NotImplementedError


@dataclass(frozen=True)
class String(Slot):
    def json_schema(self) -> dict[str, Any]:
        return {"type": "string"}

    def coerce(self, value: Any, path: str) -> Any:
        if not isinstance(value, str):
            raise SchemaError(f"{path}: expected string, got {type(value).__name__}")
        return value


@dataclass(frozen=True)
class Integer(Slot):
    def json_schema(self) -> dict[str, Any]:
        return {"type": "integer"}

    def coerce(self, value: Any, path: str) -> Any:
        if isinstance(value, bool):
            raise SchemaError(f"{path}: expected integer, got boolean")
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise SchemaError(f"{path}: expected integer, got {type(value).__name__}")
        return value


@dataclass(frozen=True)
class Number(Slot):
    def json_schema(self) -> dict[str, Any]:
        return {"type": "number"}

    def coerce(self, value: Any, path: str) -> Any:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{path}: expected number, got {type(value).__name__}")
        if not math.isfinite(value):
            raise SchemaError(f"{path}: number must be finite")
        return float(value)


@dataclass(frozen=True)
class Boolean(Slot):
    def json_schema(self) -> dict[str, Any]:
        return {"type": "boolean"}

    def coerce(self, value: Any, path: str) -> Any:
        if not isinstance(value, bool):
            raise SchemaError(f"{path}: expected boolean, got {type(value).__name__}")
        return value


@dataclass(frozen=True)
class Enum(Slot):
    choices: tuple[str, ...]

    def json_schema(self) -> dict[str, Any]:
        return {"type": "string", "enum": list(self.choices)}

    def coerce(self, value: Any, path: str) -> Any:
        if value not in self.choices:
            raise SchemaError(f"{path}: {value!r} not one of {list(self.choices)}")
        return value


@dataclass(frozen=True)
class ListOf(Slot):
    item: Slot

    def json_schema(self) -> dict[str, Any]:
        return {"type": "array", "items": self.item.json_schema()}

    def coerce(self, value: Any, path: str) -> Any:
        if not isinstance(value, list):
            raise SchemaError(f"{path}: expected list, got {type(value).__name__}")
        return [self.item.coerce(v, f"{path}[{i}]") for i, v in enumerate(value)]


@dataclass(frozen=True)
class OptionalOf(Slot):
    item: Slot

    def json_schema(self) -> dict[str, Any]:
        return {"anyOf": [self.item.json_schema(), {"type": "null"}]}

    def coerce(self, value: Any, path: str) -> Any:
        if value is None:
            return None
        return self.item.coerce(value, path)


@dataclass(frozen=True)
class Nested(Slot):
    fields: tuple[tuple[str, Slot], ...]

    def json_schema(self) -> dict[str, Any]:
        return {
            "type": "object",
            "properties": {name: slot.json_schema() for name, slot in self.fields},
            "required": [name for name, _ in self.fields],
            "additionalProperties": False,
        }

    def coerce(self, value: Any, path: str) -> Any:
        if not isinstance(value, Mapping):
            raise SchemaError(f"{path}: expected object, got {type(value).__name__}")
        out = {}
        for name, slot in self.fields:
            if name not in value:
                if isinstance(slot, OptionalOf):
                    out[name] = None
                    continue
                raise SchemaError(f"{path}.{name}: missing")
            out[name] = slot.coerce(value[name], f"{path}.{name}")
        return out


def nested(**fields: Slot) -> Nested:
    return Nested(tuple(fields.items()))


@dataclass(frozen=True)
class StructuredSchema:
    name: str
    fields: tuple[tuple[str, Slot], ...] = field(default_factory=tuple)

    @classmethod
    def of(cls, name: str, **fields: Slot) -> StructuredSchema:
        return cls(name, tuple(fields.items()))

    @property
    def root(self) -> Nested:
        return Nested(self.fields)

    def json_schema(self) -> dict[str, Any]:
        return self.root.json_schema()

    def validate(self, value: Any) -> dict[str, Any]:
        return self.root.coerce(value, self.name)

    def serialize(self, value: Any) -> str:
        return json.dumps(self.validate(value), ensure_ascii=False)

    def parse(self, text: str) -> dict[str, Any]:
        return self.validate(extract_json(text))

    def instructions(self) -> str:
        return (
            "Reply with a single JSON object and nothing else. It must match this JSON schema:\n"
            + json.dumps(self.json_schema(), indent=2)
        )


def extract_json(text: str) -> Any:
    """Decode the JSON object in ``text``, tolerating prose or code fences around it."""
    text = (text or "").strip()
    if not text:
        raise SchemaError("empty reply")
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    start = text.find("{")
    while start != -1:
        try:
            obj, _ = json.JSONDecoder().raw_decode(text, start)
            return obj
        except json.JSONDecodeError:
            start = text.find("{", start + 1)
    raise SchemaError("reply contains no JSON object")
