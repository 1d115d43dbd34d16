"""Model access: the accounting gateway, structured-output schemas and backends."""

from .backends import BackendConfig, HttpBackend, ScriptedBackend, load_script, make_backend
from .gateway import BackendUnavailable, ChatMessage, Gateway, GatewayError, StructuredOutputError

__all__ = [
    "BackendConfig",
    "BackendUnavailable",
    "ChatMessage",
    "Gateway",
    "GatewayError",
    "HttpBackend",
    "ScriptedBackend",
    "StructuredOutputError",
    "load_script",
    "make_backend",
]
