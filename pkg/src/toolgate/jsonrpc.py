"""Minimal JSON-RPC 2.0 envelope helpers."""

from __future__ import annotations

from typing import Any

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INVALID_PARAMS = -32602
INTERNAL_ERROR = -32603
SERVER_NOT_INITIALIZED = -32002

_NO_ID = object()


def result(msg_id: Any, value: Any) -> dict[str, Any]:
    return {"jsonrpc": "2.0", "id": msg_id, "result": value}


def error(msg_id: Any, code: int, message: str, data: Any = None) -> dict[str, Any]:
    err: dict[str, Any] = {"code": code, "message": message}
    if data is not None:
        err["data"] = data
    return {"jsonrpc": "2.0", "id": msg_id, "error": err}


def request(msg_id: Any, method: str, params: Any = None) -> dict[str, Any]:
    msg: dict[str, Any] = {"jsonrpc": "2.0", "id": msg_id, "method": method}
    if params is not None:
        msg["params"] = params
    return msg


def notification(method: str, params: Any = None) -> dict[str, Any]:
    msg: dict[str, Any] = {"jsonrpc": "2.0", "method": method}
    if params is not None:
        msg["params"] = params
    return msg


def envelope_problem(msg: Any) -> str | None:
    """Why ``msg`` is not a valid request/notification, or None if it is."""
    if not isinstance(msg, dict):
        return "envelope must be a JSON object"
    if msg.get("jsonrpc") != "2.0":
        return "jsonrpc must be '2.0'"
    if not isinstance(msg.get("method"), str):
        return "method must be a string"
    if "id" in msg and not (msg["id"] is None or isinstance(msg["id"], (str, int)) and not isinstance(msg["id"], bool)):
        return "id must be a string, integer or null"
    if "params" in msg and not isinstance(msg["params"], (dict, list)):
        return "params must be an object or array"
    return None


def is_notification(msg: dict[str, Any]) -> bool:
    return "id" not in msg
