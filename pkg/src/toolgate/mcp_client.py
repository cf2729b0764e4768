"""Small synchronous MCP client over stdio (NDJSON) or HTTP POST."""

from __future__ import annotations

import itertools
import json
import logging
import os
import queue
import subprocess
import threading
import urllib.error
import urllib.request
from typing import Any

from . import jsonrpc
from .errors import ToolgateError

log = logging.getLogger(__name__)

PROTOCOL_VERSION = "2025-06-18"
SESSION_HEADER = "Mcp-Session-Id"
_EOF = object()


class McpTransportError(ToolgateError):
    """The connection to an MCP server was lost or never established."""


class McpRpcError(ToolgateError):
    def __init__(self, code: int, message: str, data: Any = None):
        self.code = code
        self.data = data
        super().__init__(f"[{code}] {message}")


class StdioTransport:
    def __init__(self, command: list[str], env: dict[str, str] | None = None, cwd: str | None = None):
        try:
            self.proc = subprocess.Popen(
                command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                env={**os.environ, **(env or {})},
                cwd=cwd,
            )
        except OSError as exc:
            raise McpTransportError(f"cannot start {command!r}: {exc}") from exc
        self._lines: queue.Queue[Any] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        assert self.proc.stdout is not None
        for raw in self.proc.stdout:
            self._lines.put(raw)
        self._lines.put(_EOF)

    def send(self, msg: dict[str, Any]) -> None:
        assert self.proc.stdin is not None
        try:
            self.proc.stdin.write(json.dumps(msg).encode() + b"\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            raise McpTransportError(f"downstream pipe closed: {exc}") from exc

    def exchange(self, msg: dict[str, Any], timeout: float) -> dict[str, Any] | None:
        self.send(msg)
        if jsonrpc.is_notification(msg):
            return None
        while True:
            try:
                raw = self._lines.get(timeout=timeout)
            except queue.Empty as exc:
                raise McpTransportError(f"no response within {timeout}s") from exc
            if raw is _EOF:
                self._lines.put(_EOF)
                raise McpTransportError(f"downstream process exited (code {self.proc.poll()})")
            try:
                reply = json.loads(raw)
            except ValueError:
                log.debug("ignoring non-JSON line from downstream: %r", raw[:200])
                continue
            if isinstance(reply, dict) and reply.get("id") == msg["id"] and "method" not in reply:
                return reply

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                assert self.proc.stdin is not None
                self.proc.stdin.close()
                self.proc.wait(timeout=2)
            except (OSError, subprocess.TimeoutExpired):
                self.proc.kill()


class HttpTransport:
    def __init__(self, url: str, headers: dict[str, str] | None = None):
        self.url = url
        self.headers = dict(headers or {})
        self.session_id: str | None = None

    def exchange(self, msg: dict[str, Any], timeout: float) -> dict[str, Any] | None:
        headers = {"Content-Type": "application/json", "Accept": "application/json", **self.headers}
        if self.session_id:
            headers[SESSION_HEADER] = self.session_id
        req = urllib.request.Request(self.url, data=json.dumps(msg).encode(), headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                sid = resp.headers.get(SESSION_HEADER)
                if sid:
                    self.session_id = sid
                body = resp.read()
        except urllib.error.HTTPError as exc:
            body = exc.read()
            if not body:
                raise McpTransportError(f"HTTP {exc.code} from {self.url}") from exc
        except (urllib.error.URLError, OSError) as exc:
            raise McpTransportError(f"cannot reach {self.url}: {exc}") from exc
        if jsonrpc.is_notification(msg) or not body:
            return None
        try:
            return json.loads(body)
        except ValueError as exc:
            raise McpTransportError(f"non-JSON response from {self.url}") from exc

    def close(self) -> None:
        pass


class McpClient:
    """One MCP connection; requests on it are serialised."""

    def __init__(self, transport: StdioTransport | HttpTransport, timeout: float = 30.0):
        self.transport = transport
        self.timeout = timeout
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self.server_info: dict[str, Any] = {}

    def request(self, method: str, params: Any = None) -> Any:
        msg = jsonrpc.request(next(self._ids), method, params)
        with self._lock:
            reply = self.transport.exchange(msg, self.timeout)
        if reply is None:
            raise McpTransportError(f"no reply to {method}")
        if "error" in reply:
            err = reply["error"] or {}
            raise McpRpcError(int(err.get("code", jsonrpc.INTERNAL_ERROR)), str(err.get("message", "")), err.get("data"))
        return reply.get("result")

    def notify(self, method: str, params: Any = None) -> None:
        with self._lock:
            self.transport.exchange(jsonrpc.notification(method, params), self.timeout)

    def initialize(self, client_name: str = "toolgate", version: str = "0.1.0") -> dict[str, Any]:
        info = self.request(
            "initialize",
            {
                "protocolVersion": PROTOCOL_VERSION,
                "capabilities": {},
                "clientInfo": {"name": client_name, "version": version},
            },
        )
        self.server_info = info or {}
        self.notify("notifications/initialized")
        return self.server_info

    def list_tools(self) -> list[dict[str, Any]]:
        tools: list[dict[str, Any]] = []
        cursor = None
        while True:
            page = self.request("tools/list", {"cursor": cursor} if cursor else {}) or {}
            tools.extend(page.get("tools") or [])
            cursor = page.get("nextCursor")
            if not cursor:
                return tools

    def call_tool(self, name: str, arguments: dict[str, Any]) -> dict[str, Any]:
        return self.request("tools/call", {"name": name, "arguments": arguments}) or {}

    def close(self) -> None:
        self.transport.close()


def content_text(result: dict[str, Any]) -> str:
    """Flatten an MCP ``content`` list to text, keeping text items verbatim."""
    parts = []
    for item in result.get("content") or []:
        if isinstance(item, dict) and item.get("type") == "text":
            parts.append(str(item.get("text", "")))
        else:
            parts.append(json.dumps(item, sort_keys=True))
    return "\n".join(parts)
