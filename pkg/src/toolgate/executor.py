"""Dispatch validated tool calls upstream: HTTP endpoints or downstream MCP servers."""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from collections.abc import Collection
from dataclasses import dataclass, field
from typing import Any, Literal
from urllib.parse import quote, urlencode

from .errors import ConfigurationError, RegistrationError
from .mcp_client import HttpTransport, McpClient, McpRpcError, McpTransportError, StdioTransport, content_text
from .spec_compiler import snake_case
from .toolspec import MAX_NAME_LEN, NO_DESCRIPTION, ToolSpec, UpstreamBinding

log = logging.getLogger(__name__)

IDEMPOTENT_METHODS = frozenset({"GET", "HEAD"})
EXCERPT_CHARS = 4096

Status = Literal["ok", "upstream_error", "transport_error", "validation_error"]


@dataclass(frozen=True)
class CallOutcome:
    status: Status
    payload: str
    upstream_code: int | None = None
    latency: float = 0.0
    attempts: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class RetryPolicy:
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.1


@dataclass(frozen=True)
class ServiceConfig:
    """Per-service upstream settings; secrets are referenced by env-var name only."""

    base_url: str | None = None
    auth_env: str | None = None
    auth_header: str = "Authorization"
    auth_prefix: str = "Bearer "
    headers: dict[str, str] = field(default_factory=dict)
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.1
    max_in_flight: int = 8
    array_style: Literal["repeat", "comma"] = "repeat"

    @property
    def policy(self) -> RetryPolicy:
        return RetryPolicy(self.timeout, self.retries, self.backoff)

    def auth_headers(self) -> dict[str, str]:
        headers = dict(self.headers)
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if not token:
                raise ConfigurationError(f"environment variable {self.auth_env} is not set")
            headers[self.auth_header] = f"{self.auth_prefix}{token}"
        return headers


@dataclass(frozen=True)
class HttpRequest:
    method: str
    url: str
    headers: dict[str, str]
    body: bytes | None = None


def _wire(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, (dict, list)):
        return json.dumps(value, separators=(",", ":"), sort_keys=True)
    return str(value)


def render_http_request(spec: ToolSpec, arguments: dict[str, Any], service: ServiceConfig | None = None) -> HttpRequest:
    """Turn schema-valid arguments into a concrete HTTP request."""
    service = service or ServiceConfig()
    b = spec.binding
    if b.kind != "http_endpoint" or b.path is None or b.method is None:
        raise ValueError(f"{spec.name} is not bound to an HTTP endpoint")
    path = b.path
    query: list[tuple[str, str]] = []
    headers: dict[str, str] = {}
    body_fields: dict[str, Any] = {}
    whole_body: Any = None
    has_whole_body = False

    for arg, value in arguments.items():
        loc = b.locations.get(arg)
        if loc is None:
            continue
        if loc.location == "path":
            path = path.replace("{" + str(loc.name) + "}", quote(_wire(value), safe=""))
        elif loc.location == "query":
            if isinstance(value, list):
                if service.array_style == "comma":
                    query.append((str(loc.name), ",".join(_wire(v) for v in value)))
                else:
                    query.extend((str(loc.name), _wire(v)) for v in value)
            elif value is not None:
                query.append((str(loc.name), _wire(value)))
        elif loc.location == "header":
            headers[str(loc.name)] = _wire(value)
        elif loc.name is None:
            whole_body, has_whole_body = value, True
        else:
            body_fields[loc.name] = value

    if "{" in path:
        raise AssertionError(f"{spec.name}: unresolved path parameter in {path!r}")
    base = (service.base_url or b.base_url or "").rstrip("/")
    url = base + path
    if query:
        url += "?" + urlencode(query, quote_via=quote)
    headers.update(service.auth_headers())
    body = None
    if has_whole_body or body_fields:
        payload = whole_body if has_whole_body else body_fields
        body = json.dumps(payload, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        headers.setdefault("Content-Type", "application/json")
    return HttpRequest(b.method, url, headers, body)


def _connect_failure(exc: BaseException) -> bool:
    """True when the request cannot have reached the server."""
    reason = getattr(exc, "reason", exc)
    if isinstance(reason, (socket.timeout, TimeoutError)):
        return False
    return isinstance(reason, (ConnectionRefusedError, socket.gaierror, ConnectionResetError, OSError))


def execute_http(request: HttpRequest, policy: RetryPolicy | None = None) -> CallOutcome:
    """Perform the request.  Only connect-level failures of GET/HEAD are retried."""
    policy = policy or RetryPolicy()
    max_attempts = 1 + (policy.retries if request.method in IDEMPOTENT_METHODS else 0)
    start = time.perf_counter()
    attempts = 0
    detail = ""
    while attempts < max_attempts:
        if attempts:
            time.sleep(policy.backoff * 2 ** (attempts - 1))
        attempts += 1
        try:
            req = urllib.request.Request(request.url, data=request.body, headers=request.headers, method=request.method)
            with urllib.request.urlopen(req, timeout=policy.timeout) as resp:
                body = resp.read().decode("utf-8", "replace")
                return CallOutcome("ok", body, resp.status, time.perf_counter() - start, attempts)
        except urllib.error.HTTPError as exc:
            body = exc.read().decode("utf-8", "replace")
            return CallOutcome("upstream_error", body[:EXCERPT_CHARS], exc.code, time.perf_counter() - start, attempts)
        except (urllib.error.URLError, OSError) as exc:
            detail = str(getattr(exc, "reason", exc))
            if not _connect_failure(exc):
                break
            log.info("connect failure on %s %s (attempt %d): %s", request.method, request.url, attempts, detail)
        except ValueError as exc:
            detail = f"invalid request URL {request.url!r}: {exc}"
            break
    return CallOutcome("transport_error", f"request failed: {detail}", None, time.perf_counter() - start, attempts)


# ---------------------------------------------------------------------------
# downstream MCP servers


@dataclass(frozen=True)
class DownstreamDescriptor:
    id: str
    command: list[str] | None = None
    url: str | None = None
    env: dict[str, str] = field(default_factory=dict)
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if (self.command is None) == (self.url is None):
            raise ConfigurationError(f"downstream {self.id!r}: give exactly one of command or url")

    def connect(self) -> McpClient:
        if self.command is not None:
            return McpClient(StdioTransport(self.command, self.env), self.timeout)
        return McpClient(HttpTransport(str(self.url)), self.timeout)


@dataclass
class DownstreamServer:
    id: str
    descriptor: DownstreamDescriptor
    tools: dict[str, dict[str, Any]]
    client: McpClient

    def close(self) -> None:
        self.client.close()


def proxy_mcp(server: DownstreamServer, tool: str, arguments: dict[str, Any]) -> CallOutcome:
    start = time.perf_counter()
    if tool not in server.tools:
        return CallOutcome("validation_error", f"tool {tool!r} is not advertised by downstream {server.id!r}", None, 0.0, 0)
    try:
        result = server.client.call_tool(tool, arguments)
    except McpTransportError as exc:
        return CallOutcome("transport_error", str(exc), None, time.perf_counter() - start, 1)
    except McpRpcError as exc:
        return CallOutcome("upstream_error", str(exc), exc.code, time.perf_counter() - start, 1)
    text = content_text(result)
    status: Status = "upstream_error" if result.get("isError") else "ok"
    return CallOutcome(status, text, None, time.perf_counter() - start, 1)


def _proxy_name(server_id: str, tool: str, taken: Collection[str]) -> str:
    base = snake_case(tool) or "tool"
    name = base[:MAX_NAME_LEN]
    if name in taken:
        name = f"{snake_case(server_id)}_{base}"[:MAX_NAME_LEN].rstrip("_")
    if name in taken:
        raise RegistrationError(f"downstream tool {tool!r} from {server_id!r} collides with {name!r}")
    return name


def register_downstream(descriptor: DownstreamDescriptor, taken: Collection[str] = ()) -> tuple[DownstreamServer, list[ToolSpec]]:
    """Handshake, list tools and compile each into an mcp_proxy ToolSpec.

    ``taken`` holds names already in use; colliding tools get the server id
    as a prefix.
    """
    try:
        client = descriptor.connect()
        client.initialize()
        advertised = client.list_tools()
    except (McpTransportError, McpRpcError) as exc:
        raise RegistrationError(f"cannot register downstream {descriptor.id!r}: {exc}") from exc
    if not advertised:
        log.warning("downstream %s advertises no tools", descriptor.id)
    used = set(taken)
    specs = []
    tools: dict[str, dict[str, Any]] = {}
    for t in advertised:
        tname = str(t.get("name", ""))
        schema = t.get("inputSchema") or {"type": "object", "properties": {}}
        if schema.get("type") != "object":
            schema = {"type": "object", "properties": {}}
        name = _proxy_name(descriptor.id, tname, used)
        used.add(name)
        tools[tname] = t
        specs.append(
            ToolSpec(
                name=name,
                description=str(t.get("description") or "").strip() or NO_DESCRIPTION,
                arguments=schema,
                binding=UpstreamBinding.proxy(descriptor.id, tname),
                service=descriptor.id,
            )
        )
    return DownstreamServer(descriptor.id, descriptor, tools, client), specs


# ---------------------------------------------------------------------------


class Dispatcher:
    """Routes a ToolSpec call to its upstream, enforcing per-upstream in-flight caps."""

    def __init__(self, services: dict[str, ServiceConfig] | None = None, downstream: dict[str, DownstreamServer] | None = None):
        self.services = dict(services or {})
        self.downstream = dict(downstream or {})
        self._caps: dict[str, threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()

    def _cap(self, key: str, limit: int) -> threading.BoundedSemaphore:
        with self._lock:
            sem = self._caps.get(key)
            if sem is None:
                sem = self._caps[key] = threading.BoundedSemaphore(max(1, limit))
            return sem

    def add_downstream(self, server: DownstreamServer) -> None:
        self.downstream[server.id] = server

    def dispatch(self, spec: ToolSpec, arguments: dict[str, Any]) -> CallOutcome:
        b: UpstreamBinding = spec.binding
        if b.kind == "mcp_proxy":
            server = self.downstream.get(str(b.server_id))
            if server is None:
                return CallOutcome("transport_error", f"downstream server {b.server_id!r} is not connected")
            with self._cap(f"mcp:{server.id}", 8):
                return proxy_mcp(server, str(b.tool), arguments)
        cfg = self.services.get(spec.service, ServiceConfig())
        try:
            request = render_http_request(spec, arguments, cfg)
        except ConfigurationError as exc:
            return CallOutcome("transport_error", f"configuration error: {exc}")
        with self._cap(f"http:{spec.service}", cfg.max_in_flight):
            return execute_http(request, cfg.policy)

    def close(self) -> None:
        for server in self.downstream.values():
            server.close()
