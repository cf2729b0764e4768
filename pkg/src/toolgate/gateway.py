"""The gateway MCP server: exactly two tools, ``tool_finder`` and ``call_tool``.

Agents never see upstream tools in ``tools/list``; they search for them with
``tool_finder`` and invoke them through ``call_tool``.  Tool failures are
reported as ``isError`` results, never as JSON-RPC errors.
"""

from __future__ import annotations

import difflib
import json
import logging
import sys
import threading
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import IO, Any, Literal

from . import __version__, jsonrpc
from .errors import ToolgateError
from .executor import DownstreamDescriptor, Dispatcher, register_downstream
from .harness import TraceWriter
from .mcp_client import SESSION_HEADER
from .registry import ToolRegistry
from .retrieval import DEFAULT_TOP_K, Embedder, RetrievalQuery, ToolIndex, embed_tools, search
from .validation import validate_arguments

log = logging.getLogger(__name__)

SUPPORTED_PROTOCOL_VERSIONS = ("2024-11-05", "2025-03-26", "2025-06-18")
DEFAULT_TRUNCATION_CAP = 64 * 1024
SERVER_NAME = "toolgate"

Mode = Literal["permissive", "strict"]

TOOL_FINDER = {
    "name": "tool_finder",
    "description": (
        "Search the catalogue of available tools with a free-text query describing the action you need. "
        "Returns the name, description and argument schema of the most relevant tools. "
        "Use call_tool to invoke one of them."
    ),
    "inputSchema": {
        "type": "object",
        "properties": {
            "query": {"type": "string", "description": "What the tool should do, in plain words."},
            "top_k": {"type": "integer", "minimum": 1, "description": f"Number of tools to return (default {DEFAULT_TOP_K})."},
        },
        "required": ["query"],
    },
}

CALL_TOOL = {
    "name": "call_tool",
    "description": (
        "Invoke a tool found with tool_finder. Pass its exact name and an arguments object "
        "matching its argument schema. Returns the tool's raw result."
    ),
    "inputSchema": {
        "type": "object",
        "properties": {
            "tool_name": {"type": "string", "description": "Exact tool name as returned by tool_finder."},
            "arguments": {"type": "object", "description": "Arguments for the tool."},
        },
        "required": ["tool_name", "arguments"],
    },
}

INSTRUCTIONS = (
    "This server fronts a large tool catalogue. Use tool_finder to discover tools, "
    "then call_tool to run them."
)


@dataclass
class GatewaySession:
    session_id: str
    mode: Mode = "permissive"
    initialized: bool = False
    protocol_version: str | None = None
    retrieved_tools: set[str] = field(default_factory=set)
    tool_finder_calls: int = 0
    call_tool_calls: int = 0
    failed_calls: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


@dataclass(frozen=True)
class ToolResult:
    text: str
    is_error: bool = False

    def to_mcp(self) -> dict[str, Any]:
        return {"content": [{"type": "text", "text": self.text}], "isError": self.is_error}


def truncate(text: str, cap: int) -> str:
    data = text.encode("utf-8")
    if len(data) <= cap:
        return text
    kept = data[:cap].decode("utf-8", "ignore")
    return f"{kept}\n[truncated {len(data) - len(kept.encode('utf-8'))} bytes]"


def format_hits(query: str, top_k: int, hits: list[tuple[Any, float]]) -> str:
    lines = [f'Found {len(hits)} tools for "{query}" (top_k={top_k}). Invoke one with call_tool.']
    for rank, (spec, score) in enumerate(hits, start=1):
        lines += [
            "",
            f"## {rank}. {spec.name} (score {score:.4f})",
            f"Service: {spec.service}",
            "Description:",
            spec.description,
            "Arguments (JSON Schema):",
            json.dumps(spec.arguments, sort_keys=True, separators=(",", ":"), ensure_ascii=False),
        ]
    return "\n".join(lines)


class Gateway:
    """Shared, read-mostly server state plus per-session request handling."""

    def __init__(
        self,
        registry: ToolRegistry,
        index: ToolIndex,
        embedder: Embedder,
        dispatcher: Dispatcher | None = None,
        *,
        mode: Mode = "permissive",
        default_top_k: int = DEFAULT_TOP_K,
        truncation_cap: int = DEFAULT_TRUNCATION_CAP,
        trace: TraceWriter | None = None,
    ):
        if registry.names() != index.names:
            raise ToolgateError("index does not match registry (rebuild the index)")
        if embedder.config.fingerprint() != index.fingerprint:
            raise ToolgateError("configured embedder does not match the index fingerprint")
        if default_top_k < 1:
            raise ToolgateError("default top_k must be >= 1")
        self._state = (registry, index)
        self._swap = threading.Lock()
        self.embedder = embedder
        self.dispatcher = dispatcher or Dispatcher()
        self.mode: Mode = mode
        self.default_top_k = default_top_k
        self.truncation_cap = truncation_cap
        self.trace = trace
        self.sessions: dict[str, GatewaySession] = {}
        self._sessions_lock = threading.Lock()

    @property
    def registry(self) -> ToolRegistry:
        return self._state[0]

    @property
    def index(self) -> ToolIndex:
        return self._state[1]

    # -- sessions ---------------------------------------------------------

    def open_session(self, session_id: str | None = None) -> GatewaySession:
        session = GatewaySession(session_id or uuid.uuid4().hex, self.mode)
        with self._sessions_lock:
            self.sessions[session.session_id] = session
        return session

    def close_session(self, session_id: str) -> None:
        with self._sessions_lock:
            self.sessions.pop(session_id, None)

    # -- downstream registration (rebuild and swap) ----------------------

    def register_downstream(self, descriptor: DownstreamDescriptor) -> int:
        with self._swap:
            registry, index = self._state
            server, specs = register_downstream(descriptor, set(registry.names()))
            if specs:
                new_registry = registry.add_tools(specs)
                vectors = embed_tools(specs, self.embedder)
                grown = index.extended([s.name for s in specs], vectors)
                order = [grown.names.index(n) for n in new_registry.names()]
                new_index = ToolIndex([grown.names[i] for i in order], grown.matrix[order], index.config)
                self._state = (new_registry, new_index)
            self.dispatcher.add_downstream(server)
            log.info("registered downstream %s with %d tools", descriptor.id, len(specs))
            return len(specs)

    # -- the two gateway tools -------------------------------------------

    def tool_finder(self, session: GatewaySession, query: Any, top_k: Any = None) -> ToolResult:
        session.tool_finder_calls += 1
        if not isinstance(query, str) or not query.strip():
            return ToolResult("Argument error: 'query' must be a non-empty string.", True)
        if top_k is None:
            top_k = self.default_top_k
        if isinstance(top_k, bool) or not isinstance(top_k, int) or top_k < 1:
            return ToolResult("Argument error: 'top_k' must be a positive integer.", True)
        registry, index = self._state
        try:
            result = search(index, RetrievalQuery(query, top_k), self.embedder)
        except (ToolgateError, ValueError) as exc:
            return ToolResult(f"Tool search failed: {exc}", True)
        session.retrieved_tools.update(result.names)
        if self.trace:
            self.trace.finder(query, result.names, session.session_id)
        hits = [(registry.tools[h.name], h.score) for h in result.hits]
        return ToolResult(format_hits(query, top_k, hits))

    def call_tool(self, session: GatewaySession, tool_name: Any, arguments: Any) -> ToolResult:
        session.call_tool_calls += 1
        result, status = self._call(session, tool_name, arguments)
        if result.is_error:
            session.failed_calls += 1
        if self.trace and isinstance(tool_name, str):
            self.trace.call(tool_name, not result.is_error, status, session.session_id)
        return result

    def _call(self, session: GatewaySession, tool_name: Any, arguments: Any) -> tuple[ToolResult, str]:
        if not isinstance(tool_name, str) or not tool_name:
            return ToolResult("Argument error: 'tool_name' must be a non-empty string.", True), "validation_error"
        if arguments is None:
            arguments = {}
        if not isinstance(arguments, dict):
            return ToolResult("Argument error: 'arguments' must be a JSON object.", True), "validation_error"
        registry = self.registry
        spec = registry.get(tool_name)
        if spec is None:
            close = difflib.get_close_matches(tool_name, registry.names(), n=1, cutoff=0.6)
            hint = f" Did you mean '{close[0]}'?" if close else ""
            return ToolResult(f"Unknown tool '{tool_name}'.{hint} Use tool_finder to search for tools.", True), "unknown_tool"
        if session.mode == "strict" and tool_name not in session.retrieved_tools:
            return (
                ToolResult(f"Tool '{tool_name}' not yet retrieved. Use tool_finder to find it before calling it.", True),
                "not_retrieved",
            )
        errors = validate_arguments(arguments, spec.arguments)
        if errors:
            report = "\n".join(f"- {e}" for e in errors)
            return ToolResult(f"Invalid arguments for '{tool_name}':\n{report}", True), "validation_error"
        try:
            outcome = self.dispatcher.dispatch(spec, arguments)
        except Exception as exc:  # noqa: BLE001 - must never escape as a protocol error
            log.exception("dispatch of %s failed", tool_name)
            return ToolResult(f"Internal error while calling '{tool_name}': {exc}", True), "transport_error"
        payload = truncate(outcome.payload, self.truncation_cap)
        if outcome.ok:
            return ToolResult(payload), outcome.status
        if outcome.status == "upstream_error":
            code = f" (status {outcome.upstream_code})" if outcome.upstream_code is not None else ""
            return ToolResult(f"Upstream error{code}:\n{payload}", True), outcome.status
        if outcome.status == "transport_error":
            return ToolResult(f"Transport error: {payload}", True), outcome.status
        return ToolResult(f"Validation error: {payload}", True), outcome.status

    # -- JSON-RPC ---------------------------------------------------------

    def handle_line(self, session: GatewaySession, line: str | bytes) -> dict[str, Any] | None:
        try:
            msg = json.loads(line)
        except ValueError as exc:
            return jsonrpc.error(None, jsonrpc.PARSE_ERROR, f"parse error: {exc}")
        return self.handle(session, msg)

    def handle(self, session: GatewaySession, msg: Any) -> dict[str, Any] | None:
        problem = jsonrpc.envelope_problem(msg)
        if problem:
            msg_id = msg.get("id") if isinstance(msg, dict) else None
            if isinstance(msg_id, (dict, list, bool, float)):
                msg_id = None
            return jsonrpc.error(msg_id, jsonrpc.INVALID_REQUEST, f"invalid request: {problem}")
        with session.lock:
            if jsonrpc.is_notification(msg):
                self._notification(session, msg)
                return None
            try:
                return jsonrpc.result(msg["id"], self._dispatch(session, msg["method"], msg.get("params") or {}))
            except _RpcFailure as exc:
                return jsonrpc.error(msg["id"], exc.code, exc.message, exc.data)
            except Exception as exc:  # noqa: BLE001
                log.exception("internal error handling %s", msg.get("method"))
                return jsonrpc.error(msg["id"], jsonrpc.INTERNAL_ERROR, f"internal error: {exc}")

    def _notification(self, session: GatewaySession, msg: dict[str, Any]) -> None:
        log.debug("notification %s on session %s", msg["method"], session.session_id)

    def _dispatch(self, session: GatewaySession, method: str, params: Any) -> Any:
        if method == "initialize":
            return self.handle_initialize(session, params)
        if method == "ping":
            return {}
        if not session.initialized:
            raise _RpcFailure(jsonrpc.SERVER_NOT_INITIALIZED, "session not initialized; send initialize first")
        if method == "tools/list":
            return self.handle_tools_list()
        if method == "tools/call":
            if not isinstance(params, dict) or not isinstance(params.get("name"), str):
                raise _RpcFailure(jsonrpc.INVALID_PARAMS, "tools/call requires a string 'name'")
            args = params.get("arguments")
            if args is None:
                args = {}
            if not isinstance(args, dict):
                raise _RpcFailure(jsonrpc.INVALID_PARAMS, "tools/call 'arguments' must be an object")
            return self.handle_tools_call(session, params["name"], args).to_mcp()
        raise _RpcFailure(jsonrpc.METHOD_NOT_FOUND, f"method not found: {method}")

    def handle_initialize(self, session: GatewaySession, params: Any) -> dict[str, Any]:
        if session.initialized:
            raise _RpcFailure(jsonrpc.INVALID_REQUEST, "session already initialized")
        version = params.get("protocolVersion") if isinstance(params, dict) else None
        if version not in SUPPORTED_PROTOCOL_VERSIONS:
            raise _RpcFailure(
                jsonrpc.INVALID_PARAMS,
                f"unsupported protocol version {version!r}",
                {"supported": list(SUPPORTED_PROTOCOL_VERSIONS), "requested": version},
            )
        session.initialized = True
        session.protocol_version = version
        return {
            "protocolVersion": version,
            "capabilities": {"tools": {"listChanged": False}},
            "serverInfo": {"name": SERVER_NAME, "version": __version__},
            "instructions": INSTRUCTIONS,
        }

    def handle_tools_list(self) -> dict[str, Any]:
        return {"tools": [TOOL_FINDER, CALL_TOOL]}

    def handle_tools_call(self, session: GatewaySession, name: str, args: dict[str, Any]) -> ToolResult:
        if name == "tool_finder":
            return self.tool_finder(session, args.get("query"), args.get("top_k"))
        if name == "call_tool":
            return self.call_tool(session, args.get("tool_name"), args.get("arguments"))
        hint = ""
        if name in self.registry:
            hint = f" '{name}' is a catalogue tool: call it via call_tool(tool_name='{name}', arguments=...)."
        return ToolResult(f"Unknown gateway tool '{name}'; available: tool_finder, call_tool.{hint}", True)


class _RpcFailure(Exception):
    def __init__(self, code: int, message: str, data: Any = None):
        self.code, self.message, self.data = code, message, data
        super().__init__(message)


def encode(msg: dict[str, Any]) -> str:
    return json.dumps(msg, ensure_ascii=False, separators=(",", ":"))


# ---------------------------------------------------------------------------
# transports


def serve_stdio(gateway: Gateway, instream: IO[str] | None = None, outstream: IO[str] | None = None) -> None:
    """One session per process; NDJSON on stdin/stdout, logs on stderr only."""
    instream = instream or sys.stdin
    outstream = outstream or sys.stdout
    session = gateway.open_session()
    for line in instream:
        if not line.strip():
            continue
        reply = gateway.handle_line(session, line)
        if reply is not None:
            outstream.write(encode(reply) + "\n")
            outstream.flush()


class _GatewayHandler(BaseHTTPRequestHandler):
    server: GatewayHTTPServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt: str, *args: Any) -> None:
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: dict[str, Any] | None, session_id: str | None = None) -> None:
        data = encode(body).encode("utf-8") if body is not None else b""
        self.send_response(status)
        if body is not None:
            self.send_header("Content-Type", "application/json")
        if session_id:
            self.send_header(SESSION_HEADER, session_id)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self) -> None:  # noqa: N802
        gateway = self.server.gateway
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        try:
            msg = json.loads(raw)
        except ValueError as exc:
            self._send(400, jsonrpc.error(None, jsonrpc.PARSE_ERROR, f"parse error: {exc}"))
            return
        sid = self.headers.get(SESSION_HEADER)
        if sid:
            session = gateway.sessions.get(sid)
            if session is None:
                self._send(404, jsonrpc.error(msg.get("id") if isinstance(msg, dict) else None, jsonrpc.INVALID_REQUEST, "unknown session"))
                return
        elif isinstance(msg, dict) and msg.get("method") == "initialize":
            session = gateway.open_session()
        else:
            self._send(400, jsonrpc.error(msg.get("id") if isinstance(msg, dict) else None, jsonrpc.INVALID_REQUEST, f"missing {SESSION_HEADER} header"))
            return
        reply = gateway.handle(session, msg)
        if not session.initialized:
            # a failed initialize must not leave a half-open session behind
            gateway.close_session(session.session_id)
            self._send(200 if reply is not None else 202, reply)
            return
        if reply is None:
            self._send(202, None, session.session_id)
        else:
            self._send(200, reply, session.session_id)

    def do_DELETE(self) -> None:  # noqa: N802
        sid = self.headers.get(SESSION_HEADER)
        if sid and sid in self.server.gateway.sessions:
            self.server.gateway.close_session(sid)
            self._send(204, None)
        else:
            self._send(404, None)

    def do_GET(self) -> None:  # noqa: N802
        self._send(405, None)


class GatewayHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], gateway: Gateway):
        super().__init__(address, _GatewayHandler)
        self.gateway = gateway

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}/mcp"


def make_http_server(gateway: Gateway, host: str = "127.0.0.1", port: int = 8765) -> GatewayHTTPServer:
    return GatewayHTTPServer((host, port), gateway)
