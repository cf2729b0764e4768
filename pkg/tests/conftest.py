from __future__ import annotations

import json
import os
import subprocess
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from toolgate.registry import ToolRegistry
from toolgate.spec_compiler import compile_document, parse_document

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (passed, line); filled by test_acceptance, echoed in the summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n][1])
GITLAB_SPEC = FIXTURES / "gitlab_openapi.yaml"
GITLAB_ENDPOINTS = 12  # hand-counted in the fixture


@pytest.fixture(scope="session")
def gitlab_doc():
    return parse_document(GITLAB_SPEC.read_bytes(), "yaml")


@pytest.fixture(scope="session")
def gitlab_tools(gitlab_doc):
    return compile_document(gitlab_doc, "gitlab", "http://gitlab.example.test/api/v4")


@pytest.fixture(scope="session")
def gitlab_registry(gitlab_tools):
    return ToolRegistry(created_at="2025-01-01T00:00:00+00:00").add_tools(gitlab_tools)


class StubUpstream:
    """Records every request; replies from a (method, path) -> (status, body) table."""

    def __init__(self):
        self.requests: list[dict] = []
        self.routes: dict[tuple[str, str], tuple[int, str]] = {}
        self.default = (200, '{"ok":true}')
        stub = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def _handle(self):
                length = int(self.headers.get("Content-Length") or 0)
                body = self.rfile.read(length) if length else b""
                stub.requests.append(
                    {"method": self.command, "path": self.path, "headers": dict(self.headers), "body": body}
                )
                route = self.path.split("?", 1)[0]
                status, text = stub.routes.get((self.command, route), stub.default)
                data = text.encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                if self.command != "HEAD":
                    self.wfile.write(data)

            do_GET = do_POST = do_PUT = do_PATCH = do_DELETE = do_HEAD = do_OPTIONS = _handle

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self._thread = threading.Thread(target=self.server.serve_forever, args=(0.05,), daemon=True)
        self._thread.start()

    def json_body(self, i: int = -1):
        return json.loads(self.requests[i]["body"])

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def upstream():
    stub = StubUpstream()
    yield stub
    stub.close()


AZURE_SPEC = FIXTURES / "azure_openapi.yaml"
STUB_MCP = FIXTURES / "stub_mcp_server.py"


@pytest.fixture(scope="session")
def azure_tools():
    return compile_document(parse_document(AZURE_SPEC.read_bytes(), "yaml"), "azure", None)


@pytest.fixture(scope="session")
def two_service_registry(azure_tools, gitlab_tools):
    return ToolRegistry(created_at="2025-01-01T00:00:00+00:00").add_tools(azure_tools).add_tools(gitlab_tools)


GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    from toolgate.cli import main

    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def built(tmp_path, capsys):
    reg, idx = tmp_path / "tools.jsonl", tmp_path / "index.jsonl"
    code, _, _ = run(capsys, "compile", AZURE_SPEC, GITLAB_SPEC, "--service", "azure", "--service", "gitlab",
                     "--base-url", "http://azure.invalid", "--base-url", "http://gitlab.invalid", "--out", reg, "--created-at", "2025-01-01T00:00:00+00:00")
    assert code == 0
    assert run(capsys, "index", "--registry", reg, "--out", idx)[0] == 0
    return reg, idx


def write_config(tmp_path, reg, idx, upstream_url, **extra):
    cfg = {"registry": str(reg), "index": str(idx), "services": {"azure": {"base_url": upstream_url}, "gitlab": {"base_url": upstream_url}}, **extra}
    path = tmp_path / "gateway.yaml"
    import yaml

    path.write_text(yaml.safe_dump(cfg))
    return path



GOLDEN_REQUESTS = [
    {"jsonrpc": "2.0", "id": 1, "method": "initialize", "params": {"protocolVersion": "2025-06-18", "capabilities": {}, "clientInfo": {"name": "golden", "version": "1"}}},
    {"jsonrpc": "2.0", "method": "notifications/initialized"},
    {"jsonrpc": "2.0", "id": 2, "method": "tools/list"},
    {"jsonrpc": "2.0", "id": 3, "method": "tools/call", "params": {"name": "tool_finder", "arguments": {"query": "delete the virtual machine", "top_k": 3}}},
    {"jsonrpc": "2.0", "id": 4, "method": "tools/call", "params": {"name": "call_tool", "arguments": {"tool_name": "azure_delete_vm", "arguments": {"vm_name": "vm-7"}}}},
    {"jsonrpc": "2.0", "id": 5, "method": "tools/call", "params": {"name": "call_tool", "arguments": {"tool_name": "azure_get_vm", "arguments": {"vm_name": "missing"}}}},
    {"jsonrpc": "2.0", "id": 6, "method": "tools/call", "params": {"name": "call_tool", "arguments": {"tool_name": "azure_delete_vm", "arguments": {}}}},
    {"jsonrpc": "2.0", "id": 7, "method": "tools/call", "params": {"name": "call_tool", "arguments": {"tool_name": "azure_reboot_vm", "arguments": {}}}},
    {"jsonrpc": "2.0", "id": 8, "method": "resources/list"},
]


def serve_session(config, requests):
    env = {**os.environ, "PYTHONUNBUFFERED": "1"}
    proc = subprocess.run(
        [sys.executable, "-m", "toolgate", "serve", "--config", str(config), "--transport", "stdio"],
        input="".join(json.dumps(r) + "\n" for r in requests),
        capture_output=True,
        text=True,
        timeout=60,
        env=env,
    )
    assert proc.returncode == 0, proc.stderr
    return proc.stdout
