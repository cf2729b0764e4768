"""Scale smoke test: compile, index and serve a large synthetic registry.

Writes synthetic OpenAPI documents, runs ``toolgate compile`` and
``toolgate index`` on them, serves the gateway over HTTP, and drives mixed
tool_finder / call_tool traffic from concurrent sessions against a stub
upstream.  Prints a JSON summary; exits non-zero on any failed request or
when peak RSS exceeds the budget.

    python scripts/scale_smoke.py --tools 18000 --sessions 4 --requests 100
"""

from __future__ import annotations

import argparse
import contextlib
import json
import random
import resource
import sys
import tempfile
import threading
import time
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import yaml

from toolgate.cli import main as cli
from toolgate.config import build_gateway, load_config
from toolgate.gateway import make_http_server
from toolgate.mcp_client import SESSION_HEADER
from toolgate.synthetic import synthetic_openapi

SERVICES = ("azure", "gitlab", "rocketchat")
# peak RSS measured at ~380 MiB for 18k tools at D=256; budget leaves ~2.5x headroom
MEMORY_BUDGET_MIB = 1024


class _Ok(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, *args):
        pass

    def _reply(self):
        n = int(self.headers.get("Content-Length") or 0)
        if n:
            self.rfile.read(n)
        body = b'{"ok":true}'
        self.send_response(200)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    do_GET = do_POST = do_PUT = do_PATCH = do_DELETE = _reply


def peak_rss_mib() -> float:
    # VmHWM belongs to this address space; ru_maxrss would also count a
    # large parent's high-water mark, since it survives fork/exec
    try:
        for line in Path("/proc/self/status").read_text().splitlines():
            if line.startswith("VmHWM:"):
                return int(line.split()[1]) / 1024
    except OSError:
        pass
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024


def dummy_args(schema: dict) -> dict:
    fill = {"string": "x", "integer": 1, "number": 1.5, "boolean": True, "array": [], "object": {}}
    props = schema.get("properties", {})
    return {name: fill.get(props[name].get("type"), "x") for name in schema.get("required", [])}


class Session:
    def __init__(self, url: str):
        self.url, self.sid, self.n = url, None, 0

    def rpc(self, method: str, params: dict) -> dict:
        self.n += 1
        headers = {"Content-Type": "application/json"}
        if self.sid:
            headers[SESSION_HEADER] = self.sid
        data = json.dumps({"jsonrpc": "2.0", "id": self.n, "method": method, "params": params}).encode()
        with urllib.request.urlopen(urllib.request.Request(self.url, data, headers, method="POST"), timeout=60) as resp:
            self.sid = self.sid or resp.headers.get(SESSION_HEADER)
            return json.loads(resp.read())


def run(n_tools: int, sessions: int, requests: int, dimension: int, workdir: Path, seed: int = 0) -> dict:
    timings = {}
    share, rest = divmod(n_tools, len(SERVICES))
    spec_args, service_args = [], []
    for k, service in enumerate(SERVICES):
        path = workdir / f"{service}.json"
        path.write_text(json.dumps(synthetic_openapi(share + (k < rest), seed * 1000 + k, service)))
        spec_args.append(str(path))
        service_args += ["--service", service]
    upstream = ThreadingHTTPServer(("127.0.0.1", 0), _Ok)
    upstream.daemon_threads = True
    threading.Thread(target=upstream.serve_forever, args=(0.05,), daemon=True).start()
    upstream_url = f"http://127.0.0.1:{upstream.server_address[1]}"

    t = time.perf_counter()
    reg, idx = workdir / "tools.jsonl", workdir / "index.jsonl"
    with contextlib.redirect_stdout(sys.stderr):
        compiled = cli(["compile", *spec_args, *service_args, "--base-url", upstream_url, "--out", str(reg), "--created-at", "2025-01-01T00:00:00+00:00"])
    if compiled:
        raise SystemExit("compile failed")
    timings["compile_s"] = time.perf_counter() - t
    t = time.perf_counter()
    with contextlib.redirect_stdout(sys.stderr):
        indexed = cli(["index", "--registry", str(reg), "--out", str(idx), "--dimension", str(dimension)])
    if indexed:
        raise SystemExit("index failed")
    timings["index_s"] = time.perf_counter() - t

    cfg_path = workdir / "gateway.yaml"
    cfg_path.write_text(yaml.safe_dump({"registry": str(reg), "index": str(idx), "services": {s: {"base_url": upstream_url, "retries": 0} for s in SERVICES}}))
    t = time.perf_counter()
    gateway = build_gateway(load_config(cfg_path))
    server = make_http_server(gateway, port=0)
    threading.Thread(target=server.serve_forever, args=(0.05,), daemon=True).start()
    timings["startup_s"] = time.perf_counter() - t

    tool_counts: list[int] = []
    errors: list[str] = []
    done = {"finder": 0, "call": 0}
    lock = threading.Lock()
    per_session = [requests // sessions + (i < requests % sessions) for i in range(sessions)]
    registry = gateway.registry

    def worker(i: int) -> None:
        rng = random.Random(seed + i)
        s = Session(server.url)
        try:
            s.rpc("initialize", {"protocolVersion": "2025-06-18"})
            tools = s.rpc("tools/list", {})["result"]["tools"]
            with lock:
                tool_counts.append(len(tools))
            last_hits: list[str] = []
            for j in range(per_session[i]):
                if j % 2 == 0 or not last_hits:
                    q = f"{rng.choice(['list', 'delete', 'create', 'restart'])} {rng.choice(['virtual machine', 'project', 'channel', 'storage account'])}"
                    res = s.rpc("tools/call", {"name": "tool_finder", "arguments": {"query": q, "top_k": 5}})
                    text = res["result"]["content"][0]["text"]
                    last_hits = [ln.split(". ", 1)[1].split(" (score")[0] for ln in text.splitlines() if ln.startswith("## ")]
                    kind = "finder"
                else:
                    name = rng.choice(last_hits)
                    res = s.rpc("tools/call", {"name": "call_tool", "arguments": {"tool_name": name, "arguments": dummy_args(registry.tools[name].arguments)}})
                    kind = "call"
                if "error" in res or res["result"]["isError"]:
                    raise RuntimeError(f"session {i} request {j} failed: {json.dumps(res)[:300]}")
                with lock:
                    done[kind] += 1
        except Exception as exc:  # noqa: BLE001
            with lock:
                errors.append(str(exc))

    t = time.perf_counter()
    threads = [threading.Thread(target=worker, args=(i,)) for i in range(sessions)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    timings["traffic_s"] = time.perf_counter() - t
    server.shutdown()
    server.server_close()
    upstream.shutdown()
    upstream.server_close()

    rss = peak_rss_mib()
    return {
        "tools": len(registry),
        "dimension": dimension,
        "sessions": sessions,
        "requests_ok": done["finder"] + done["call"],
        "finder_requests": done["finder"],
        "call_requests": done["call"],
        "tools_list_counts": tool_counts,
        "errors": errors,
        "peak_rss_mib": round(rss, 1),
        "memory_budget_mib": MEMORY_BUDGET_MIB,
        "within_budget": rss <= MEMORY_BUDGET_MIB,
        **{k: round(v, 3) for k, v in timings.items()},
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tools", type=int, default=18_000)
    ap.add_argument("--sessions", type=int, default=4)
    ap.add_argument("--requests", type=int, default=100)
    ap.add_argument("--dimension", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        summary = run(args.tools, args.sessions, args.requests, args.dimension, Path(tmp), args.seed)
    print(json.dumps(summary, indent=2))
    ok = not summary["errors"] and summary["within_budget"] and set(summary["tools_list_counts"]) == {2}
    return 0 if ok and summary["requests_ok"] == args.requests else 1


if __name__ == "__main__":
    sys.exit(main())
