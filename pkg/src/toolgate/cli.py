"""``toolgate`` command line: compile, index, serve, search, call, stats, replay, score.

Exit codes: 0 success, 1 operational error, 2 usage error.  Diagnostics go
to stderr; ``--json`` output on stdout is always valid JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .errors import ToolgateError
from .harness import aggregate_report, load_task, postprocess_jsonl, postprocess_transcript, read_trace, DEFAULT_LOCAL_TOOLS
from .registry import ToolRegistry, compute_stats, load, save, utc_now
from .retrieval import DEFAULT_TOP_K, EmbedderConfig, RetrievalQuery, build_index, load_index, make_embedder, save_index, search
from .spec_compiler import compile_document, parse_document

log = logging.getLogger("toolgate")

OPENAI_EMBEDDINGS_URL = "https://api.openai.com/v1/embeddings"


def _emit_json(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _created_at(explicit: str | None) -> str:
    if explicit:
        return explicit
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        return datetime.fromtimestamp(int(epoch), timezone.utc).isoformat()
    return utc_now()


def _per_spec(values: list[str] | None, n: int, flag: str) -> list[str | None]:
    if not values:
        return [None] * n
    if len(values) == 1:
        return values * n
    if len(values) != n:
        raise ToolgateError(f"{flag} given {len(values)} times for {n} specs; give it once or once per spec")
    return list(values)


def cmd_compile(args: argparse.Namespace) -> int:
    specs = [Path(p) for p in args.specs]
    services = _per_spec(args.service, len(specs), "--service")
    bases = _per_spec(args.base_url, len(specs), "--base-url")
    registry = ToolRegistry(created_at=_created_at(args.created_at))
    errors: list[str] = []
    counts: dict[str, int] = {}
    for path, service, base in zip(specs, services, bases):
        service = service or path.stem
        try:
            raw = path.read_bytes()
            fmt = "json" if path.suffix.lower() == ".json" else "yaml" if path.suffix.lower() in (".yaml", ".yml") else None
            doc = parse_document(raw, fmt)
            base_url = base or (doc.servers[0] if doc.servers else None)
            if not base_url:
                raise ToolgateError("no base URL: pass --base-url or declare servers in the document")
            tools = compile_document(doc, service, base_url)
            registry = registry.add_tools(tools)
            counts[service] = counts.get(service, 0) + len(tools)
        except (ToolgateError, OSError) as exc:
            errors.append(f"{path}: {exc}")
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return 1
    save(registry, args.out)
    if args.json:
        _emit_json({"registry": str(args.out), "services": counts, "tool_count": len(registry)})
    else:
        for service, n in counts.items():
            print(f"{service}: {n} tools")
    return 0


def _embedder_config(args: argparse.Namespace) -> EmbedderConfig:
    if args.provider == "remote":
        return EmbedderConfig(
            provider="remote",
            dimension=args.dimension,
            endpoint=args.endpoint or OPENAI_EMBEDDINGS_URL,
            model=args.model,
            auth_env=args.auth_env,
            batch_size=args.batch_size,
        )
    return EmbedderConfig(dimension=args.dimension or 256, seed=args.seed, batch_size=args.batch_size)


def cmd_index(args: argparse.Namespace) -> int:
    registry = load(args.registry)
    cfg = _embedder_config(args)
    index = build_index(registry, cfg)
    save_index(index, args.out)
    if args.json:
        _emit_json({"index": str(args.out), "tools": len(index), "dimension": index.dimension, "fingerprint": index.fingerprint})
    else:
        print(f"indexed {len(index)} tools (dimension {index.dimension}, embedder {index.fingerprint})")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .config import build_gateway, load_config
    from .gateway import make_http_server, serve_stdio

    gateway = build_gateway(load_config(args.config))
    try:
        if args.transport == "stdio":
            serve_stdio(gateway)
        else:
            server = make_http_server(gateway, args.host, args.port)
            print(f"serving MCP on {server.url}", file=sys.stderr, flush=True)
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                pass
            finally:
                server.server_close()
    finally:
        gateway.dispatcher.close()
        if gateway.trace:
            gateway.trace.close()
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    index = load_index(args.index)
    registry = load(args.registry) if args.registry else None
    result = search(index, RetrievalQuery(args.query, args.k), make_embedder(index.config))
    if args.json:
        _emit_json({"query": result.query_echo, "hits": [{"name": h.name, "score": h.score} for h in result.hits]})
        return 0
    for rank, hit in enumerate(result.hits, start=1):
        line = f"{rank:>3}. {hit.score:.6f}  {hit.name}"
        if registry is not None and hit.name in registry:
            line += f"  - {registry.tools[hit.name].description.splitlines()[0]}"
        print(line)
    return 0


def cmd_call(args: argparse.Namespace) -> int:
    from .config import build_gateway, load_config

    try:
        arguments = json.loads(args.arguments)
    except ValueError as exc:
        raise ToolgateError(f"arguments are not valid JSON: {exc}") from exc
    gateway = build_gateway(load_config(args.config))
    try:
        session = gateway.open_session()
        session.mode = "permissive"
        result = gateway.call_tool(session, args.tool, arguments)
    finally:
        gateway.dispatcher.close()
    if args.json:
        _emit_json(result.to_mcp())
    else:
        print(result.text)
    return 1 if result.is_error else 0


def cmd_stats(args: argparse.Namespace) -> int:
    stats = compute_stats(load(args.registry))
    if args.json:
        _emit_json(stats.to_dict())
        return 0
    rows = [("all", stats)] + sorted(stats.per_service.items())
    print(f"{'service':<16} {'tools':>7} {'mean args':>10} {'max args':>9} {'complex':>8}")
    for label, s in rows:
        print(f"{label:<16} {s.tool_count:>7} {s.mean_args:>10.2f} {s.max_args:>9} {s.complex_fraction:>8.2%}")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    registry = load(args.registry)
    local = set(DEFAULT_LOCAL_TOOLS) | set(args.allow or [])
    text = Path(args.transcript).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        messages = json.loads(text)
        result = postprocess_transcript(messages, registry.names(), local)
        rendered = json.dumps(result.messages, ensure_ascii=False, indent=2) + "\n"
        rewrites = result.rewrites
    else:
        rendered, rewrites = postprocess_jsonl(text, registry.names(), local)
    if args.out:
        Path(args.out).write_text(rendered, encoding="utf-8")
    if args.json:
        _emit_json({"rewrites": rewrites, "output": str(args.out) if args.out else None})
    else:
        if not args.out:
            sys.stdout.write(rendered)
        print(f"{rewrites} tool calls rewritten", file=sys.stderr)
    return 0


def _collect(paths: list[str], pattern: str) -> list[Path]:
    out: list[Path] = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob(pattern)) if p.is_dir() else [p])
    return out


def cmd_score(args: argparse.Namespace) -> int:
    tasks = [load_task(p) for p in _collect(args.tasks, "*.json")]
    traces = [read_trace(p) for p in _collect(args.traces, "*.jsonl")]
    report = aggregate_report(tasks, traces)
    if args.json:
        _emit_json(report.to_dict())
        return 0
    for row in report.per_task:
        print(
            f"{row['task_id']}: score {row['score']:.3f}  completed {'yes' if row['completed'] else 'no'}"
            f"  recall {row['retrieval_recall']:.3f}  steps {row['steps']}"
        )
    print()
    print(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toolgate", description="Federated MCP tool gateway.")
    p.add_argument("--version", action="version", version=f"toolgate {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile OpenAPI documents into a tool registry")
    c.add_argument("specs", nargs="+", help="OpenAPI 3.x files (JSON or YAML)")
    c.add_argument("--service", action="append", help="service label (once, or once per spec)")
    c.add_argument("--base-url", action="append", help="upstream base URL (once, or once per spec)")
    c.add_argument("--out", required=True, help="registry file to write")
    c.add_argument("--created-at", help="timestamp recorded in the registry header")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_compile)

    i = sub.add_parser("index", help="embed every registered tool")
    i.add_argument("--registry", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--provider", choices=["local_fallback", "remote"], default="local_fallback")
    i.add_argument("--dimension", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--model", default="text-embedding-3-large")
    i.add_argument("--endpoint")
    i.add_argument("--auth-env", default="OPENAI_API_KEY")
    i.add_argument("--batch-size", type=int, default=64)
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_index)

    s = sub.add_parser("serve", help="run the gateway MCP server")
    s.add_argument("--config", required=True)
    s.add_argument("--transport", choices=["stdio", "http"], default="stdio")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.set_defaults(func=cmd_serve)

    q = sub.add_parser("search", help="top-k tool search")
    q.add_argument("query")
    q.add_argument("--index", required=True)
    q.add_argument("--registry")
    q.add_argument("-k", type=int, default=DEFAULT_TOP_K)
    q.add_argument("--json", action="store_true")
    q.set_defaults(func=cmd_search)

    k = sub.add_parser("call", help="call one tool through the gateway path")
    k.add_argument("tool")
    k.add_argument("arguments", help="JSON object")
    k.add_argument("--config", required=True)
    k.add_argument("--json", action="store_true")
    k.set_defaults(func=cmd_call)

    t = sub.add_parser("stats", help="tool characteristics of a registry")
    t.add_argument("registry")
    t.add_argument("--json", action="store_true")
    t.set_defaults(func=cmd_stats)

    r = sub.add_parser("replay", help="rewrite direct upstream tool calls in a transcript into call_tool calls")
    r.add_argument("transcript", help="JSON array or JSONL of messages")
    r.add_argument("--registry", required=True)
    r.add_argument("--allow", action="append", help="extra local tool name never rewritten")
    r.add_argument("--out")
    r.add_argument("--json", action="store_true")
    r.set_defaults(func=cmd_replay)

    e = sub.add_parser("score", help="score run traces against task records")
    e.add_argument("--tasks", nargs="+", required=True, help="task JSON files or directories")
    e.add_argument("--traces", nargs="+", required=True, help="trace JSONL files or directories")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_score)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "index" and args.dimension is not None and args.dimension < 1:
        parser.error("--dimension must be positive")
    if args.command == "search" and args.k < 1:
        parser.error("-k must be >= 1")
    try:
        return args.func(args)
    except (ToolgateError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
