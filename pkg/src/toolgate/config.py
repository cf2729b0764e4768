"""Gateway configuration: a YAML file, secrets referenced by env-var name only."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError
from .executor import Dispatcher, DownstreamDescriptor, ServiceConfig
from .gateway import DEFAULT_TRUNCATION_CAP, Gateway
from .harness import TraceWriter
from .registry import load as load_registry
from .retrieval import DEFAULT_TOP_K, EmbedderConfig, load_index, make_embedder


@dataclass
class GatewayConfig:
    registry: Path
    index: Path
    embedder: EmbedderConfig | None = None
    mode: str = "permissive"
    top_k: int = DEFAULT_TOP_K
    truncation_cap: int = DEFAULT_TRUNCATION_CAP
    services: dict[str, ServiceConfig] = field(default_factory=dict)
    downstream: list[DownstreamDescriptor] = field(default_factory=list)
    trace: Path | None = None
    trace_task_id: str | None = None


def _typed(cls: type, data: Any, where: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def parse_config(data: Any, base_dir: Path) -> GatewayConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config: top level must be a mapping")
    allowed = {f.name for f in fields(GatewayConfig)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"config: unknown field(s) {', '.join(unknown)}")
    for key in ("registry", "index"):
        if key not in data:
            raise ConfigurationError(f"config: missing required field '{key}'")

    def path(key: str) -> Path:
        p = Path(str(data[key]))
        return p if p.is_absolute() else base_dir / p

    cfg = GatewayConfig(registry=path("registry"), index=path("index"))
    if not cfg.registry.exists():
        raise ConfigurationError(f"config field 'registry': {cfg.registry} does not exist")
    if not cfg.index.exists():
        raise ConfigurationError(f"config field 'index': {cfg.index} does not exist")
    if data.get("embedder") is not None:
        cfg.embedder = _typed(EmbedderConfig, data["embedder"], "config field 'embedder'")
    cfg.mode = data.get("mode", cfg.mode)
    if cfg.mode not in ("permissive", "strict"):
        raise ConfigurationError(f"config field 'mode': must be permissive or strict, got {cfg.mode!r}")
    cfg.top_k = data.get("top_k", cfg.top_k)
    if isinstance(cfg.top_k, bool) or not isinstance(cfg.top_k, int) or cfg.top_k < 1:
        raise ConfigurationError("config field 'top_k': must be an integer >= 1")
    cfg.truncation_cap = data.get("truncation_cap", cfg.truncation_cap)
    if not isinstance(cfg.truncation_cap, int) or cfg.truncation_cap < 1:
        raise ConfigurationError("config field 'truncation_cap': must be a positive integer")
    services = data.get("services") or {}
    if not isinstance(services, dict):
        raise ConfigurationError("config field 'services': expected a mapping")
    cfg.services = {str(k): _typed(ServiceConfig, v or {}, f"config field 'services.{k}'") for k, v in services.items()}
    downstream = data.get("downstream") or []
    if not isinstance(downstream, list):
        raise ConfigurationError("config field 'downstream': expected a list")
    cfg.downstream = [_typed(DownstreamDescriptor, d, f"config field 'downstream[{i}]'") for i, d in enumerate(downstream)]
    if data.get("trace"):
        cfg.trace = path("trace")
    cfg.trace_task_id = data.get("trace_task_id")
    return cfg


def load_config(path: str | Path) -> GatewayConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(data, path.parent)


def build_gateway(cfg: GatewayConfig) -> Gateway:
    registry = load_registry(cfg.registry)
    index = load_index(cfg.index)
    embedder_cfg = cfg.embedder or index.config
    trace = TraceWriter(cfg.trace, task_id=cfg.trace_task_id) if cfg.trace else None
    gateway = Gateway(
        registry,
        index,
        make_embedder(embedder_cfg),
        Dispatcher(cfg.services),
        mode=cfg.mode,  # type: ignore[arg-type]
        default_top_k=cfg.top_k,
        truncation_cap=cfg.truncation_cap,
        trace=trace,
    )
    for desc in cfg.downstream:
        gateway.register_downstream(desc)
    return gateway
