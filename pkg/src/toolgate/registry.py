"""The namespaced tool collection, its NDJSON persistence and summary stats."""

from __future__ import annotations

import json
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .errors import DuplicateToolError, IncompatibleFormatError, RegistryIntegrityError
from .toolspec import ToolSpec

FORMAT_VERSION = 1
COMPLEX_TYPES = ("array", "object")


def utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def dump_line(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class ToolRegistry:
    """Immutable, name-sorted map of tools.

    Mutation is rebuild-and-swap: ``add_tools`` returns a new registry and
    leaves the receiver untouched.
    """

    tools: dict[str, ToolSpec] = field(default_factory=dict)
    created_at: str = field(default_factory=utc_now)
    format_version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        for key, spec in self.tools.items():
            if key != spec.name:
                raise ValueError(f"registry key {key!r} != tool name {spec.name!r}")
        object.__setattr__(self, "tools", dict(sorted(self.tools.items())))

    @property
    def services(self) -> set[str]:
        return {t.service for t in self.tools.values()}

    def __len__(self) -> int:
        return len(self.tools)

    def __iter__(self) -> Iterator[ToolSpec]:
        return iter(self.tools.values())

    def __contains__(self, name: object) -> bool:
        return name in self.tools

    def get(self, name: str) -> ToolSpec | None:
        return self.tools.get(name)

    def names(self) -> list[str]:
        return list(self.tools)

    def add_tools(self, specs: Iterable[ToolSpec]) -> ToolRegistry:
        """Return a new registry containing ``specs`` too (all or nothing)."""
        specs = list(specs)
        seen: dict[str, ToolSpec] = {}
        for spec in specs:
            prior = self.tools.get(spec.name) or seen.get(spec.name)
            if prior is not None:
                raise DuplicateToolError(
                    f"duplicate tool name {spec.name!r}: "
                    f"{prior.service} ({prior.binding.describe()}) and "
                    f"{spec.service} ({spec.binding.describe()})"
                )
            seen[spec.name] = spec
        return ToolRegistry({**self.tools, **seen}, self.created_at, self.format_version)


def add_tools(registry: ToolRegistry, specs: Iterable[ToolSpec]) -> ToolRegistry:
    return registry.add_tools(specs)


def save(registry: ToolRegistry, path: str | Path) -> None:
    header = {
        "format_version": registry.format_version,
        "created_at": registry.created_at,
        "tool_count": len(registry),
        "services": sorted(registry.services),
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_line(header) + "\n")
        for spec in registry:
            fh.write(dump_line(spec.to_dict()) + "\n")
    tmp.replace(path)


def read_ndjson(path: str | Path, kind: str) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    """Read a header + records NDJSON file, checking version and integrity."""
    data = Path(path).read_text(encoding="utf-8")
    if not data.strip():
        raise RegistryIntegrityError(f"{kind} file {path} is empty")
    if not data.endswith("\n"):
        raise RegistryIntegrityError(f"{kind} file {path} is truncated (no final newline)")
    lines = data.splitlines()
    records = []
    for i, line in enumerate(lines, start=1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise RegistryIntegrityError(f"{kind} file {path}: corrupt record on line {i}: {exc.msg}") from exc
    header, body = records[0], records[1:]
    if not isinstance(header, dict) or "format_version" not in header:
        raise RegistryIntegrityError(f"{kind} file {path} has no header record")
    version = header["format_version"]
    if version != FORMAT_VERSION:
        raise IncompatibleFormatError(
            f"{kind} file {path} has format_version {version}; this build supports {FORMAT_VERSION}"
        )
    expected = header.get("count", header.get("tool_count"))
    if expected is not None and expected != len(body):
        raise RegistryIntegrityError(f"{kind} file {path} is truncated: header says {expected} records, found {len(body)}")
    return header, body


def load(path: str | Path) -> ToolRegistry:
    header, body = read_ndjson(path, "registry")
    try:
        specs = [ToolSpec.from_dict(rec) for rec in body]
    except (KeyError, TypeError, ValueError) as exc:
        raise RegistryIntegrityError(f"registry file {path}: invalid tool record: {exc}") from exc
    tools: dict[str, ToolSpec] = {}
    for spec in specs:
        if spec.name in tools:
            raise RegistryIntegrityError(f"registry file {path}: duplicate tool {spec.name!r}")
        tools[spec.name] = spec
    return ToolRegistry(tools, header.get("created_at", ""), header["format_version"])


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class ServiceStats:
    tool_count: int
    mean_args: float
    max_args: int
    complex_fraction: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool_count": self.tool_count,
            "mean_args": self.mean_args,
            "max_args": self.max_args,
            "complex_fraction": self.complex_fraction,
        }


@dataclass(frozen=True)
class RegistryStats(ServiceStats):
    per_service: dict[str, ServiceStats] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out = super().to_dict()
        out["per_service"] = {k: v.to_dict() for k, v in sorted(self.per_service.items())}
        return out


def is_complex_schema(schema: Any) -> bool:
    if not isinstance(schema, dict):
        return False
    t = schema.get("type")
    types = t if isinstance(t, list) else [t]
    return any(x in COMPLEX_TYPES for x in types)


def is_complex_tool(spec: ToolSpec) -> bool:
    return any(is_complex_schema(s) for s in spec.arguments.get("properties", {}).values())


def _summarise(specs: list[ToolSpec]) -> ServiceStats:
    if not specs:
        return ServiceStats(0, 0.0, 0, 0.0)
    counts = [len(s.argument_names) for s in specs]
    n_complex = sum(1 for s in specs if is_complex_tool(s))
    return ServiceStats(len(specs), sum(counts) / len(specs), max(counts), n_complex / len(specs))


def compute_stats(registry: ToolRegistry) -> RegistryStats:
    """Argument-count and complex-argument statistics, overall and per service."""
    specs = list(registry)
    by_service: dict[str, list[ToolSpec]] = {}
    for s in specs:
        by_service.setdefault(s.service, []).append(s)
    total = _summarise(specs)
    return RegistryStats(
        total.tool_count,
        total.mean_args,
        total.max_args,
        total.complex_fraction,
        per_service={k: _summarise(v) for k, v in by_service.items()},
    )
