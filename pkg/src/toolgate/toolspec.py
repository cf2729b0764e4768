"""Agent-facing tool records and their upstream bindings."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Literal

NAME_RE = re.compile(r"^[a-z0-9_]{1,64}$")
MAX_NAME_LEN = 64
NO_DESCRIPTION = "(no description provided)"

Location = Literal["path", "query", "header", "body"]


@dataclass(frozen=True)
class ArgLocation:
    """Where one tool argument goes in the upstream HTTP request.

    ``name`` is the wire name (path placeholder, query key, header name or
    body property). ``name is None`` with ``location == "body"`` means the
    argument *is* the whole request body.
    """

    location: Location
    name: str | None

    def to_dict(self) -> dict[str, Any]:
        return {"in": self.location, "name": self.name}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ArgLocation:
        return cls(d["in"], d.get("name"))


@dataclass(frozen=True)
class UpstreamBinding:
    kind: Literal["http_endpoint", "mcp_proxy"]
    method: str | None = None
    path: str | None = None
    base_url: str | None = None
    locations: dict[str, ArgLocation] = field(default_factory=dict)
    server_id: str | None = None
    tool: str | None = None

    @classmethod
    def http(cls, method: str, path: str, base_url: str, locations: dict[str, ArgLocation]) -> UpstreamBinding:
        return cls("http_endpoint", method=method.upper(), path=path, base_url=base_url, locations=dict(locations))

    @classmethod
    def proxy(cls, server_id: str, tool: str) -> UpstreamBinding:
        return cls("mcp_proxy", server_id=server_id, tool=tool)

    def describe(self) -> str:
        if self.kind == "http_endpoint":
            return f"{self.method} {self.path}"
        return f"mcp:{self.server_id}/{self.tool}"

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "http_endpoint":
            return {
                "kind": self.kind,
                "method": self.method,
                "path": self.path,
                "base_url": self.base_url,
                "locations": {k: v.to_dict() for k, v in self.locations.items()},
            }
        return {"kind": self.kind, "server_id": self.server_id, "tool": self.tool}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> UpstreamBinding:
        if d["kind"] == "http_endpoint":
            locs = {k: ArgLocation.from_dict(v) for k, v in d.get("locations", {}).items()}
            return cls.http(d["method"], d["path"], d.get("base_url") or "", locs)
        if d["kind"] == "mcp_proxy":
            return cls.proxy(d["server_id"], d["tool"])
        raise ValueError(f"unknown binding kind {d['kind']!r}")


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    arguments: dict[str, Any]
    binding: UpstreamBinding
    service: str

    def __post_init__(self) -> None:
        if not NAME_RE.match(self.name):
            raise ValueError(f"invalid tool name {self.name!r}")
        if self.arguments.get("type") != "object":
            raise ValueError(f"{self.name}: argument schema must be of type object")
        props = self.arguments.get("properties", {})
        missing = [r for r in self.arguments.get("required", []) if r not in props]
        if missing:
            raise ValueError(f"{self.name}: required arguments {missing} not in properties")
        if not self.description:
            object.__setattr__(self, "description", NO_DESCRIPTION)

    @property
    def argument_names(self) -> list[str]:
        return list(self.arguments.get("properties", {}))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "arguments": self.arguments,
            "binding": self.binding.to_dict(),
            "service": self.service,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ToolSpec:
        return cls(
            name=d["name"],
            description=d["description"],
            arguments=d["arguments"],
            binding=UpstreamBinding.from_dict(d["binding"]),
            service=d["service"],
        )
