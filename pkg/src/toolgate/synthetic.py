"""Synthetic OpenAPI documents and registries for scale and property experiments."""

from __future__ import annotations

import random
from typing import Any

from .registry import ToolRegistry
from .spec_compiler import ApiDocument, compile_document, parse_document

RESOURCES = """virtual_machine disk network_interface virtual_network subnet storage_account
blob_container key_vault secret certificate role_assignment managed_identity resource_group
subscription function_app web_app app_service_plan cosmos_account database container_registry
kubernetes_cluster load_balancer public_ip dns_zone firewall_rule backup_vault snapshot image
project issue merge_request pipeline branch commit label milestone wiki release runner
room message channel user group team file folder share upload download tag policy alert
metric log_workspace dashboard deployment template webhook token quota region""".split()

ACTIONS = """list get create update delete patch start stop restart search export import
assign revoke attach detach move copy archive restore validate""".split()

WORDS = """the a of to for and in on with from by all given specific resource account
configuration settings properties status details current existing new remote local primary
secondary default custom optional required name identifier location region version tags
permissions access policy rule filter page size limit offset sort order query result items
returns creates deletes updates lists starts stops moves copies validates checks enables
disables""".split()

METHOD_FOR = {
    "list": "get", "get": "get", "search": "get", "export": "get", "validate": "post",
    "create": "post", "import": "post", "assign": "post", "attach": "post", "copy": "post",
    "update": "put", "restore": "post", "move": "post", "archive": "post",
    "patch": "patch", "delete": "delete", "revoke": "delete", "detach": "delete",
    "start": "post", "stop": "post", "restart": "post",
}


def _sentence(rng: random.Random, n: int) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n)).capitalize() + "."


def _arg_schema(rng: random.Random, depth: int = 0) -> dict[str, Any]:
    roll = rng.random()
    if roll < 0.10 and depth < 2:
        return {"type": "array", "items": _arg_schema(rng, depth + 1)}
    if roll < 0.18 and depth < 2:
        return {
            "type": "object",
            "properties": {f"f{j}": _arg_schema(rng, depth + 1) for j in range(rng.randint(1, 3))},
        }
    return rng.choice([{"type": "string"}, {"type": "integer"}, {"type": "boolean"}, {"type": "number"}])


def synthetic_openapi(n_operations: int, seed: int = 0, title: str = "synthetic") -> dict[str, Any]:
    """An OpenAPI 3.0 document with exactly ``n_operations`` operations.

    Every operation sits on its own path so counts are exact by construction.
    """
    rng = random.Random(seed)
    paths: dict[str, Any] = {}
    for i in range(n_operations):
        resource = rng.choice(RESOURCES)
        action = rng.choice(ACTIONS)
        method = METHOD_FOR[action]
        path = f"/{resource}s/{{{resource}_id}}/ops{i}"
        params: list[dict[str, Any]] = [
            {"name": f"{resource}_id", "in": "path", "required": True, "schema": {"type": "string"}}
        ]
        for j in range(rng.randint(0, 4)):
            params.append({"name": f"q{j}", "in": "query", "schema": _arg_schema(rng, 1)})
        op: dict[str, Any] = {
            "operationId": f"{action}_{resource}_{i}",
            "summary": f"{action.capitalize()} {resource.replace('_', ' ')}",
            "description": _sentence(rng, rng.randint(5, 15)),
            "parameters": params,
            "responses": {"200": {"description": "OK"}},
        }
        if method in ("post", "put", "patch"):
            props = {f"field_{k}": _arg_schema(rng) for k in range(rng.randint(1, 8))}
            op["requestBody"] = {"content": {"application/json": {"schema": {"type": "object", "properties": props}}}}
        paths[path] = {method: op}
    return {"openapi": "3.0.3", "info": {"title": title, "version": "1"}, "paths": paths}


def synthetic_document(n_operations: int, seed: int = 0) -> ApiDocument:
    import json

    return parse_document(json.dumps(synthetic_openapi(n_operations, seed)), "json")


def synthetic_registry(
    n_tools: int,
    seed: int = 0,
    services: tuple[str, ...] = ("azure", "gitlab", "rocketchat"),
    created_at: str = "2025-01-01T00:00:00+00:00",
) -> ToolRegistry:
    """Compile synthetic documents into a registry of exactly ``n_tools`` tools."""
    registry = ToolRegistry(created_at=created_at)
    share, rest = divmod(n_tools, len(services))
    for k, service in enumerate(services):
        n = share + (1 if k < rest else 0)
        if n:
            doc = synthetic_document(n, seed * 1000 + k)
            registry = registry.add_tools(compile_document(doc, service, f"http://{service}.invalid"))
    return registry
