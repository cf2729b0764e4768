"""Compile OpenAPI 3.x documents into one ToolSpec per endpoint.

The pipeline is ``parse_document`` (syntax, dialect check, internal ``$ref``
resolution, path-template validation) followed by ``compile_document``
(naming, argument flattening, description extraction).  Everything here is a
pure function of its inputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, NamedTuple
from urllib.parse import unquote

import yaml

from .errors import CompileError, ParseError, StructuralError
from .toolspec import MAX_NAME_LEN, NO_DESCRIPTION, ArgLocation, ToolSpec, UpstreamBinding

log = logging.getLogger(__name__)

HTTP_METHODS = ("get", "post", "put", "patch", "delete", "head", "options")
DEFAULT_AUTH_HEADERS = frozenset({"authorization", "proxy-authorization", "cookie"})

_TOP_LEVEL_KEYS = {
    "openapi", "info", "servers", "paths", "components", "security", "tags",
    "externalDocs", "webhooks", "jsonSchemaDialect",
}
_PATH_ITEM_KEYS = {"summary", "description", "servers", "parameters", "$ref", "trace"}
_OPERATION_KEYS = {
    "tags", "summary", "description", "externalDocs", "operationId", "parameters",
    "requestBody", "responses", "callbacks", "deprecated", "security", "servers",
}
_TEMPLATE_PARAM = re.compile(r"\{([^{}/]+)\}")
_TEMPLATE_NAME = re.compile(r"^[A-Za-z0-9_.\-~]+$")


@dataclass(frozen=True)
class Operation:
    """One (path, method) pair with all references resolved.

    ``parameters`` already merges path-item level parameters with the
    operation's own (operation wins on the same ``(name, in)``).
    """

    path: str
    method: str
    spec: dict[str, Any]
    parameters: tuple[dict[str, Any], ...] = ()
    auth_headers: frozenset[str] = DEFAULT_AUTH_HEADERS

    @property
    def operation_id(self) -> str | None:
        op_id = self.spec.get("operationId")
        return op_id if isinstance(op_id, str) and op_id.strip() else None

    @property
    def label(self) -> str:
        return f"{self.method} {self.path}"


@dataclass
class ApiDocument:
    title: str
    version: str
    servers: list[str]
    operations: list[Operation]
    warnings: list[str] = field(default_factory=list)


class FlatParameters(NamedTuple):
    schema: dict[str, Any]
    locations: dict[str, ArgLocation]


# ---------------------------------------------------------------------------
# parsing


def _load(raw: str | bytes, fmt: str | None) -> Any:
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    if fmt is None:
        fmt = "json" if text.lstrip().startswith(("{", "[")) else "yaml"
    if fmt == "json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON: {exc.msg}", exc.lineno, exc.colno) from exc
    if fmt == "yaml":
        try:
            return yaml.safe_load(text)
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark or exc.context_mark
            line = mark.line + 1 if mark else None
            col = mark.column + 1 if mark else None
            raise ParseError(f"malformed YAML: {exc.problem or exc}", line, col) from exc
        except yaml.YAMLError as exc:
            raise ParseError(f"malformed YAML: {exc}") from exc
    raise ValueError(f"unsupported format {fmt!r}")


class _RefResolver:
    """Inline every internal ``#/...`` reference.

    Recursive schemas cannot be inlined fully; the recursive occurrence is
    replaced by a stub object and a warning is recorded.
    """

    def __init__(self, root: dict[str, Any], warnings: list[str]):
        self.root = root
        self.warnings = warnings
        self._memo: dict[str, Any] = {}

    def pointer(self, ref: str) -> Any:
        if not ref.startswith("#"):
            raise StructuralError(f"external reference {ref!r} is not supported")
        node: Any = self.root
        frag = unquote(ref[1:])
        if not frag:
            return node
        for part in frag.lstrip("/").split("/"):
            part = part.replace("~1", "/").replace("~0", "~")
            if isinstance(node, dict) and part in node:
                node = node[part]
            elif isinstance(node, list) and part.isdigit() and int(part) < len(node):
                node = node[int(part)]
            else:
                raise StructuralError(f"unresolvable reference {ref!r}")
        return node

    def resolve(self, node: Any, stack: tuple[str, ...] = ()) -> tuple[Any, bool]:
        """Return (resolved copy, whether a cycle was cut below this node)."""
        if isinstance(node, dict):
            ref = node.get("$ref")
            if isinstance(ref, str):
                if ref in stack:
                    self.warnings.append(f"recursive reference {ref} truncated")
                    return {"type": "object", "description": f"(recursive reference to {ref})"}, True
                if ref in self._memo:
                    target, cut = self._memo[ref], False
                else:
                    target, cut = self.resolve(self.pointer(ref), stack + (ref,))
                    if not cut:
                        self._memo[ref] = target
                siblings = {k: v for k, v in node.items() if k != "$ref"}
                if not siblings:
                    return target, cut
                merged = dict(target) if isinstance(target, dict) else {}
                for k, v in siblings.items():
                    merged[k], c = self.resolve(v, stack)
                    cut = cut or c
                return merged, cut
            out: dict[str, Any] = {}
            cut = False
            for k, v in node.items():
                out[k], c = self.resolve(v, stack)
                cut = cut or c
            return out, cut
        if isinstance(node, list):
            items = [self.resolve(v, stack) for v in node]
            return [v for v, _ in items], any(c for _, c in items)
        return node, False


def _check_template(path: str) -> list[str]:
    stripped = _TEMPLATE_PARAM.sub("", path)
    if "{" in stripped or "}" in stripped:
        raise StructuralError(f"malformed path template {path!r}")
    names = _TEMPLATE_PARAM.findall(path)
    for name in names:
        if not _TEMPLATE_NAME.match(name):
            raise StructuralError(f"malformed path parameter {{{name}}} in {path!r}")
    return names


def _merge_parameters(path_level: list[Any], op_level: list[Any], where: str) -> tuple[dict[str, Any], ...]:
    merged: dict[tuple[str, str], dict[str, Any]] = {}
    for p in list(path_level) + list(op_level):
        if not isinstance(p, dict) or "name" not in p or "in" not in p:
            raise StructuralError(f"{where}: parameter without name/in: {p!r}")
        merged[(p["name"], p["in"])] = p
    return tuple(merged.values())


def _auth_headers(root: dict[str, Any]) -> frozenset[str]:
    names = set(DEFAULT_AUTH_HEADERS)
    schemes = (root.get("components") or {}).get("securitySchemes") or {}
    for scheme in schemes.values():
        if isinstance(scheme, dict) and scheme.get("type") == "apiKey" and scheme.get("in") == "header":
            names.add(str(scheme.get("name", "")).lower())
    return frozenset(names)


def parse_document(raw: str | bytes, format: str | None = None) -> ApiDocument:
    """Parse an OpenAPI 3.x document (JSON or YAML) into an ApiDocument.

    ``format`` may be ``"json"``, ``"yaml"`` or ``None`` to sniff.  Unknown
    keys produce warnings; structural violations raise StructuralError.
    """
    root = _load(raw, format)
    if not isinstance(root, dict):
        raise StructuralError("document root must be a mapping")
    if "swagger" in root:
        raise StructuralError(f"Swagger {root['swagger']} documents are not supported; convert to OpenAPI 3.x")
    warnings: list[str] = []
    dialect = str(root.get("openapi", ""))
    if not dialect:
        warnings.append("missing 'openapi' version field; assuming 3.x")
    elif not dialect.startswith("3."):
        raise StructuralError(f"unsupported OpenAPI version {dialect!r}")
    if "paths" not in root:
        raise StructuralError("document has no 'paths' section")
    for key in root:
        if key not in _TOP_LEVEL_KEYS and not str(key).startswith("x-"):
            warnings.append(f"unknown top-level key {key!r}")

    resolver = _RefResolver(root, warnings)
    info = root.get("info") or {}
    servers = [s["url"] for s in root.get("servers") or [] if isinstance(s, dict) and "url" in s]
    auth = _auth_headers(root)
    paths = root.get("paths") or {}
    if not isinstance(paths, dict):
        raise StructuralError("'paths' must be a mapping")

    operations: list[Operation] = []
    for path, item in paths.items():
        path = str(path)
        if not path:
            raise StructuralError("empty path key")
        if not isinstance(item, dict):
            raise StructuralError(f"path item {path!r} must be a mapping")
        item, _ = resolver.resolve(item)
        template_names = _check_template(path)
        for key in item:
            if key in HTTP_METHODS or key in _PATH_ITEM_KEYS or str(key).startswith("x-"):
                continue
            warnings.append(f"{path}: unknown path-item key {key!r}")
        if "trace" in item:
            warnings.append(f"{path}: TRACE operations are not supported; skipped")
        for method in HTTP_METHODS:
            op = item.get(method)
            if op is None:
                continue
            if not isinstance(op, dict):
                raise StructuralError(f"{method.upper()} {path}: operation must be a mapping")
            where = f"{method.upper()} {path}"
            for key in op:
                if key not in _OPERATION_KEYS and not str(key).startswith("x-"):
                    warnings.append(f"{where}: unknown operation key {key!r}")
            params = _merge_parameters(item.get("parameters") or [], op.get("parameters") or [], where)
            declared = {p["name"] for p in params if p["in"] == "path"}
            for name in template_names:
                if name not in declared:
                    raise StructuralError(f"{where}: path parameter {{{name}}} is not declared")
            operations.append(Operation(path, method.upper(), op, params, auth))

    for w in warnings:
        log.warning(w)
    return ApiDocument(
        title=str(info.get("title", "")),
        version=str(info.get("version", "")),
        servers=servers,
        operations=operations,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# compilation


def snake_case(text: str) -> str:
    text = re.sub(r"([A-Z]+)([A-Z][a-z])", r"\1_\2", text)
    text = re.sub(r"([a-z0-9])([A-Z])", r"\1_\2", text)
    return re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")


def _truncate(name: str, limit: int = MAX_NAME_LEN) -> str:
    return name[:limit].rstrip("_") or name[:limit]


def derive_tool_name(operation: Operation, service: str) -> str:
    """Base tool name for an operation, before collision handling."""
    svc = snake_case(service) or "api"
    stem = snake_case(operation.operation_id) if operation.operation_id else ""
    if not stem:
        stem = f"{operation.method.lower()}_{snake_case(operation.path)}".rstrip("_")
    name = stem if stem == svc or stem.startswith(svc + "_") else f"{svc}_{stem}"
    return _truncate(name)


def collision_suffix(operation: Operation) -> str:
    return hashlib.sha256(f"{operation.method.upper()}{operation.path}".encode()).hexdigest()[:4]


def disambiguate(name: str, operation: Operation) -> str:
    return f"{_truncate(name, MAX_NAME_LEN - 5)}_{collision_suffix(operation)}"


def extract_description(operation: Operation | dict[str, Any]) -> str:
    spec = operation.spec if isinstance(operation, Operation) else operation
    parts = [str(spec.get(k) or "").strip() for k in ("summary", "description")]
    text = "\n\n".join(p for p in parts if p).strip()
    return text or NO_DESCRIPTION


def _param_schema(param: dict[str, Any]) -> dict[str, Any]:
    if isinstance(param.get("schema"), dict):
        schema = copy.deepcopy(param["schema"])
    elif isinstance(param.get("content"), dict) and param["content"]:
        media = next(iter(param["content"].values())) or {}
        schema = copy.deepcopy(media.get("schema") or {"type": "string"})
    else:
        schema = {"type": "string"}
    desc = param.get("description")
    if desc and "description" not in schema and schema.get("type") not in ("array", "object"):
        schema["description"] = str(desc).strip()
    return schema


def _body_schema(request_body: dict[str, Any], where: str) -> dict[str, Any] | None:
    content = request_body.get("content") or {}
    if not content:
        return None
    for media, spec in content.items():
        if media == "application/json" or media.endswith("+json"):
            return (spec or {}).get("schema") or {}
    media, spec = next(iter(content.items()))
    log.debug("%s: request body media type %s will be sent as JSON", where, media)
    return (spec or {}).get("schema") or {}


def _object_members(schema: dict[str, Any]) -> tuple[dict[str, Any], list[str]] | None:
    """Top-level properties/required of an object schema, merging ``allOf`` parts."""
    if "allOf" in schema and all(isinstance(s, dict) for s in schema["allOf"]):
        props: dict[str, Any] = {}
        required: list[str] = []
        for part in schema["allOf"]:
            sub = _object_members(part)
            if sub is None:
                return None
            props.update(sub[0])
            required.extend(r for r in sub[1] if r not in required)
        props.update(schema.get("properties") or {})
        required.extend(r for r in schema.get("required") or [] if r not in required)
        return props, required
    if schema.get("type") == "object" or (schema.get("type") is None and "properties" in schema):
        return dict(schema.get("properties") or {}), list(schema.get("required") or [])
    return None


def flatten_parameters(operation: Operation) -> FlatParameters:
    """Build the flat argument schema and per-argument wire locations."""
    where = operation.label
    declared_path = {p["name"] for p in operation.parameters if p["in"] == "path"}
    for name in _TEMPLATE_PARAM.findall(operation.path):
        if name not in declared_path:
            raise StructuralError(f"{where}: path parameter {{{name}}} is not declared")

    properties: dict[str, Any] = {}
    required: list[str] = []
    locations: dict[str, ArgLocation] = {}

    def add(arg: str, schema: dict[str, Any], loc: ArgLocation, is_required: bool) -> None:
        properties[arg] = schema
        locations[arg] = loc
        if is_required and arg not in required:
            required.append(arg)

    for p in operation.parameters:
        where_in = p["in"]
        if where_in == "cookie":
            log.debug("%s: cookie parameter %s skipped", where, p["name"])
            continue
        if where_in == "header" and str(p["name"]).lower() in operation.auth_headers:
            continue
        if where_in not in ("path", "query", "header"):
            raise StructuralError(f"{where}: parameter {p['name']!r} has invalid location {where_in!r}")
        arg = p["name"]
        if arg in properties:
            arg = f"{where_in}_{arg}"
            while arg in properties:
                arg = f"{where_in}_{arg}"
        add(arg, _param_schema(p), ArgLocation(where_in, p["name"]), where_in == "path" or bool(p.get("required")))

    body = operation.spec.get("requestBody")
    if isinstance(body, dict):
        schema = _body_schema(body, where)
        if schema is not None:
            members = _object_members(schema)
            if members is not None:
                props, req = members
                for prop, sub in props.items():
                    if isinstance(sub, dict) and sub.get("readOnly"):
                        continue
                    arg = prop
                    while arg in properties:
                        arg = f"body_{arg}"
                    add(arg, copy.deepcopy(sub), ArgLocation("body", prop), prop in req)
            else:
                arg = "body"
                while arg in properties:
                    arg = f"body_{arg}"
                add(arg, copy.deepcopy(schema), ArgLocation("body", None), bool(body.get("required")))

    out: dict[str, Any] = {"type": "object", "properties": properties}
    if required:
        out["required"] = required
    return FlatParameters(out, locations)


def compile_document(doc: ApiDocument, service: str, base_url: str | None = None) -> list[ToolSpec]:
    """One ToolSpec per operation, ordered by (path, method).

    ``base_url`` defaults to the document's first server.
    """
    if base_url is None and doc.servers:
        base_url = doc.servers[0]
    used: dict[str, Operation] = {}
    specs: list[ToolSpec] = []
    for op in sorted(doc.operations, key=lambda o: (o.path, o.method)):
        name = derive_tool_name(op, service)
        if name in used:
            alt = disambiguate(name, op)
            if alt in used:
                raise CompileError(
                    f"tool name {alt!r} collides: {used[alt].label} and {op.label}"
                )
            log.info("name collision on %s: %s renamed to %s", name, op.label, alt)
            name = alt
        used[name] = op
        flat = flatten_parameters(op)
        specs.append(
            ToolSpec(
                name=name,
                description=extract_description(op),
                arguments=flat.schema,
                binding=UpstreamBinding.http(op.method, op.path, base_url, flat.locations),
                service=service,
            )
        )
    return specs
