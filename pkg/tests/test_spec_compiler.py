import hashlib
import json
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toolgate.errors import CompileError, ParseError, StructuralError
from toolgate.registry import dump_line
from toolgate.spec_compiler import (
    Operation,
    compile_document,
    derive_tool_name,
    extract_description,
    flatten_parameters,
    parse_document,
    snake_case,
)
from toolgate.synthetic import synthetic_openapi
from toolgate.toolspec import NO_DESCRIPTION

from conftest import GITLAB_ENDPOINTS

NAME = re.compile(r"^[a-z0-9_]{1,64}$")


def doc_of(paths, **extra):
    return json.dumps({"openapi": "3.1.0", "info": {"title": "t", "version": "1"}, "paths": paths, **extra})


def op(path, method, spec=None, params=()):
    return Operation(path, method, spec or {}, tuple(params))


# -- parse_document ---------------------------------------------------------


def test_fixture_has_hand_counted_operations(gitlab_doc):
    assert len(gitlab_doc.operations) == GITLAB_ENDPOINTS
    assert gitlab_doc.title == "GitLab subset"
    assert gitlab_doc.servers == ["http://gitlab.example.test/api/v4"]


def test_empty_paths_gives_no_operations():
    assert parse_document("openapi: 3.0.0\ninfo: {title: x, version: '1'}\npaths: {}\n", "yaml").operations == []


def test_get_and_delete_on_one_path_are_two_operations(gitlab_doc):
    labels = [o.method for o in gitlab_doc.operations if o.path == "/projects/{id}/labels"]
    assert sorted(labels) == ["DELETE", "GET"]


def test_malformed_yaml_reports_position():
    with pytest.raises(ParseError) as exc:
        parse_document("openapi: 3.0.0\npaths:\n  /a: [unclosed\n", "yaml")
    assert exc.value.line is not None and exc.value.line >= 3


def test_malformed_json_reports_line_and_column():
    with pytest.raises(ParseError) as exc:
        parse_document('{\n  "openapi": "3.0.0",\n  "paths": {,}\n}', "json")
    assert (exc.value.line, exc.value.column) == (3, 13)


def test_missing_paths_is_structural():
    with pytest.raises(StructuralError, match="paths"):
        parse_document('{"openapi": "3.0.0", "info": {}}', "json")


def test_swagger_2_rejected():
    with pytest.raises(StructuralError, match="Swagger"):
        parse_document('{"swagger": "2.0", "paths": {}}', "json")


def test_external_ref_rejected():
    paths = {"/a": {"get": {"parameters": [{"$ref": "other.yaml#/components/parameters/P"}]}}}
    with pytest.raises(StructuralError, match="external"):
        parse_document(doc_of(paths), "json")


def test_undeclared_path_parameter_is_structural():
    with pytest.raises(StructuralError, match="not declared"):
        parse_document(doc_of({"/vms/{id}": {"get": {}}}), "json")


def test_malformed_template_is_structural():
    paths = {"/vms/{id": {"get": {"parameters": [{"name": "id", "in": "path", "required": True}]}}}
    with pytest.raises(StructuralError, match="malformed"):
        parse_document(doc_of(paths), "json")


def test_unknown_keys_warn_but_compile():
    paths = {"/a": {"get": {"operationId": "a", "weird": 1}, "bogus": {}}}
    doc = parse_document(doc_of(paths, extraTopLevel=True), "json")
    assert len(doc.operations) == 1
    assert any("extraTopLevel" in w for w in doc.warnings)
    assert any("weird" in w for w in doc.warnings)
    assert any("bogus" in w for w in doc.warnings)


def test_recursive_schema_is_cut_with_warning():
    node = {"type": "object", "properties": {"child": {"$ref": "#/components/schemas/Node"}}}
    paths = {
        "/n": {
            "post": {
                "requestBody": {"content": {"application/json": {"schema": {"$ref": "#/components/schemas/Node"}}}}
            }
        }
    }
    doc = parse_document(doc_of(paths, components={"schemas": {"Node": node}}), "json")
    assert any("recursive" in w for w in doc.warnings)
    [tool] = compile_document(doc, "svc", "http://x")
    child = tool.arguments["properties"]["child"]
    assert child["type"] == "object"
    assert "$ref" not in json.dumps(tool.arguments)


def test_path_level_parameters_are_overridden_by_operation():
    paths = {
        "/a/{id}": {
            "parameters": [{"name": "id", "in": "path", "required": True, "schema": {"type": "string"}}],
            "get": {"parameters": [{"name": "id", "in": "path", "required": True, "schema": {"type": "integer"}}]},
        }
    }
    [o] = parse_document(doc_of(paths), "json").operations
    assert [p["schema"] for p in o.parameters] == [{"type": "integer"}]


# -- naming -----------------------------------------------------------------


def test_snake_case():
    assert snake_case("mergePr") == "merge_pr"
    assert snake_case("getHTTPResponse") == "get_http_response"
    assert snake_case("Projects.List-All") == "projects_list_all"


def test_operation_id_is_snake_cased_and_prefixed():
    assert derive_tool_name(op("/x", "PUT", {"operationId": "mergePr"}), "gitlab") == "gitlab_merge_pr"
    assert derive_tool_name(op("/x", "GET", {"operationId": "searchIssues"}), "gitlab") == "gitlab_search_issues"


def test_name_without_operation_id_uses_method_and_path():
    assert derive_tool_name(op("/projects/{id}/issues", "GET"), "gitlab") == "gitlab_get_projects_id_issues"


def test_service_prefix_not_doubled():
    assert derive_tool_name(op("/x", "GET", {"operationId": "gitlab_list"}), "gitlab") == "gitlab_list"


def test_long_names_are_truncated():
    name = derive_tool_name(op("/x", "GET", {"operationId": "a" * 200}), "azure")
    assert len(name) == 64 and NAME.match(name)


def test_compiled_fixture_names(gitlab_tools):
    names = [t.name for t in gitlab_tools]
    assert "gitlab_search_issues" in names
    assert "gitlab_merge_pr" in names
    assert "gitlab_get_projects_id_issues" in names
    assert len(set(names)) == len(names) == GITLAB_ENDPOINTS
    assert all(NAME.match(n) for n in names)


def test_colliding_names_get_hash_suffix():
    paths = {"/a-b": {"get": {}}, "/a_b": {"get": {}}}
    tools = compile_document(parse_document(doc_of(paths), "json"), "svc", "http://x")
    names = [t.name for t in tools]
    suffix = hashlib.sha256(b"GET/a_b").hexdigest()[:4]
    assert names == ["svc_get_a_b", f"svc_get_a_b_{suffix}"]


def _hash4(method, path):
    return hashlib.sha256(f"{method}{path}".encode()).hexdigest()[:4]


def test_unresolvable_collision_names_both_endpoints():
    # find two distinct paths whose collision suffixes coincide
    target = _hash4("GET", "/p1")
    i = 2
    while _hash4("GET", f"/p{i}") != target:
        i += 1
    paths = {"/p0": {"get": {"operationId": "dup"}}, "/p1": {"get": {"operationId": "dup"}}, f"/p{i}": {"get": {"operationId": "dup"}}}
    with pytest.raises(CompileError) as exc:
        compile_document(parse_document(doc_of(paths), "json"), "svc", "http://x")
    assert "GET /p1" in str(exc.value) and f"GET /p{i}" in str(exc.value)


# -- arguments --------------------------------------------------------------


def test_additive_argument_count():
    params = [
        {"name": "a_id", "in": "path", "required": True, "schema": {"type": "string"}},
        {"name": "b_id", "in": "path", "required": True, "schema": {"type": "string"}},
        {"name": "q1", "in": "query", "schema": {"type": "string"}},
        {"name": "q2", "in": "query", "schema": {"type": "integer"}},
        {"name": "q3", "in": "query", "schema": {"type": "boolean"}},
    ]
    body = {"content": {"application/json": {"schema": {"type": "object", "properties": {"a": {}, "b": {}}}}}}
    flat = flatten_parameters(op("/x/{a_id}/{b_id}", "POST", {"requestBody": body}, params))
    assert len(flat.schema["properties"]) == 7
    assert flat.schema["required"] == ["a_id", "b_id"]
    assert {k: v.location for k, v in flat.locations.items()} == {
        "a_id": "path", "b_id": "path", "q1": "query", "q2": "query", "q3": "query", "a": "body", "b": "body",
    }


def test_body_collision_gets_body_prefix(gitlab_tools):
    tool = next(t for t in gitlab_tools if t.name == "gitlab_update_project")
    props = tool.arguments["properties"]
    assert "id" in props and "body_id" in props
    assert tool.binding.locations["id"].location == "path"
    assert tool.binding.locations["body_id"].to_dict() == {"in": "body", "name": "id"}


def test_non_object_body_is_single_argument():
    body = {"required": True, "content": {"application/json": {"schema": {"type": "array", "items": {"type": "string"}}}}}
    flat = flatten_parameters(op("/x", "POST", {"requestBody": body}))
    assert flat.schema == {"type": "object", "properties": {"body": {"type": "array", "items": {"type": "string"}}}, "required": ["body"]}
    assert flat.locations["body"].name is None


def test_deeply_nested_body_schema_is_verbatim(gitlab_tools):
    tool = next(t for t in gitlab_tools if t.name == "gitlab_create_project")
    expected = {
        "type": "object",
        "properties": {
            "approvals": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {"rule": {"type": "string"}, "users": {"type": "array", "items": {"type": "integer"}}},
                },
            }
        },
    }
    assert tool.arguments["properties"]["settings"] == expected
    assert tool.arguments["required"] == ["name"]


def test_auth_headers_are_not_arguments(gitlab_tools):
    tool = next(t for t in gitlab_tools if t.name == "gitlab_list_projects")
    assert "PRIVATE-TOKEN" not in tool.arguments["properties"]
    issues = next(t for t in gitlab_tools if t.name == "gitlab_get_projects_id_issues")
    assert issues.binding.locations["X-Request-Id"].location == "header"


def test_flatten_rejects_undeclared_path_param():
    with pytest.raises(StructuralError):
        flatten_parameters(op("/vms/{id}", "GET"))


# -- descriptions -----------------------------------------------------------


def test_description_rules():
    assert extract_description({"summary": "List users", "description": "Returns all users."}) == "List users\n\nReturns all users."
    assert extract_description({}) == NO_DESCRIPTION
    assert extract_description({"description": "Deletes it.\n\n\n"}) == "Deletes it."
    assert extract_description({"summary": "  ", "description": ""}) == NO_DESCRIPTION


# -- properties -------------------------------------------------------------

path_segments = st.lists(st.sampled_from(["a", "b", "c-d", "e_f", "g1", "{id}"]), min_size=1, max_size=4)
methods = st.sets(st.sampled_from(["get", "post", "put", "patch", "delete", "head", "options"]), min_size=1)


@st.composite
def documents(draw):
    paths = {}
    for segs in draw(st.lists(path_segments, min_size=0, max_size=12)):
        seen = []
        for s in segs:
            if s == "{id}" and "{id}" in seen:
                continue
            seen.append(s)
        path = "/" + "/".join(seen)
        ops = {}
        for m in draw(methods):
            spec = {}
            if "{id}" in path:
                spec["parameters"] = [{"name": "id", "in": "path", "required": True, "schema": {"type": "string"}}]
            if draw(st.booleans()):
                spec["operationId"] = draw(st.sampled_from(["list", "getItem", "doThing", "x"]))
            ops[m] = spec
        paths[path] = ops
    return paths


@settings(max_examples=150, deadline=None)
@given(documents())
def test_tool_per_endpoint_bijection_and_name_validity(paths):
    doc = parse_document(doc_of(paths), "json")
    tools = compile_document(doc, "svc", "http://x")
    pairs = sorted((p, m.upper()) for p, ops in paths.items() for m in ops)
    assert sorted((t.binding.path, t.binding.method) for t in tools) == pairs
    assert [(t.binding.path, t.binding.method) for t in tools] == pairs  # deterministic order
    names = [t.name for t in tools]
    assert len(set(names)) == len(names)
    assert all(NAME.match(n) for n in names)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_compilation_is_deterministic(seed):
    raw = json.dumps(synthetic_openapi(25, seed))
    a = [dump_line(t.to_dict()) for t in compile_document(parse_document(raw, "json"), "azure", "http://x")]
    b = [dump_line(t.to_dict()) for t in compile_document(parse_document(raw, "json"), "azure", "http://x")]
    assert a == b


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_complex_argument_schemas_are_preserved(seed):
    source = synthetic_openapi(20, seed)
    tools = compile_document(parse_document(json.dumps(source), "json"), "azure", "http://x")
    for tool in tools:
        operation = source["paths"][tool.binding.path][tool.binding.method.lower()]
        for arg, loc in tool.binding.locations.items():
            schema = tool.arguments["properties"][arg]
            if schema.get("type") not in ("array", "object"):
                continue
            if loc.location == "body":
                src = operation["requestBody"]["content"]["application/json"]["schema"]["properties"][loc.name]
            else:
                src = next(p["schema"] for p in operation["parameters"] if p["name"] == loc.name)
            assert schema == src
