"""Validate tool-call arguments against a tool's JSON Schema.

Covers the keyword set that OpenAPI-derived schemas actually use (type,
enum/const, object and array keywords, numeric and string bounds, the
combinators).  Unknown keywords, ``format`` included, are ignored, which is
also what standard validators do by default.  ``nullable: true`` from
OpenAPI 3.0 is honoured.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Any


@dataclass(frozen=True)
class FieldError:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path or '<root>'}: {self.message}"


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_integer(v: Any) -> bool:
    if isinstance(v, bool):
        return False
    if isinstance(v, int):
        return True
    return isinstance(v, float) and v.is_integer()


_TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "number": _is_number,
    "integer": _is_integer,
    "boolean": lambda v: isinstance(v, bool),
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "null": lambda v: v is None,
}


def json_equal(a: Any, b: Any) -> bool:
    """Equality under JSON semantics: 1 == 1.0 but True != 1."""
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a == b
    if _is_number(a) and _is_number(b):
        return a == b
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(json_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(json_equal(a[k], b[k]) for k in a)
    return type(a) is type(b) and a == b


@lru_cache(maxsize=512)
def _regex(pattern: str) -> re.Pattern[str]:
    return re.compile(pattern)


def _join(path: str, key: str | int) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else key


def _multiple_of(value: float, divisor: float) -> bool:
    if isinstance(divisor, float) or isinstance(value, float):
        quotient = value / divisor
        try:
            return int(quotient) == quotient
        except OverflowError:
            return False
    return value % divisor == 0


def _check(value: Any, schema: Any, path: str, errors: list[FieldError]) -> None:
    if schema is True or schema == {}:
        return
    if schema is False:
        errors.append(FieldError(path, "no value is allowed here"))
        return
    if not isinstance(schema, dict):
        return

    if value is None and schema.get("nullable") is True:
        return

    if "type" in schema:
        types = schema["type"] if isinstance(schema["type"], list) else [schema["type"]]
        if not any(_TYPE_CHECKS.get(t, lambda v: False)(value) for t in types):
            errors.append(FieldError(path, f"expected {' or '.join(map(str, types))}, got {_json_type(value)}"))
            return

    if "enum" in schema and not any(json_equal(value, e) for e in schema["enum"]):
        errors.append(FieldError(path, f"{value!r} is not one of {schema['enum']!r}"))
    if "const" in schema and not json_equal(value, schema["const"]):
        errors.append(FieldError(path, f"expected constant {schema['const']!r}"))

    if _is_number(value):
        _check_number(value, schema, path, errors)
    elif isinstance(value, str):
        if "minLength" in schema and len(value) < schema["minLength"]:
            errors.append(FieldError(path, f"shorter than {schema['minLength']} characters"))
        if "maxLength" in schema and len(value) > schema["maxLength"]:
            errors.append(FieldError(path, f"longer than {schema['maxLength']} characters"))
        if "pattern" in schema and not _regex(schema["pattern"]).search(value):
            errors.append(FieldError(path, f"does not match pattern {schema['pattern']!r}"))
    elif isinstance(value, list):
        _check_array(value, schema, path, errors)
    elif isinstance(value, dict):
        _check_object(value, schema, path, errors)

    for sub in schema.get("allOf", ()):
        _check(value, sub, path, errors)
    if "anyOf" in schema and not any(_valid(value, s) for s in schema["anyOf"]):
        errors.append(FieldError(path, "does not match any of the allowed schemas (anyOf)"))
    if "oneOf" in schema:
        matched = sum(1 for s in schema["oneOf"] if _valid(value, s))
        if matched != 1:
            errors.append(FieldError(path, f"matches {matched} schemas, exactly one required (oneOf)"))
    if "not" in schema and _valid(value, schema["not"]):
        errors.append(FieldError(path, "matches a disallowed schema (not)"))


def _check_number(value: float, schema: dict[str, Any], path: str, errors: list[FieldError]) -> None:
    lo, hi = schema.get("minimum"), schema.get("maximum")
    ex_lo, ex_hi = schema.get("exclusiveMinimum"), schema.get("exclusiveMaximum")
    # OpenAPI 3.0 spells exclusivity as a boolean modifier of minimum/maximum
    if ex_lo is True:
        ex_lo, lo = lo, None
    elif ex_lo is False:
        ex_lo = None
    if ex_hi is True:
        ex_hi, hi = hi, None
    elif ex_hi is False:
        ex_hi = None
    if _is_number(lo) and value < lo:
        errors.append(FieldError(path, f"less than minimum {lo}"))
    if _is_number(hi) and value > hi:
        errors.append(FieldError(path, f"greater than maximum {hi}"))
    if _is_number(ex_lo) and value <= ex_lo:
        errors.append(FieldError(path, f"not greater than {ex_lo}"))
    if _is_number(ex_hi) and value >= ex_hi:
        errors.append(FieldError(path, f"not less than {ex_hi}"))
    div = schema.get("multipleOf")
    if _is_number(div) and div > 0 and not (isinstance(value, float) and not math.isfinite(value)):
        if not _multiple_of(value, div):
            errors.append(FieldError(path, f"not a multiple of {div}"))


def _check_array(value: list[Any], schema: dict[str, Any], path: str, errors: list[FieldError]) -> None:
    if "minItems" in schema and len(value) < schema["minItems"]:
        errors.append(FieldError(path, f"fewer than {schema['minItems']} items"))
    if "maxItems" in schema and len(value) > schema["maxItems"]:
        errors.append(FieldError(path, f"more than {schema['maxItems']} items"))
    if schema.get("uniqueItems") is True:
        for i in range(len(value)):
            if any(json_equal(value[i], value[j]) for j in range(i)):
                errors.append(FieldError(path, "items are not unique"))
                break
    items = schema.get("items")
    if isinstance(items, (dict, bool)):
        for i, item in enumerate(value):
            _check(item, items, _join(path, i), errors)


def _check_object(value: dict[str, Any], schema: dict[str, Any], path: str, errors: list[FieldError]) -> None:
    for name in schema.get("required", ()):
        if name not in value:
            errors.append(FieldError(_join(path, name), "required argument is missing"))
    if "minProperties" in schema and len(value) < schema["minProperties"]:
        errors.append(FieldError(path, f"fewer than {schema['minProperties']} properties"))
    if "maxProperties" in schema and len(value) > schema["maxProperties"]:
        errors.append(FieldError(path, f"more than {schema['maxProperties']} properties"))
    props = schema.get("properties") or {}
    patterns = schema.get("patternProperties") or {}
    extra = schema.get("additionalProperties", True)
    for key, item in value.items():
        known = False
        if key in props:
            known = True
            _check(item, props[key], _join(path, key), errors)
        for pat, sub in patterns.items():
            if _regex(pat).search(key):
                known = True
                _check(item, sub, _join(path, key), errors)
        if not known:
            if extra is False:
                errors.append(FieldError(_join(path, key), "unexpected argument"))
            elif isinstance(extra, dict):
                _check(item, extra, _join(path, key), errors)


def _valid(value: Any, schema: Any) -> bool:
    errs: list[FieldError] = []
    _check(value, schema, "", errs)
    return not errs


def _json_type(value: Any) -> str:
    for name in ("null", "boolean", "integer", "number", "string", "array", "object"):
        if _TYPE_CHECKS[name](value):
            return name
    return type(value).__name__


def validate_arguments(arguments: Any, schema: dict[str, Any]) -> list[FieldError]:
    """All validation failures for ``arguments``; empty when valid."""
    errors: list[FieldError] = []
    _check(arguments, schema, "", errors)
    return errors
