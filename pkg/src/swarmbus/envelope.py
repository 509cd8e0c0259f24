"""Canonical envelope grammar.

One byte-exact text encoding is used for descriptor files, frame bodies,
audit log lines, hash inputs and HTTP bodies. It is the JSON subset described
in ``docs/envelope.md``:

* objects with keys sorted by code point, no duplicate keys
* no insignificant whitespace
* values: object, array, string, integer, ``true``, ``false``, ``null``
  (no floating point numbers)
* UTF-8, strings escaped minimally (only ``"``, ``\\`` and control characters)

``decode`` is strict: it accepts only byte strings that ``encode`` would have
produced, so equal values always have equal bytes and vice versa.
"""

from __future__ import annotations

import json
from typing import Any

from .errors import SwarmError


def _check(value: Any, depth: int = 0) -> None:
    if depth > 64:
        raise SwarmError("ENCODING", "nesting too deep")
    if value is None or isinstance(value, (bool, str)):
        if isinstance(value, str):
            try:
                value.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise SwarmError("ENCODING", "string is not valid unicode") from exc
        return
    if isinstance(value, int):
        return
    if isinstance(value, (list, tuple)):
        for item in value:
            _check(item, depth + 1)
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise SwarmError("ENCODING", f"object key must be text, got {type(key).__name__}")
            _check(key, depth + 1)
            _check(item, depth + 1)
        return
    raise SwarmError("ENCODING", f"unsupported value type {type(value).__name__}")


def encode(value: Any) -> bytes:
    _check(value)
    text = json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    return text.encode("utf-8")


def _reject_float(text: str) -> Any:
    raise SwarmError("ENCODING", f"floating point number not allowed: {text}")


def _no_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise SwarmError("ENCODING", f"duplicate key {key!r}")
        out[key] = value
    return out


def decode(data: bytes) -> Any:
    try:
        text = data.decode("utf-8")
        value = json.loads(
            text,
            parse_float=_reject_float,
            parse_constant=_reject_float,
            object_pairs_hook=_no_duplicates,
        )
    except SwarmError:
        raise
    except (UnicodeDecodeError, ValueError) as exc:
        raise SwarmError("ENCODING", str(exc)) from exc
    if encode(value) != data:
        raise SwarmError("ENCODING", "input is not in canonical form")
    return value
