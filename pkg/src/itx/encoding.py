"""Canonical byte encodings and digests.

Everything that is measured, signed, or compared across trust boundaries goes
through ``canonical_bytes`` so that two independent implementations of the
same structure serialize identically: JSON with sorted keys, no whitespace,
and ``bytes`` values rendered as lowercase hex strings.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any


def _jsonable(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray, memoryview)):
        return bytes(value).hex()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    raise TypeError(f"cannot canonicalize value of type {type(value).__name__}")


def jsonable(value: Any) -> Any:
    """JSON-ready copy of a plain-data structure (bytes rendered as hex)."""
    return _jsonable(value)


def canonical_bytes(obj: Any) -> bytes:
    """Deterministic serialization of a plain-data structure."""
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":")).encode("ascii")


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def object_digest(obj: Any) -> bytes:
    """SHA-256 over the canonical encoding of ``obj``."""
    return digest(canonical_bytes(obj))
