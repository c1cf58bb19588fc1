"""Canonical JSON serialization and SHA-256 content hashing.

Every artifact that gets registered on the ledger (models, instances,
states, transitions, terminations) is identified by the SHA-256 digest of
its canonical byte form. The canonical form is:

* object keys sorted by Unicode codepoint,
* no insignificant whitespace,
* UTF-8 output with minimal escaping (only ``"``, ``\\`` and control
  characters are escaped),
* integers only; floats are rejected so number formatting is never
  ambiguous.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Mapping

ARTIFACT_KINDS = ("model", "instance", "termination", "state", "transition")

_ABBREV_SEP = "[…]"


class UnsupportedValue(TypeError):
    """A document contains a value with no canonical representation."""


def _check(value: Any, path: str) -> None:
    if value is None or isinstance(value, (bool, str)):
        if isinstance(value, str):
            try:
                value.encode("utf-8")
            except UnicodeEncodeError as exc:
                raise UnsupportedValue(f"{path}: string is not valid UTF-8") from exc
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        raise UnsupportedValue(f"{path}: floating-point values are not canonical ({value!r})")
    if isinstance(value, Mapping):
        for key, item in value.items():
            if not isinstance(key, str):
                raise UnsupportedValue(f"{path}: non-string key {key!r}")
            _check(key, path)
            _check(item, f"{path}.{key}")
        return
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check(item, f"{path}[{i}]")
        return
    raise UnsupportedValue(f"{path}: unsupported type {type(value).__name__}")


def canonicalize(doc: Any) -> bytes:
    """Return the canonical UTF-8 byte form of ``doc``."""
    _check(doc, "$")
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return text.encode("utf-8")


@dataclass(frozen=True, order=True)
class ContentHash:
    """A 32-byte SHA-256 digest used as a content-based identifier."""

    digest: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.digest, bytes) or len(self.digest) != 32:
            raise ValueError("ContentHash digest must be exactly 32 bytes")

    @classmethod
    def from_hex(cls, text: str) -> ContentHash:
        if isinstance(text, ContentHash):
            return text
        raw = text[2:] if text.startswith(("0x", "0X")) else text
        if len(raw) != 64:
            raise ValueError(f"expected 64 hex characters, got {len(raw)}")
        return cls(bytes.fromhex(raw))

    @classmethod
    def of_bytes(cls, data: bytes) -> ContentHash:
        return cls(hashlib.sha256(data).digest())

    def hex(self) -> str:
        return self.digest.hex()

    def prefixed(self) -> str:
        return "0x" + self.digest.hex()

    def abbrev(self) -> str:
        return abbreviate(self.hex())

    def __str__(self) -> str:
        return self.hex()

    def __repr__(self) -> str:
        return f"ContentHash({self.abbrev()})"


def abbreviate(hex_text: str) -> str:
    """Shorten a hex identifier to ``a681[…]779d`` for human-readable reports."""
    raw = hex_text[2:] if hex_text.startswith("0x") else hex_text
    if len(raw) <= 8:
        return raw
    return f"{raw[:4]}{_ABBREV_SEP}{raw[-4:]}"


def content_hash(body: Mapping[str, Any]) -> ContentHash:
    """Hash an artifact payload. The body must carry its ``kind`` discriminator."""
    if not isinstance(body, Mapping) or "kind" not in body:
        raise UnsupportedValue("artifact payload must be an object with a 'kind' field")
    return ContentHash.of_bytes(canonicalize(body))


def hash_document(doc: Any) -> ContentHash:
    """SHA-256 over the canonical form of an arbitrary document (no kind check)."""
    return ContentHash.of_bytes(canonicalize(doc))
