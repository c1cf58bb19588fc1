from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaintrack.canonical import (
    ContentHash,
    UnsupportedValue,
    abbreviate,
    canonicalize,
    content_hash,
    hash_document,
)
from chaintrack.scenario import reference_model_bytes

import oracles

# Frozen from the oracle canonicalizer + sha256sum over the bundled model file.
REFERENCE_DOC_SHA256 = "5ce2dcb4e3de6e0d980b84d1ca8bb37d30fd04a477e2f6c65a17192d78982ceb"
REFERENCE_DOC_CANONICAL_LEN = 673
EMPTY_MODEL_PAYLOAD_SHA256 = "c99437cf364e8b2778834d369d9782a813cfa7c8f2a851933e05aec0bd191926"

text = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12)
scalars = st.none() | st.booleans() | st.integers(min_value=-(2**70), max_value=2**70) | text
documents = st.recursive(
    scalars,
    lambda children: st.lists(children, max_size=4) | st.dictionaries(text, children, max_size=4),
    max_leaves=20,
)


def test_key_order_is_irrelevant():
    assert canonicalize({"b": 1, "a": 2}) == b'{"a":2,"b":1}'


def test_empty_object():
    assert canonicalize({}) == b"{}"


def test_minimal_escaping_keeps_unicode_raw():
    assert canonicalize({"k": "é\n\"\x01"}) == '{"k":"é\\n\\"\\u0001"}'.encode("utf-8")


def test_keys_sorted_by_codepoint_not_utf16():
    # U+FF61 sorts before U+1F600 by codepoint, after it by UTF-16 code unit.
    doc = {"\U0001F600": 1, "｡": 2}
    assert canonicalize(doc) == oracles.canonical_bytes(doc)
    assert canonicalize(doc).index("｡".encode()) < canonicalize(doc).index("\U0001F600".encode())


@pytest.mark.parametrize("bad", [1.5, float("nan"), float("inf"), {1: "x"}, {"a": {2.0}}, b"raw", "\ud800"])
def test_unsupported_values(bad):
    with pytest.raises(UnsupportedValue):
        canonicalize({"v": bad} if not isinstance(bad, dict) else bad)


def test_reference_model_canonical_bytes_match_oracle():
    doc = json.loads(reference_model_bytes())
    data = canonicalize(doc)
    assert data == oracles.canonical_bytes(doc)
    assert len(data) == REFERENCE_DOC_CANONICAL_LEN
    assert hash_document(doc).hex() == REFERENCE_DOC_SHA256


def test_empty_model_payload_digest():
    assert content_hash({"kind": "model", "document": {}}).hex() == EMPTY_MODEL_PAYLOAD_SHA256
    assert oracles.sha256sum(oracles.canonical_bytes({"kind": "model", "document": {}})) == EMPTY_MODEL_PAYLOAD_SHA256


def test_kind_discriminator_separates_hashes():
    assert content_hash({"kind": "state", "x": 1}) != content_hash({"kind": "instance", "x": 1})


def test_content_hash_requires_kind():
    with pytest.raises(UnsupportedValue):
        content_hash({"x": 1})


def test_hex_forms_and_abbreviation():
    h = content_hash({"kind": "model", "document": {}})
    assert ContentHash.from_hex(h.hex()) == h
    assert ContentHash.from_hex(h.prefixed()) == h
    assert h.abbrev() == "c994[…]1926"
    assert abbreviate("0x" + h.hex()) == "c994[…]1926"
    with pytest.raises(ValueError):
        ContentHash(b"short")
    with pytest.raises(ValueError):
        ContentHash.from_hex("abc")


@settings(max_examples=150, deadline=None)
@given(documents)
def test_matches_oracle(doc):
    assert canonicalize(doc) == oracles.canonical_bytes(doc)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(text, scalars, min_size=1, max_size=8), st.randoms())
def test_invariant_under_key_reordering(doc, rnd):
    items = list(doc.items())
    rnd.shuffle(items)
    assert hash_document(dict(items)) == hash_document(doc)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(text, st.integers(), min_size=1, max_size=6), st.data())
def test_single_scalar_mutation_changes_digest(doc, data):
    key = data.draw(st.sampled_from(sorted(doc)))
    mutated = dict(doc)
    mutated[key] = doc[key] + data.draw(st.integers(min_value=1, max_value=10**6))
    assert hash_document(mutated) != hash_document(doc)


@settings(max_examples=50, deadline=None)
@given(st.binary(min_size=32, max_size=32))
def test_hex_round_trip(raw):
    h = ContentHash(raw)
    assert ContentHash.from_hex(str(h)) == h
