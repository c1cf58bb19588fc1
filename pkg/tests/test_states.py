from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaintrack.scenario import load_reference_model, reference_model_bytes
from chaintrack.states import (
    DanglingReference,
    ExecutableModel,
    MalformedDocument,
    ModelError,
    SchemaViolation,
    StateDef,
    StateType,
    model_to_document,
    parse_model,
    resolve_path,
    serialize_model,
    validate_model,
)


def test_reference_model_shape():
    m = load_reference_model()
    assert list(m.states) == ["Receive Messages", "Process Records"]
    mp = m.states["Process Records"]
    assert mp.state_type is StateType.MAP
    assert list(mp.iterator.states) == ["Transform Data", "Update Warehouse", "Dequeue"]
    assert mp.max_concurrency == 4
    assert validate_model(m) == []


def test_minimal_terminal_model():
    m = parse_model(b'{"StartAt":"A","States":{"A":{"Type":"Succeed"}}}')
    assert m.start_at == "A" and m.states["A"].is_terminal


def test_start_at_dangling():
    with pytest.raises(DanglingReference) as err:
        parse_model(b'{"StartAt":"X","States":{"A":{"Type":"Succeed"}}}')
    assert err.value.target == "X"


@pytest.mark.parametrize(
    "raw, exc",
    [
        (b"{not json", MalformedDocument),
        (b"\xff\xfe", MalformedDocument),
        (b"[]", SchemaViolation),
        (b'{"StartAt":"A","States":{"A":{"Type":"Choice"}}}', SchemaViolation),
        (b'{"StartAt":"A","States":{"A":{"Type":"Task","End":true}}}', SchemaViolation),
        (b'{"StartAt":"A","States":{"A":{"Type":"Succeed"}},"Version":"1"}', SchemaViolation),
        (b'{"StartAt":"A","States":{"A":{"Type":"Succeed","Next":"A"}}}', SchemaViolation),
        (b'{"StartAt":"A","States":{"A":{"Type":"Map","ItemsPath":"$.x","End":true}}}', SchemaViolation),
        (b'{"StartAt":"A","States":{"A":{"Type":"Pass","Next":"B"}}}', DanglingReference),
    ],
)
def test_parse_errors(raw, exc):
    with pytest.raises(exc):
        parse_model(raw)


def test_dangling_next_violation_names_state_and_target():
    m = ExecutableModel("A", {"A": StateDef(StateType.PASS, next="B")})
    assert [str(v) for v in validate_model(m)] == ["DanglingReference('A', 'B')"]


def test_unreachable_terminal():
    m = ExecutableModel("A", {
        "A": StateDef(StateType.PASS, next="B"),
        "B": StateDef(StateType.PASS, next="A"),
        "C": StateDef(StateType.SUCCEED),
    })
    assert [v.rule for v in validate_model(m)] == ["NoReachableTerminal"]


def test_missing_transition_and_negative_concurrency():
    inner = ExecutableModel("I", {"I": StateDef(StateType.SUCCEED)})
    m = ExecutableModel("A", {
        "A": StateDef(StateType.PASS),
        "M": StateDef(StateType.MAP, items_path="$", iterator=inner, max_concurrency=-1, end=True),
    })
    rules = {v.rule for v in validate_model(m)}
    assert {"MissingTransition", "NegativeConcurrency"} <= rules


def test_iterator_violations_are_prefixed():
    inner = ExecutableModel("I", {"I": StateDef(StateType.PASS, next="Nope")})
    m = ExecutableModel("M", {"M": StateDef(StateType.MAP, items_path="$", iterator=inner, end=True)})
    assert any(v.state == "M/I" and v.rule == "DanglingReference" for v in validate_model(m))


def test_round_trip_reference():
    m = load_reference_model()
    assert parse_model(serialize_model(m)) == m
    assert model_to_document(m) == json.loads(reference_model_bytes())


def test_models_are_hashable():
    assert hash(load_reference_model()) == hash(load_reference_model())


def test_resolve_path():
    assert resolve_path({"a": {"b": [1]}}, "$.a.b") == [1]
    assert resolve_path(3, "$") == 3
    with pytest.raises(KeyError):
        resolve_path({}, "$.x")


# Random linear models: a chain of Pass/Task states ending in a terminal.
names = st.text(alphabet="ABCDEFGHIJ", min_size=1, max_size=3)


@st.composite
def linear_models(draw):
    labels = draw(st.lists(names, min_size=1, max_size=6, unique=True))
    states = {}
    for i, n in enumerate(labels):
        last = i == len(labels) - 1
        kind = draw(st.sampled_from(["Pass", "Task", "Succeed"] if last else ["Pass", "Task"]))
        body = {"Type": kind}
        if kind == "Task":
            body["Resource"] = f"sim:{n}"
        if kind != "Succeed":
            body.update({"End": True} if last else {"Next": labels[i + 1]})
        states[n] = body
    return {"StartAt": labels[0], "States": states}


@settings(max_examples=100, deadline=None)
@given(linear_models())
def test_round_trip_property(doc):
    m = parse_model(json.dumps(doc).encode())
    assert validate_model(m) == []
    assert parse_model(serialize_model(m)) == m


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=200) | st.text(max_size=200).map(str.encode))
def test_parsing_is_total(raw):
    try:
        parse_model(raw)
    except ModelError:
        pass
