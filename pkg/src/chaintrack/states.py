"""Executable models in a small JSON states-language.

Supported state types are ``Task``, ``Pass``, ``Map``, ``Succeed`` and
``Fail``. Field names follow the usual states-language capitalization::

    {
      "StartAt": "Receive Messages",
      "States": {
        "Receive Messages": {"Type": "Task", "Resource": "sim:...", "Next": "Process"},
        "Process": {"Type": "Map", "ItemsPath": "$.records",
                    "Iterator": {"StartAt": ..., "States": {...}}, "End": true}
      }
    }

Unknown keys are rejected so that the canonical byte form of a model is
unambiguous.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional, Union


class StateType(str, Enum):
    TASK = "Task"
    PASS = "Pass"
    MAP = "Map"
    SUCCEED = "Succeed"
    FAIL = "Fail"


TERMINAL_TYPES = (StateType.SUCCEED, StateType.FAIL)

_MODEL_KEYS = {"Comment", "StartAt", "States"}
_STATE_KEYS = {
    "Type",
    "Comment",
    "Next",
    "End",
    "Resource",
    "ItemsPath",
    "Iterator",
    "MaxConcurrency",
}
_FIELDS_BY_TYPE = {
    StateType.TASK: {"Resource"},
    StateType.PASS: set(),
    StateType.MAP: {"ItemsPath", "Iterator", "MaxConcurrency"},
    StateType.SUCCEED: set(),
    StateType.FAIL: set(),
}


class ModelError(ValueError):
    """Base class for model parsing failures."""


class MalformedDocument(ModelError):
    pass


class SchemaViolation(ModelError):
    pass


class DanglingReference(ModelError):
    def __init__(self, state: Optional[str], target: str) -> None:
        where = f"state {state!r}" if state else "StartAt"
        super().__init__(f"{where} references missing state {target!r}")
        self.state = state
        self.target = target


@dataclass(frozen=True)
class StateDef:
    state_type: StateType
    resource: Optional[str] = None
    items_path: Optional[str] = None
    iterator: Optional[ExecutableModel] = None
    max_concurrency: int = 0
    next: Optional[str] = None
    end: bool = False
    comment: Optional[str] = None

    @property
    def is_terminal(self) -> bool:
        return self.end or self.state_type in TERMINAL_TYPES


@dataclass(frozen=True)
class ExecutableModel:
    start_at: str
    states: dict[str, StateDef] = field(default_factory=dict)
    comment: Optional[str] = None

    def __hash__(self) -> int:
        return hash((self.start_at, tuple(self.states), self.comment))


@dataclass(frozen=True)
class Violation:
    rule: str
    state: Optional[str] = None
    detail: Optional[str] = None

    def __str__(self) -> str:
        args = ", ".join(repr(a) for a in (self.state, self.detail) if a is not None)
        return f"{self.rule}({args})"


# -- parsing -----------------------------------------------------------------


def parse_model(raw: Union[bytes, str]) -> ExecutableModel:
    """Parse a UTF-8 JSON model document.

    Raises :class:`MalformedDocument`, :class:`SchemaViolation` or
    :class:`DanglingReference`; never anything else.
    """
    try:
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
        doc = json.loads(text)
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise MalformedDocument(str(exc)) from exc
    model = model_from_document(doc)
    for v in validate_model(model):
        if v.rule == "DanglingReference":
            raise DanglingReference(v.state, v.detail or "")
    return model


def model_from_document(doc: Any, path: str = "") -> ExecutableModel:
    if not isinstance(doc, dict):
        raise SchemaViolation(f"{path or 'model'}: expected an object")
    unknown = set(doc) - _MODEL_KEYS
    if unknown:
        raise SchemaViolation(f"{path or 'model'}: unknown keys {sorted(unknown)}")
    start_at = doc.get("StartAt")
    if not isinstance(start_at, str):
        raise SchemaViolation(f"{path or 'model'}: StartAt must be a string")
    raw_states = doc.get("States")
    if not isinstance(raw_states, dict) or not raw_states:
        raise SchemaViolation(f"{path or 'model'}: States must be a non-empty object")
    comment = doc.get("Comment")
    if comment is not None and not isinstance(comment, str):
        raise SchemaViolation(f"{path or 'model'}: Comment must be a string")
    states = {
        name: _state_from_document(body, f"{path}{name}")
        for name, body in raw_states.items()
    }
    return ExecutableModel(start_at=start_at, states=states, comment=comment)


def _state_from_document(body: Any, path: str) -> StateDef:
    if not isinstance(body, dict):
        raise SchemaViolation(f"{path}: state must be an object")
    unknown = set(body) - _STATE_KEYS
    if unknown:
        raise SchemaViolation(f"{path}: unknown keys {sorted(unknown)}")
    try:
        state_type = StateType(body.get("Type"))
    except ValueError:
        raise SchemaViolation(f"{path}: unknown state type {body.get('Type')!r}") from None

    allowed = _FIELDS_BY_TYPE[state_type]
    for key in ("Resource", "ItemsPath", "Iterator", "MaxConcurrency"):
        if key in body and key not in allowed:
            raise SchemaViolation(f"{path}: {key} is not allowed on {state_type.value} states")
    if state_type in TERMINAL_TYPES and ("Next" in body or "End" in body):
        raise SchemaViolation(f"{path}: {state_type.value} states take neither Next nor End")

    next_ = body.get("Next")
    if next_ is not None and not isinstance(next_, str):
        raise SchemaViolation(f"{path}: Next must be a string")
    end = body.get("End", False)
    if not isinstance(end, bool):
        raise SchemaViolation(f"{path}: End must be a boolean")
    comment = body.get("Comment")
    if comment is not None and not isinstance(comment, str):
        raise SchemaViolation(f"{path}: Comment must be a string")

    resource = items_path = iterator = None
    max_concurrency = 0
    if state_type is StateType.TASK:
        resource = body.get("Resource")
        if not isinstance(resource, str) or not resource:
            raise SchemaViolation(f"{path}: Task requires a Resource string")
    elif state_type is StateType.MAP:
        items_path = body.get("ItemsPath")
        if not isinstance(items_path, str) or not items_path.startswith("$"):
            raise SchemaViolation(f"{path}: Map requires an ItemsPath starting with '$'")
        if "Iterator" not in body:
            raise SchemaViolation(f"{path}: Map requires an Iterator")
        iterator = model_from_document(body["Iterator"], f"{path}/")
        max_concurrency = body.get("MaxConcurrency", 0)
        if isinstance(max_concurrency, bool) or not isinstance(max_concurrency, int):
            raise SchemaViolation(f"{path}: MaxConcurrency must be an integer")
    return StateDef(
        state_type=state_type,
        resource=resource,
        items_path=items_path,
        iterator=iterator,
        max_concurrency=max_concurrency,
        next=next_,
        end=end,
        comment=comment,
    )


# -- serialization -----------------------------------------------------------


def model_to_document(model: ExecutableModel) -> dict[str, Any]:
    doc: dict[str, Any] = {}
    if model.comment is not None:
        doc["Comment"] = model.comment
    doc["StartAt"] = model.start_at
    doc["States"] = {name: _state_to_document(s) for name, s in model.states.items()}
    return doc


def _state_to_document(state: StateDef) -> dict[str, Any]:
    doc: dict[str, Any] = {"Type": state.state_type.value}
    if state.comment is not None:
        doc["Comment"] = state.comment
    if state.resource is not None:
        doc["Resource"] = state.resource
    if state.state_type is StateType.MAP:
        doc["ItemsPath"] = state.items_path
        if state.max_concurrency:
            doc["MaxConcurrency"] = state.max_concurrency
        doc["Iterator"] = model_to_document(state.iterator) if state.iterator else None
    if state.next is not None:
        doc["Next"] = state.next
    if state.end:
        doc["End"] = True
    return doc


def serialize_model(model: ExecutableModel) -> bytes:
    return json.dumps(model_to_document(model), indent=2, ensure_ascii=False).encode("utf-8")


# -- validation --------------------------------------------------------------


def validate_model(model: ExecutableModel, _prefix: str = "") -> list[Violation]:
    """Check every structural invariant; an empty list means deployable."""
    out: list[Violation] = []
    if model.start_at not in model.states:
        out.append(Violation("DanglingReference", _prefix.rstrip("/") or None, model.start_at))

    for name, state in model.states.items():
        where = f"{_prefix}{name}"
        if state.next is not None and state.next not in model.states:
            out.append(Violation("DanglingReference", where, state.next))
        if state.state_type in TERMINAL_TYPES:
            if state.next is not None:
                out.append(Violation("ForbiddenNext", where))
        elif state.end and state.next is not None:
            out.append(Violation("AmbiguousTransition", where))
        elif not state.end and state.next is None:
            out.append(Violation("MissingTransition", where))

        if state.state_type is StateType.TASK and not state.resource:
            out.append(Violation("MissingField", where, "Resource"))
        if state.state_type is StateType.MAP:
            if not state.items_path:
                out.append(Violation("MissingField", where, "ItemsPath"))
            if state.max_concurrency < 0:
                out.append(Violation("NegativeConcurrency", where))
            if state.iterator is None:
                out.append(Violation("MissingField", where, "Iterator"))
            else:
                out.extend(validate_model(state.iterator, f"{where}/"))

    if model.start_at in model.states and not _terminal_reachable(model):
        out.append(Violation("NoReachableTerminal", _prefix.rstrip("/") or None))
    return out


def _terminal_reachable(model: ExecutableModel) -> bool:
    seen: set[str] = set()
    current: Optional[str] = model.start_at
    # Without Choice states every path is linear, so a walk suffices.
    while current is not None and current in model.states and current not in seen:
        seen.add(current)
        state = model.states[current]
        if state.is_terminal:
            return True
        current = state.next
    # A walk that leaves the model already produced a DanglingReference.
    return current is not None and current not in model.states


def resolve_path(doc: Any, path: str) -> Any:
    """Resolve a ``$`` / ``$.a.b`` reference path inside ``doc``."""
    if path == "$":
        return doc
    if not path.startswith("$."):
        raise KeyError(path)
    value = doc
    for part in path[2:].split("."):
        if not isinstance(value, dict) or part not in value:
            raise KeyError(path)
        value = value[part]
    return value
