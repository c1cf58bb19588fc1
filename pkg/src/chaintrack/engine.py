"""Simulated serverless execution engine for states-language models.

The engine deploys models, runs instances, and emits the five engine-event
kinds (Deployment, Run, EnterState, Transition, Terminate). Concurrent Map
iterations are interleaved cooperatively: each call to :meth:`Engine.advance`
executes one scheduling round in which every runnable branch performs one
state. Every payload the engine emits is kept in a content-addressed store
so that tracking clients can fetch exactly the bytes that were hashed.
"""

from __future__ import annotations

import copy
import json
import logging
import random
import threading
import uuid
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional, Union

from .canonical import ContentHash, canonicalize, content_hash
from .clock import VirtualClock, WallClock
from .states import (
    ExecutableModel,
    StateDef,
    StateType,
    model_from_document,
    model_to_document,
    resolve_path,
    validate_model,
)
from .stream import Broadcaster, EventStream

logger = logging.getLogger(__name__)

DEFAULT_REGION = "sim-east-1"
DEFAULT_ENGINE_ID = "sim-engine-1"
# Chosen so the reference run's last state lands in "Iteration #2".
DEFAULT_SEED = 7


class EventType(str, Enum):
    DEPLOYMENT = "Deployment"
    RUN = "Run"
    ENTER_STATE = "EnterState"
    TRANSITION = "Transition"
    TERMINATE = "Terminate"


class RunStatus(str, Enum):
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    ABORTED = "Aborted"


class EngineError(Exception):
    pass


class DuplicateResource(EngineError):
    pass


class InvalidModel(EngineError):
    def __init__(self, violations):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = list(violations)


class AlreadyDeployed(EngineError):
    def __init__(self, model_hash: ContentHash):
        super().__init__(f"model {model_hash.abbrev()} is already deployed")
        self.model_hash = model_hash


class UnknownModel(EngineError):
    pass


class UnknownInstance(EngineError):
    pass


class AlreadyTerminated(EngineError):
    pass


class NotFound(EngineError):
    pass


class ArtifactCorrupted(EngineError):
    """Stored bytes no longer decode to a JSON document."""


@dataclass(frozen=True)
class EngineEvent:
    event_id: int
    event_type: EventType
    instance_guid: Optional[str]
    region: str
    timestamp: int
    payload: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_id": self.event_id,
            "event_type": self.event_type.value,
            "instance_guid": self.instance_guid,
            "region": self.region,
            "timestamp": self.timestamp,
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EngineEvent:
        return cls(
            event_id=d["event_id"],
            event_type=EventType(d["event_type"]),
            instance_guid=d.get("instance_guid"),
            region=d["region"],
            timestamp=d["timestamp"],
            payload=d["payload"],
        )


@dataclass
class InstanceRun:
    guid: str
    model_hash: ContentHash
    region: str
    started_at: int
    instance_hash: ContentHash
    ended_at: Optional[int] = None
    status: RunStatus = RunStatus.RUNNING


@dataclass(frozen=True)
class StateRecord:
    instance_guid: str
    event_id: int
    state_name: str
    state_type: StateType
    entered_at: int
    region: str
    iteration_label: Optional[str] = None
    exited_at: Optional[int] = None
    trace: tuple[str, ...] = ()

    def to_payload(self) -> dict[str, Any]:
        return {
            "kind": "state",
            "instance_guid": self.instance_guid,
            "event_id": self.event_id,
            "state_name": self.state_name,
            "state_type": self.state_type.value,
            "iteration_label": self.iteration_label,
            "entered_at": self.entered_at,
            "exited_at": self.exited_at,
            "region": self.region,
            "trace": list(self.trace),
        }

    @classmethod
    def from_payload(cls, p: dict[str, Any]) -> StateRecord:
        return cls(
            instance_guid=p["instance_guid"],
            event_id=p["event_id"],
            state_name=p["state_name"],
            state_type=StateType(p["state_type"]),
            entered_at=p["entered_at"],
            region=p["region"],
            iteration_label=p.get("iteration_label"),
            exited_at=p.get("exited_at"),
            trace=tuple(p.get("trace", ())),
        )


Behavior = Callable[[Any], Any]


@dataclass(frozen=True)
class TaskHandler:
    resource_uri: str
    behavior: Behavior


# -- interpreter internals ---------------------------------------------------


@dataclass(eq=False)
class _Branch:
    model: ExecutableModel
    current: Optional[str]
    data: Any
    label: Optional[str] = None
    index: int = 0
    parent: Optional[_MapFrame] = None
    prev_hash: Optional[str] = None
    edge: str = "next"
    waiting: Optional[_MapFrame] = None
    done: bool = False
    output: Any = None
    last_hash: Optional[str] = None


@dataclass(eq=False)
class _MapFrame:
    owner: _Branch
    state: StateDef
    items: list
    origin_hash: Optional[str]
    children: list[_Branch] = field(default_factory=list)
    results: dict[int, Any] = field(default_factory=dict)
    last_finished_hash: Optional[str] = None

    @property
    def limit(self) -> int:
        return self.state.max_concurrency or len(self.items)

    def active(self) -> int:
        return sum(1 for c in self.children if not c.done)


@dataclass(eq=False)
class _Runtime:
    run: InstanceRun
    rng: random.Random
    root: _Branch
    next_event_id: int = 1
    trace: list[str] = field(default_factory=list)
    pending_status: Optional[RunStatus] = None


class _TaskFailure(Exception):
    pass


# -- engine ------------------------------------------------------------------


class Engine:
    """In-memory stand-in for a managed state-machine service.

    Timestamps come from ``clock`` (one step per emitted event). Setting
    ``clock_skew_ms`` shifts the timestamps the engine reports without
    moving the shared clock, which is how clock drift is simulated.
    """

    def __init__(
        self,
        clock: Union[VirtualClock, WallClock, None] = None,
        region: str = DEFAULT_REGION,
        seed: int = DEFAULT_SEED,
        emit_transitions: bool = True,
        engine_id: str = DEFAULT_ENGINE_ID,
        journal_path: Union[str, Path, None] = None,
    ) -> None:
        self.clock = clock or VirtualClock()
        self.region = region
        self.seed = seed
        self.emit_transitions = emit_transitions
        self.engine_id = engine_id
        self.clock_skew_ms = 0
        self._rng = random.Random(seed)
        self._handlers: dict[str, TaskHandler] = {}
        self._models: dict[ContentHash, ExecutableModel] = {}
        self._instances: dict[str, InstanceRun] = {}
        self._runtimes: dict[str, _Runtime] = {}
        self._store: dict[str, tuple[str, bytes]] = {}
        self._guid_index: dict[str, str] = {}
        self._deploy_counter = 0
        self._bus: Broadcaster[EngineEvent] = Broadcaster()
        self._lock = threading.RLock()
        self.events: list[EngineEvent] = []
        self._journal = Path(journal_path) if journal_path else None

    # -- handlers & models ---------------------------------------------------

    def register_task_handler(self, resource_uri: str, handler: Union[TaskHandler, Behavior]) -> TaskHandler:
        if resource_uri in self._handlers:
            raise DuplicateResource(resource_uri)
        if not isinstance(handler, TaskHandler):
            handler = TaskHandler(resource_uri, handler)
        self._handlers[resource_uri] = handler
        return handler

    def deploy_model(self, model: ExecutableModel, exist_ok: bool = False):
        """Deploy ``model``; returns ``(model_hash, deployment_event)``.

        With ``exist_ok`` a redeployment returns ``(model_hash, None)``
        instead of raising :class:`AlreadyDeployed`.
        """
        violations = validate_model(model)
        if violations:
            raise InvalidModel(violations)
        payload = {"kind": "model", "document": model_to_document(model)}
        model_hash = content_hash(payload)
        with self._lock:
            if model_hash in self._models:
                if exist_ok:
                    return model_hash, None
                raise AlreadyDeployed(model_hash)
            self._models[model_hash] = model
            self._put("model", model_hash, payload)
            self._deploy_counter += 1
            event = self._emit(self._deploy_counter, EventType.DEPLOYMENT, None, payload)
        return model_hash, event

    def models(self) -> list[ContentHash]:
        return list(self._models)

    # -- instances -------------------------------------------------------------

    def run(self, model_hash: Union[ContentHash, str], input: Any = None):
        """Create an instance of a deployed model; returns ``(guid, run_event)``."""
        model_hash = ContentHash.from_hex(model_hash) if isinstance(model_hash, str) else model_hash
        with self._lock:
            model = self._models.get(model_hash)
            if model is None:
                raise UnknownModel(str(model_hash))
            guid = str(uuid.UUID(int=self._rng.getrandbits(128), version=4))
            rng = random.Random(self._rng.getrandbits(64))
            started_at = self._timestamp()
            payload = {
                "kind": "instance",
                "guid": guid,
                "model_hash": model_hash.hex(),
                "region": self.region,
                "started_at": started_at,
            }
            instance_hash = content_hash(payload)
            run = InstanceRun(guid, model_hash, self.region, started_at, instance_hash)
            self._instances[guid] = run
            root = _Branch(model=model, current=model.start_at, data=copy.deepcopy(input))
            rt = _Runtime(run=run, rng=rng, root=root)
            self._runtimes[guid] = rt
            self._put("instance", instance_hash, payload)
            self._guid_index[guid] = instance_hash.hex()
            event = self._emit(self._next_id(rt), EventType.RUN, guid, payload, started_at)
        return guid, event

    def instance(self, guid: str) -> InstanceRun:
        try:
            return self._instances[guid]
        except KeyError:
            raise UnknownInstance(guid) from None

    def instances(self) -> list[InstanceRun]:
        return list(self._instances.values())

    def advance(self, guid: str) -> list[EngineEvent]:
        """Run one scheduling round of ``guid`` and return the events emitted.

        Once every branch has finished, the following call emits the
        Terminate event.
        """
        with self._lock:
            run = self.instance(guid)
            if run.status is not RunStatus.RUNNING:
                raise AlreadyTerminated(guid)
            rt = self._runtimes.get(guid)
            if rt is None:
                raise UnknownInstance(f"{guid} has no live runtime")
            if rt.pending_status is not None:
                return [self._terminate(rt, rt.pending_status)]

            out: list[EngineEvent] = []
            try:
                self._settle(rt, out)
                if rt.pending_status is not None:
                    return out
                for branch in self._schedule(rt):
                    self._step(rt, branch, out)
                self._settle(rt, out)
            except _TaskFailure as exc:
                logger.info("instance %s failed: %s", guid, exc)
                out.append(self._terminate(rt, RunStatus.FAILED))
            return out

    def run_to_completion(self, guid: str, max_rounds: int = 100_000) -> list[EngineEvent]:
        out: list[EngineEvent] = []
        for _ in range(max_rounds):
            if self.instance(guid).status is not RunStatus.RUNNING:
                return out
            out.extend(self.advance(guid))
        raise EngineError(f"instance {guid} did not finish within {max_rounds} rounds")

    def terminate(self, guid: str, status: RunStatus = RunStatus.ABORTED) -> EngineEvent:
        with self._lock:
            run = self.instance(guid)
            if run.status is not RunStatus.RUNNING:
                raise AlreadyTerminated(guid)
            rt = self._runtimes.get(guid)
            if rt is None:
                raise UnknownInstance(f"{guid} has no live runtime")
            return self._terminate(rt, RunStatus(status))

    # -- artifacts -------------------------------------------------------------

    def fetch_artifact(self, kind: str, reference: Union[ContentHash, str]) -> dict[str, Any]:
        """Return the exact payload that was hashed when the artifact was emitted.

        ``reference`` is a content hash; instances may also be looked up by GUID.
        """
        key = self._resolve(kind, reference)
        stored = self._store.get(key) if key else None
        if stored is None or stored[0] != kind:
            raise NotFound(f"{kind} {reference}")
        try:
            return json.loads(stored[1].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ArtifactCorrupted(f"{kind} {reference}: {exc}") from exc

    def artifact_bytes(self, kind: str, reference: Union[ContentHash, str]) -> bytes:
        key = self._resolve(kind, reference)
        stored = self._store.get(key) if key else None
        if stored is None or stored[0] != kind:
            raise NotFound(f"{kind} {reference}")
        return stored[1]

    def tamper_artifact(self, kind: str, reference: Union[ContentHash, str], mutate: Callable[[bytes], bytes]) -> None:
        """Test hook: replace the stored bytes of an artifact in place."""
        key = self._resolve(kind, reference)
        if not key or key not in self._store:
            raise NotFound(f"{kind} {reference}")
        stored_kind, data = self._store[key]
        self._store[key] = (stored_kind, mutate(data))

    def _resolve(self, kind: str, reference: Union[ContentHash, str]) -> Optional[str]:
        if isinstance(reference, ContentHash):
            return reference.hex()
        if kind == "instance" and reference in self._guid_index:
            return self._guid_index[reference]
        try:
            return ContentHash.from_hex(reference).hex()
        except (ValueError, TypeError):
            return None

    def _put(self, kind: str, h: ContentHash, payload: dict[str, Any]) -> None:
        self._store[h.hex()] = (kind, canonicalize(payload))

    # -- event streams ---------------------------------------------------------

    def subscribe_engine_events(
        self,
        guid: Optional[str] = None,
        callback: Optional[Callable[[EngineEvent], None]] = None,
        replay: bool = False,
    ) -> EventStream[EngineEvent]:
        """Subscribe to engine events, optionally for one instance only.

        With ``callback`` the events are delivered synchronously as they are
        emitted; otherwise they queue up on the returned stream.
        """
        def match(e: EngineEvent) -> bool:
            return guid is None or e.instance_guid == guid

        with self._lock:
            backlog = list(self.events) if replay else []
            return self._bus.subscribe(match, backlog, callback)

    def unsubscribe(self, stream: EventStream[EngineEvent]) -> None:
        self._bus.unsubscribe(stream)

    # -- journal ---------------------------------------------------------------

    @classmethod
    def from_journal(cls, journal_path: Union[str, Path], **kwargs) -> Engine:
        """Rebuild engine storage from a JSON-lines event journal.

        Instances that were still running when the journal was written are
        restored without a runtime and cannot be advanced.
        """
        engine = cls(journal_path=None, **kwargs)
        path = Path(journal_path)
        if path.exists():
            with path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        engine._replay(EngineEvent.from_dict(json.loads(line)))
        engine._journal = path
        return engine

    def _replay(self, event: EngineEvent) -> None:
        p = event.payload
        kind = p["kind"]
        h = content_hash(p)
        self._put(kind, h, p)
        if event.event_type is EventType.DEPLOYMENT:
            self._models[h] = model_from_document(p["document"])
            self._deploy_counter = max(self._deploy_counter, event.event_id)
        elif event.event_type is EventType.RUN:
            self._rng.getrandbits(128)
            self._rng.getrandbits(64)
            self._instances[p["guid"]] = InstanceRun(
                p["guid"], ContentHash.from_hex(p["model_hash"]), p["region"], p["started_at"], h
            )
            self._guid_index[p["guid"]] = h.hex()
        elif event.event_type is EventType.TERMINATE:
            run = self._instances[event.instance_guid]
            run.status = RunStatus(p["status"])
            run.ended_at = p["ended_at"]
        self.clock.advance_to(event.timestamp)
        self.events.append(event)

    # -- internals -------------------------------------------------------------

    def _timestamp(self) -> int:
        return self.clock.tick() + self.clock_skew_ms

    def _next_id(self, rt: _Runtime) -> int:
        eid = rt.next_event_id
        rt.next_event_id += 1
        return eid

    def _emit(
        self,
        event_id: int,
        event_type: EventType,
        guid: Optional[str],
        payload: dict[str, Any],
        timestamp: Optional[int] = None,
    ) -> EngineEvent:
        event = EngineEvent(
            event_id=event_id,
            event_type=event_type,
            instance_guid=guid,
            region=self.region,
            timestamp=self._timestamp() if timestamp is None else timestamp,
            payload=copy.deepcopy(payload),
        )
        self.events.append(event)
        if self._journal is not None:
            with self._journal.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(event.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
        self._bus.publish(event)
        return event

    def _terminate(self, rt: _Runtime, status: RunStatus) -> EngineEvent:
        run = rt.run
        ended_at = self._timestamp()
        payload = {
            "kind": "termination",
            "instance_hash": run.instance_hash.hex(),
            "status": status.value,
            "ended_at": ended_at,
        }
        self._put("termination", content_hash(payload), payload)
        run.status = status
        run.ended_at = ended_at
        del self._runtimes[run.guid]
        return self._emit(self._next_id(rt), EventType.TERMINATE, run.guid, payload, ended_at)

    def _schedule(self, rt: _Runtime) -> list[_Branch]:
        """Runnable leaves in round-robin (iteration index) order.

        Steps that complete a Map iteration are moved to the end of the round
        in seeded random order, since concurrent iterations finish in no
        fixed order.
        """
        leaves: list[_Branch] = []

        def walk(b: _Branch) -> None:
            if b.done:
                return
            if b.waiting is not None:
                for child in b.waiting.children:
                    walk(child)
                return
            if b.current is not None:
                leaves.append(b)

        walk(rt.root)
        regular = [b for b in leaves if b.parent is None or not b.model.states[b.current].is_terminal]
        finishing = [b for b in leaves if b not in regular]
        rt.rng.shuffle(finishing)
        return regular + finishing

    def _step(self, rt: _Runtime, branch: _Branch, out: list[EngineEvent]) -> None:
        name = branch.current
        state = branch.model.states[name]
        run = rt.run
        event_id = self._next_id(rt)
        entered_at = self._timestamp()
        exited_at = entered_at + self.clock.step_ms if self.clock.mode == "virtual" else None
        record = StateRecord(
            instance_guid=run.guid,
            event_id=event_id,
            state_name=name,
            state_type=state.state_type,
            entered_at=entered_at,
            region=self.region,
            iteration_label=branch.label,
            exited_at=exited_at,
            trace=tuple(rt.trace),
        )
        payload = record.to_payload()
        h = content_hash(payload)
        self._put("state", h, payload)
        rt.trace.append(h.hex())
        out.append(self._emit(event_id, EventType.ENTER_STATE, run.guid, payload, entered_at))
        if branch.prev_hash is not None:
            self._transition(rt, branch.prev_hash, h.hex(), branch.edge, out)

        if state.state_type is StateType.TASK:
            handler = self._handlers.get(state.resource)
            if handler is None:
                raise _TaskFailure(f"no handler registered for {state.resource}")
            try:
                output = handler.behavior(copy.deepcopy(branch.data))
            except Exception as exc:
                raise _TaskFailure(f"{name}: {exc!r}") from exc
        elif state.state_type is StateType.FAIL:
            rt.pending_status = RunStatus.FAILED
            output = branch.data
        else:
            output = branch.data

        if state.is_terminal:
            branch.done = True
            branch.current = None
            branch.output = output
            branch.last_hash = h.hex()
        else:
            branch.current = state.next
            branch.data = output
            branch.prev_hash = h.hex()
            branch.edge = "next"

    def _transition(self, rt: _Runtime, from_hash: str, to_hash: str, edge: str, out: list[EngineEvent]) -> None:
        if not self.emit_transitions:
            return
        event_id = self._next_id(rt)
        ts = self._timestamp()
        payload = {
            "kind": "transition",
            "instance_hash": rt.run.instance_hash.hex(),
            "from": from_hash,
            "to": to_hash,
            "edge": edge,
            "event_id": event_id,
            "timestamp": ts,
            "region": self.region,
        }
        self._put("transition", content_hash(payload), payload)
        out.append(self._emit(event_id, EventType.TRANSITION, rt.run.guid, payload, ts))

    def _settle(self, rt: _Runtime, out: list[EngineEvent]) -> None:
        """Resolve Map fan-out, refill and fan-in until nothing structural is left."""
        if rt.pending_status is not None:
            return
        changed = True
        while changed:
            changed = False
            for branch in self._branches(rt.root):
                if branch.done:
                    continue
                if branch.waiting is not None:
                    changed |= self._pump_map(rt, branch.waiting, out)
                elif branch.current is not None:
                    state = branch.model.states[branch.current]
                    if state.state_type is StateType.MAP:
                        self._expand_map(rt, branch, state)
                        changed = True
        if rt.root.done:
            rt.pending_status = RunStatus.SUCCEEDED

    def _branches(self, root: _Branch) -> list[_Branch]:
        out = [root]
        if root.waiting is not None:
            for child in root.waiting.children:
                out.extend(self._branches(child))
        return out

    def _expand_map(self, rt: _Runtime, branch: _Branch, state: StateDef) -> None:
        try:
            items = resolve_path(branch.data, state.items_path)
        except KeyError:
            items = None
        if not isinstance(items, list):
            raise _TaskFailure(f"{branch.current}: ItemsPath {state.items_path} is not a list")
        branch.waiting = _MapFrame(owner=branch, state=state, items=items, origin_hash=branch.prev_hash)

    def _pump_map(self, rt: _Runtime, frame: _MapFrame, out: list[EngineEvent]) -> bool:
        changed = False
        finished = [c for c in frame.children if c.done and c.index not in frame.results]
        for child in finished:
            frame.results[child.index] = child.output
        # The join leaves from whichever final state was entered last.
        ends = [c.last_hash for c in finished if c.last_hash is not None]
        if ends:
            frame.last_finished_hash = max(ends, key=rt.trace.index)
        while len(frame.children) < len(frame.items) and frame.active() < frame.limit:
            i = len(frame.children)
            label = f"Iteration #{i}"
            if frame.owner.label:
                label = f"{frame.owner.label} / {label}"
            frame.children.append(
                _Branch(
                    model=frame.state.iterator,
                    current=frame.state.iterator.start_at,
                    data=copy.deepcopy(frame.items[i]),
                    label=label,
                    index=i,
                    parent=frame,
                    prev_hash=frame.origin_hash,
                    edge="fan-out",
                )
            )
            changed = True
        if len(frame.results) == len(frame.items):
            self._finish_map(rt, frame, out)
            changed = True
        return changed

    def _finish_map(self, rt: _Runtime, frame: _MapFrame, out: list[EngineEvent]) -> None:
        owner = frame.owner
        owner.waiting = None
        output = [frame.results[i] for i in range(len(frame.items))]
        join_from = frame.last_finished_hash
        if frame.state.is_terminal:
            owner.done = True
            owner.current = None
            owner.output = output
            owner.last_hash = join_from or owner.prev_hash
            if join_from is not None and owner.parent is None:
                # The fan-in has no successor state: record it on the final state.
                self._transition(rt, join_from, join_from, "join", out)
        else:
            owner.current = frame.state.next
            owner.data = output
            if join_from is not None:
                owner.prev_hash = join_from
                owner.edge = "join"
