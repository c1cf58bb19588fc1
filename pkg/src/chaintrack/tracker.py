"""Tracking clients.

A :class:`Controller` turns engine events into signed contract calls. An
:class:`Observer` turns contract events back into a verified instance
protocol: for each event it fetches the artifact from the engine, checks
integrity (hash recomputation), time (engine vs. block timestamp) and
address lineage (the registering account matches the contract owner and
the accounts that registered the referenced model and instance), and only
then records the entry in its warehouse.
"""

from __future__ import annotations

import json
import logging
import sqlite3
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from . import contract as c
from .canonical import ContentHash, UnsupportedValue, content_hash
from .engine import Engine, EngineError, EngineEvent, EventType
from .ledger import ContractEvent, Ledger, LedgerError, Receipt
from .stream import EventStream
from .warehouse import WarehouseUnavailable

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE_MS = 300_000

ARTIFACT_KIND = {
    c.REGISTER_MODEL: "model",
    c.REGISTER_INSTANCE: "instance",
    c.REGISTER_STATE: "state",
    c.REGISTER_TRANSITION: "transition",
    c.TERMINATE_INSTANCE: "termination",
}


class TrackerError(Exception):
    pass


class EngineUnavailable(TrackerError):
    pass


class HashingFailed(TrackerError):
    pass


class LedgerRejected(TrackerError):
    def __init__(self, message: str, receipt: Optional[Receipt] = None, error: Optional[str] = None):
        super().__init__(message)
        self.receipt = receipt
        self.error = error or (receipt.revert_error if receipt else None)


class UnknownInstance(TrackerError):
    pass


# -- verification --------------------------------------------------------------


class Verdict(str, Enum):
    VALID = "Valid"
    INVALID = "Invalid"


class Check(str, Enum):
    INTEGRITY = "Integrity"
    TIME = "Time"
    ADDRESS_LINEAGE = "AddressLineage"


@dataclass(frozen=True)
class ValidationResult:
    verdict: Verdict
    failed_check: Optional[Check] = None
    detail: str = ""

    @property
    def valid(self) -> bool:
        return self.verdict is Verdict.VALID

    def __str__(self) -> str:
        if self.valid:
            return "Valid"
        return f"Invalid({self.failed_check.value}: {self.detail})"


VALID = ValidationResult(Verdict.VALID)


def _invalid(check: Check, detail: str) -> ValidationResult:
    return ValidationResult(Verdict.INVALID, check, detail)


@dataclass
class InstanceLineage:
    model_hash: str
    sender: str
    guid: Optional[str]


@dataclass
class Lineage:
    """What an observer has already verified: owners, models, instances, states."""

    owners: dict[str, str] = field(default_factory=dict)
    models: dict[str, str] = field(default_factory=dict)
    instances: dict[str, InstanceLineage] = field(default_factory=dict)
    states: dict[str, str] = field(default_factory=dict)


def _norm(h: Any) -> Optional[str]:
    try:
        return ContentHash.from_hex(h).hex()
    except (ValueError, TypeError, AttributeError):
        return None


def engine_timestamp(event_type: str, args: dict[str, Any], payload: dict[str, Any]) -> Any:
    """The engine-side timestamp an artifact is checked against its block time with."""
    if event_type == c.REGISTER_MODEL:
        return (args.get("meta") or {}).get("engine_timestamp")
    key = {
        c.REGISTER_INSTANCE: "started_at",
        c.REGISTER_STATE: "entered_at",
        c.REGISTER_TRANSITION: "timestamp",
        c.TERMINATE_INSTANCE: "ended_at",
    }[event_type]
    return payload.get(key)


def verify_artifact(
    record: ContractEvent,
    payload: Optional[dict[str, Any]],
    lineage: Lineage,
    tolerance_ms: int = DEFAULT_TOLERANCE_MS,
) -> ValidationResult:
    """Validate one registered artifact; checks run Integrity, Time, AddressLineage."""
    kind = ARTIFACT_KIND.get(record.event_type)
    if kind is None:
        return _invalid(Check.INTEGRITY, f"{record.event_type} does not register an artifact")
    args = record.args or {}
    meta = args.get("meta") or {}
    registered = _norm(args.get(c.HASH_ARG[record.event_type]))
    instance_hash = _norm(args.get("instance_hash"))

    # Integrity
    if payload is None:
        return _invalid(Check.INTEGRITY, "payload unavailable")
    if registered is None:
        return _invalid(Check.INTEGRITY, "registered hash malformed")
    try:
        actual = content_hash(payload).hex()
    except UnsupportedValue as exc:
        return _invalid(Check.INTEGRITY, f"payload not canonicalizable: {exc}")
    if actual != registered:
        return _invalid(Check.INTEGRITY, f"hash mismatch: registered {registered[:8]}, recomputed {actual[:8]}")
    if payload.get("kind") != kind:
        return _invalid(Check.INTEGRITY, f"payload kind {payload.get('kind')!r} is not {kind!r}")
    if kind == "instance" and _norm(payload.get("model_hash")) != _norm(args.get("model_hash")):
        return _invalid(Check.INTEGRITY, "instance payload names a different model")
    if kind == "state":
        inst = lineage.instances.get(instance_hash or "")
        if inst is not None and inst.guid != payload.get("instance_guid"):
            return _invalid(Check.INTEGRITY, "state payload belongs to a different instance")
    if kind in ("transition", "termination") and _norm(payload.get("instance_hash")) != instance_hash:
        return _invalid(Check.INTEGRITY, f"{kind} payload belongs to a different instance")
    if kind == "transition" and (
        _norm(payload.get("from")) != _norm(meta.get("from")) or _norm(payload.get("to")) != _norm(meta.get("to"))
    ):
        return _invalid(Check.INTEGRITY, "transition endpoints differ from registration")

    # Time
    ts = engine_timestamp(record.event_type, args, payload)
    if isinstance(ts, bool) or not isinstance(ts, int):
        return _invalid(Check.TIME, "engine timestamp missing")
    drift = abs(ts - record.block_timestamp)
    if drift > tolerance_ms:
        return _invalid(Check.TIME, f"engine and block timestamps differ by {drift} ms (> {tolerance_ms})")

    # Address lineage
    owner = lineage.owners.get(record.contract)
    if owner is None:
        return _invalid(Check.ADDRESS_LINEAGE, "contract deployment not observed")
    if record.sender != owner:
        return _invalid(Check.ADDRESS_LINEAGE, f"sender {record.sender} is not the contract owner {owner}")
    if kind == "instance":
        model_sender = lineage.models.get(_norm(args.get("model_hash")) or "")
        if model_sender is None:
            return _invalid(Check.ADDRESS_LINEAGE, "model not verified")
        if model_sender != record.sender:
            return _invalid(Check.ADDRESS_LINEAGE, "sender differs from the model's registrant")
    elif kind in ("state", "transition", "termination"):
        inst = lineage.instances.get(instance_hash or "")
        if inst is None:
            return _invalid(Check.ADDRESS_LINEAGE, "instance not verified")
        if inst.sender != record.sender:
            return _invalid(Check.ADDRESS_LINEAGE, "sender differs from the instance's registrant")
        if lineage.models.get(inst.model_hash) != record.sender:
            return _invalid(Check.ADDRESS_LINEAGE, "sender differs from the model's registrant")
        if kind == "transition":
            for end in ("from", "to"):
                if lineage.states.get(_norm(meta.get(end)) or "") != instance_hash:
                    return _invalid(Check.ADDRESS_LINEAGE, f"transition {end}-state is not a verified state of the instance")
    return VALID


# -- protocol entries ----------------------------------------------------------


@dataclass(frozen=True)
class ProtocolEntry:
    position: int
    event_type: str
    artifact_kind: str
    artifact_hash: str
    engine_timestamp: int
    block_timestamp: int
    transaction_hash: str
    block_hash: str
    block_height: int
    event_index: int
    sender: str
    contract: str
    state_name: Optional[str] = None
    iteration_label: Optional[str] = None
    instance_hash: Optional[str] = None
    model_hash: Optional[str] = None
    tx_index: int = 0
    details: dict[str, Any] = field(default_factory=dict, compare=True)
    verification: str = "Valid"

    def to_row(self) -> dict[str, Any]:
        return {
            "position": self.position,
            "event_type": self.event_type,
            "artifact_kind": self.artifact_kind,
            "artifact_hash": self.artifact_hash,
            "state_name": self.state_name,
            "iteration_label": self.iteration_label,
            "engine_timestamp": self.engine_timestamp,
            "block_timestamp": self.block_timestamp,
            "transaction_hash": self.transaction_hash,
            "block_hash": self.block_hash,
            "block_height": self.block_height,
            "event_index": self.event_index,
            "verification": self.verification,
        }


@dataclass(frozen=True)
class ChainContext:
    """Ledger-side facts the warehouse needs alongside a protocol entry."""

    deployment_address: str
    client_id: Optional[str]
    fee_units: int
    fee_unit: str
    unit_price: int
    observed_at: int


def protocol_bytes(entries: Iterable[ProtocolEntry]) -> bytes:
    """Stable byte serialization of a protocol, for cross-client comparison."""
    return "\n".join(json.dumps(e.to_row(), sort_keys=True) for e in entries).encode("utf-8")


# -- controller ------------------------------------------------------------------


class Controller:
    """Registers every engine event with the tracking contract."""

    def __init__(self, engine: Engine, ledger: Ledger, account, contract_address: str) -> None:
        self.engine = engine
        self.ledger = ledger
        self.account = account
        self.contract_address = contract_address
        self._instances: dict[str, str] = {}
        self.receipts: list[Receipt] = []

    @classmethod
    def deploy_contract(cls, engine: Engine, ledger: Ledger, account, writers: Iterable[str] = ()) -> Controller:
        tx = ledger.prepare(account, c.DEPLOY, {"engine_id": engine.engine_id, "writers": sorted(writers)})
        receipt = ledger.submit_transaction(tx)
        if not receipt.ok:
            raise LedgerRejected(f"contract deployment reverted: {receipt.revert_reason}", receipt)
        return cls(engine, ledger, account, receipt.contract_address)

    def attach(self, guid: Optional[str] = None) -> EventStream[EngineEvent]:
        """Register engine events synchronously as the engine emits them."""
        return self.engine.subscribe_engine_events(guid, callback=self.process_engine_event)

    def process(self, events: Iterable[EngineEvent]) -> list[Receipt]:
        return [self.process_engine_event(e) for e in events]

    def _instance_hash(self, guid: str) -> str:
        if guid in self._instances:
            return self._instances[guid]
        try:
            payload = self.engine.fetch_artifact("instance", guid)
        except EngineError as exc:
            raise EngineUnavailable(f"instance {guid}: {exc}") from exc
        return content_hash(payload).hex()

    def build_call(self, event: EngineEvent) -> tuple[str, dict[str, Any]]:
        """Map an engine event to a contract function name and its arguments."""
        payload = event.payload
        try:
            h = content_hash(payload).hex()
        except UnsupportedValue as exc:
            raise HashingFailed(str(exc)) from exc
        base = {"engine_timestamp": event.timestamp, "event_id": event.event_id}
        et = event.event_type
        if et is EventType.DEPLOYMENT:
            meta = {**base, "region": event.region, "engine_id": self.engine.engine_id}
            return c.REGISTER_MODEL, {"model_hash": h, "meta": meta}
        if et is EventType.RUN:
            self._instances[event.instance_guid] = h
            meta = {**base, "guid": event.instance_guid, "region": event.region}
            return c.REGISTER_INSTANCE, {"instance_hash": h, "model_hash": payload["model_hash"], "meta": meta}
        h_i = self._instance_hash(event.instance_guid)
        if et is EventType.ENTER_STATE:
            return c.REGISTER_STATE, {"state_hash": h, "instance_hash": h_i, "meta": base}
        if et is EventType.TRANSITION:
            meta = {**base, "from": payload["from"], "to": payload["to"]}
            return c.REGISTER_TRANSITION, {"transition_hash": h, "instance_hash": h_i, "meta": meta}
        if et is EventType.TERMINATE:
            meta = {**base, "status": payload["status"]}
            return c.TERMINATE_INSTANCE, {"instance_hash": h_i, "termination_hash": h, "meta": meta}
        raise TrackerError(f"unhandled engine event {et}")

    def process_engine_event(self, event: EngineEvent) -> Receipt:
        function, args = self.build_call(event)
        try:
            tx = self.ledger.prepare(self.account, function, args, to=self.contract_address)
            receipt = self.ledger.submit_transaction(tx)
        except LedgerError as exc:
            raise LedgerRejected(f"{function}: {exc}", error=type(exc).__name__) from exc
        self.receipts.append(receipt)
        if not receipt.ok:
            raise LedgerRejected(f"{function} reverted: {receipt.revert_error} ({receipt.revert_reason})", receipt)
        return receipt


# -- observer ------------------------------------------------------------------


class Observer:
    """Reconstructs and verifies instance protocols from contract events.

    ``clock=None`` stamps each fact with the block time of its event, which
    keeps independent observers byte-identical; pass a clock to record the
    local observation time instead.
    """

    def __init__(
        self,
        ledger: Ledger,
        engine: Engine,
        contract_address: str,
        warehouse=None,
        tolerance_ms: int = DEFAULT_TOLERANCE_MS,
        clock=None,
        client_ids: Optional[dict[str, str]] = None,
        log_path: Union[str, Path, None] = None,
        cursor_path: Union[str, Path, None] = None,
    ) -> None:
        if tolerance_ms <= 0:
            raise ValueError("tolerance_ms must be positive")
        self.ledger = ledger
        self.engine = engine
        self.contract = contract_address
        self.warehouse = warehouse
        self.tolerance_ms = tolerance_ms
        self.clock = clock
        self.client_ids = dict(client_ids or {})
        self.log_path = Path(log_path) if log_path else None
        self.cursor_path = Path(cursor_path) if cursor_path else None
        self.lineage = Lineage()
        self.entries: list[ProtocolEntry] = []
        self.discards: list[dict[str, Any]] = []
        self.results: list[tuple[ContractEvent, ValidationResult]] = []
        self._counters: dict[str, int] = {}
        self._last: Optional[tuple[int, int, int]] = None
        self._persisted: Optional[tuple[int, int, int]] = self._load_cursor()
        # (entry, context) pairs awaiting a write; a ContractDeployed event has no context.
        self._buffer: deque[tuple[Any, Optional[ChainContext]]] = deque()
        self._stream: Optional[EventStream[ContractEvent]] = None

    # -- subscriptions ---------------------------------------------------------

    def subscribe(self, from_height: Optional[int] = 0) -> EventStream[ContractEvent]:
        """Subscribe to the contract's events; ``from_height`` replays history first."""
        self._stream = self.ledger.subscribe_events(self.contract, from_height=from_height)
        return self._stream

    def sync(self) -> list[ProtocolEntry]:
        """Process everything queued on the subscription."""
        if self._stream is None:
            raise TrackerError("observer is not subscribed")
        out = []
        for event in self._stream.drain():
            entry = self.on_contract_event(event)
            if entry is not None:
                out.append(entry)
        return out

    def replay(self, from_height: int = 0) -> list[ProtocolEntry]:
        """Process the sealed chain directly, without a subscription."""
        out = []
        for event in self.ledger.get_events(self.contract, from_height=from_height):
            entry = self.on_contract_event(event)
            if entry is not None:
                out.append(entry)
        return out

    # -- event handling ----------------------------------------------------------

    def on_contract_event(self, event: ContractEvent) -> Optional[ProtocolEntry]:
        if event.contract != self.contract:
            return None
        if self._last is not None and event.position <= self._last:
            return None
        self._last = event.position
        replaying = self._persisted is not None and event.position <= self._persisted

        if event.event_type == c.CONTRACT_DEPLOYED:
            if event.args.get("deployment_address") == event.sender:
                self.lineage.owners[event.contract] = event.sender
                if self.warehouse is not None and not replaying:
                    self._buffer.append((event, None))
                    self.flush()
            self._save_cursor(event)
            return None

        kind = ARTIFACT_KIND.get(event.event_type)
        if kind is None:
            return None
        registered = event.args.get(c.HASH_ARG[event.event_type])
        try:
            payload = self.engine.fetch_artifact(kind, registered)
        except EngineError as exc:
            logger.debug("fetch %s %s failed: %s", kind, registered, exc)
            payload = None
        result = verify_artifact(event, payload, self.lineage, self.tolerance_ms)
        self.results.append((event, result))
        self._log({
            "notice": "verification",
            "event_type": event.event_type,
            "artifact_hash": registered,
            "transaction_hash": event.transaction_hash.prefixed(),
            "event_index": event.event_index,
            "block_height": event.block_height,
            "verdict": result.verdict.value,
            "failed_check": result.failed_check.value if result.failed_check else None,
            "detail": result.detail,
        })
        if not result.valid:
            notice = {
                "notice": "discard",
                "reason": "artifact cannot be attributed to the contract's client",
                "event_type": event.event_type,
                "artifact_hash": registered,
                "transaction_hash": event.transaction_hash.prefixed(),
                "event_index": event.event_index,
                "failed_check": result.failed_check.value,
                "detail": result.detail,
            }
            self.discards.append(notice)
            self._log(notice)
            logger.info("discarded %s %s: %s", event.event_type, registered, result)
            self._save_cursor(event)
            return None

        entry = self._make_entry(event, kind, payload)
        self._remember(entry)
        self.entries.append(entry)
        if self.warehouse is not None and not replaying:
            tx = self.ledger.get_transaction(event.transaction_hash)
            ctx = ChainContext(
                deployment_address=self.lineage.owners[event.contract],
                client_id=self.client_ids.get(event.sender),
                fee_units=tx.fee_units,
                fee_unit=tx.fee_unit,
                unit_price=tx.unit_price,
                observed_at=self.clock.now() if self.clock is not None else event.block_timestamp,
            )
            self._buffer.append((entry, ctx))
            self.flush()
        self._save_cursor(event)
        return entry

    def _make_entry(self, event: ContractEvent, kind: str, payload: dict[str, Any]) -> ProtocolEntry:
        args = event.args
        artifact_hash = _norm(args[c.HASH_ARG[event.event_type]])
        instance_hash = _norm(args.get("instance_hash"))
        model_hash = _norm(args.get("model_hash"))
        details: dict[str, Any] = {}
        state_name = iteration_label = None
        if kind == "model":
            key = artifact_hash
            model_hash = artifact_hash
        else:
            key = instance_hash
            if kind == "instance":
                details = {"guid": payload["guid"], "region": payload["region"]}
            else:
                model_hash = self.lineage.instances[instance_hash].model_hash
            if kind == "state":
                state_name = payload["state_name"]
                iteration_label = payload.get("iteration_label")
                details = {"entered_at": payload["entered_at"], "exited_at": payload.get("exited_at")}
            elif kind == "transition":
                details = {"from": _norm(payload["from"]), "to": _norm(payload["to"]), "edge": payload.get("edge")}
            elif kind == "termination":
                details = {"status": payload["status"]}
        self._counters[key] = self._counters.get(key, 0) + 1
        return ProtocolEntry(
            position=self._counters[key],
            event_type=event.event_type,
            artifact_kind=kind,
            artifact_hash=artifact_hash,
            engine_timestamp=engine_timestamp(event.event_type, args, payload),
            block_timestamp=event.block_timestamp,
            transaction_hash=event.transaction_hash.prefixed(),
            block_hash=event.block_hash.prefixed(),
            block_height=event.block_height,
            event_index=event.event_index,
            tx_index=event.tx_index,
            sender=event.sender,
            contract=event.contract,
            state_name=state_name,
            iteration_label=iteration_label,
            instance_hash=instance_hash,
            model_hash=model_hash,
            details=details,
        )

    def _remember(self, entry: ProtocolEntry) -> None:
        if entry.artifact_kind == "model":
            self.lineage.models[entry.artifact_hash] = entry.sender
        elif entry.artifact_kind == "instance":
            self.lineage.instances[entry.artifact_hash] = InstanceLineage(
                entry.model_hash, entry.sender, entry.details.get("guid"))
        elif entry.artifact_kind == "state":
            self.lineage.states[entry.artifact_hash] = entry.instance_hash

    # -- warehouse writes --------------------------------------------------------

    def flush(self) -> int:
        """Write buffered entries in order; stops at the first unavailable write."""
        written = 0
        while self._buffer:
            entry, ctx = self._buffer[0]
            try:
                if ctx is None:
                    self.warehouse.register_contract(entry.contract, entry.sender, self.client_ids.get(entry.sender))
                else:
                    self.warehouse.upsert_dimensions(entry, ctx)
                    self.warehouse.insert_fact(entry, ctx)
            except (sqlite3.OperationalError, WarehouseUnavailable) as exc:
                logger.warning("warehouse unavailable, %d entries buffered: %s", len(self._buffer), exc)
                return written
            self._buffer.popleft()
            written += 1
        return written

    @property
    def buffered(self) -> int:
        return len(self._buffer)

    # -- queries -------------------------------------------------------------------

    def protocol(self, instance_hash: Union[str, ContentHash], kinds: Iterable[str] = ("state",)) -> list[ProtocolEntry]:
        h = _norm(instance_hash)
        wanted = set(kinds)
        picked = [e for e in self.entries if e.instance_hash == h and e.artifact_kind in wanted and e.artifact_kind != "model"]
        return [replace(e, position=i) for i, e in enumerate(picked, 1)]

    # -- persistence -----------------------------------------------------------------

    def _log(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True)
        logger.debug(line)
        if self.log_path is not None:
            with self.log_path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    def _load_cursor(self) -> Optional[tuple[int, int, int]]:
        if self.cursor_path is None or not self.cursor_path.exists():
            return None
        data = json.loads(self.cursor_path.read_text())
        if data.get("contract") != self.contract:
            return None
        return tuple(data["position"])

    def _save_cursor(self, event: ContractEvent) -> None:
        if self.cursor_path is None:
            return
        self.cursor_path.write_text(json.dumps({
            "contract": self.contract,
            "block_height": event.block_height,
            "position": list(event.position),
        }))

    @property
    def cursor(self) -> int:
        """Last processed block height (-1 before any event)."""
        return self._last[0] if self._last else -1


def build_instance_protocol(
    ledger: Ledger,
    engine: Engine,
    contract_address: str,
    instance_hash: Union[str, ContentHash],
    kinds: Iterable[str] = ("state",),
    tolerance_ms: int = DEFAULT_TOLERANCE_MS,
) -> list[ProtocolEntry]:
    """Rebuild one instance protocol from chain events alone.

    A fresh observer replays the contract's whole event log, so no cached
    local state influences the result.
    """
    h = _norm(instance_hash)
    registered = [
        e for e in ledger.get_events(contract_address, [c.REGISTER_INSTANCE])
        if _norm(e.args.get("instance_hash")) == h
    ]
    if not registered:
        raise UnknownInstance(str(instance_hash))
    observer = Observer(ledger, engine, contract_address, tolerance_ms=tolerance_ms)
    observer.replay(0)
    return observer.protocol(h, kinds)


@dataclass(frozen=True)
class InstanceVerification:
    instance_hash: str
    valid_states: int
    total_states: int
    protocol: list[ProtocolEntry]
    discards: list[dict[str, Any]]

    @property
    def ok(self) -> bool:
        return self.valid_states == self.total_states and not self.discards

    def summary(self) -> str:
        return f"valid: {self.valid_states}/{self.total_states} states"


def verify_instance(
    ledger: Ledger,
    engine: Engine,
    contract_address: str,
    instance_hash: Union[str, ContentHash],
    tolerance_ms: int = DEFAULT_TOLERANCE_MS,
) -> InstanceVerification:
    """Replay the chain with a fresh observer and tally one instance's state verdicts."""
    h = _norm(instance_hash)
    if not any(_norm(e.args.get("instance_hash")) == h
               for e in ledger.get_events(contract_address, [c.REGISTER_INSTANCE])):
        raise UnknownInstance(str(instance_hash))
    observer = Observer(ledger, engine, contract_address, tolerance_ms=tolerance_ms)
    observer.replay(0)
    mine = [(e, r) for e, r in observer.results if _norm(e.args.get("instance_hash")) == h]
    states = [r for e, r in mine if e.event_type == c.REGISTER_STATE]
    discards = [d for d in observer.discards
                if any(e.transaction_hash.prefixed() == d["transaction_hash"] for e, _ in mine)]
    return InstanceVerification(
        instance_hash=h,
        valid_states=sum(r.valid for r in states),
        total_states=len(states),
        protocol=observer.protocol(h, ARTIFACT_KIND.values()),
        discards=discards,
    )
