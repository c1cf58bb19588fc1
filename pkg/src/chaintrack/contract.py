"""The instance-tracking smart contract.

Contract code is plain Python executed by the ledger inside its serialized
transaction loop. Each function validates its preconditions, mutates
:class:`ContractState`, and returns the events to emit. A failed
precondition raises a :class:`ContractRevert` subclass; the ledger then
seals the transaction with a failure receipt and no events.

Function and event names double as the ``D_Event_Type`` vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .canonical import ContentHash

REGISTER_MODEL = "RegisterModel"
REGISTER_INSTANCE = "RegisterInstance"
REGISTER_STATE = "RegisterState"
REGISTER_TRANSITION = "RegisterTransition"
TERMINATE_INSTANCE = "TerminateInstance"
CONTRACT_DEPLOYED = "ContractDeployed"
DEPLOY = "Deploy"

FUNCTIONS = (DEPLOY, REGISTER_MODEL, REGISTER_INSTANCE, REGISTER_STATE, REGISTER_TRANSITION, TERMINATE_INSTANCE)
EVENT_TYPES = (REGISTER_MODEL, REGISTER_INSTANCE, REGISTER_STATE, REGISTER_TRANSITION, TERMINATE_INSTANCE, CONTRACT_DEPLOYED)

# Argument key carrying the registered hash, per event type.
HASH_ARG = {
    REGISTER_MODEL: "model_hash",
    REGISTER_INSTANCE: "instance_hash",
    REGISTER_STATE: "state_hash",
    REGISTER_TRANSITION: "transition_hash",
    TERMINATE_INSTANCE: "termination_hash",
}


class ContractRevert(Exception):
    code = "ContractRevert"
    reason = "reverted"

    def __init__(self, detail: str = "") -> None:
        super().__init__(f"{self.reason}: {detail}" if detail else self.reason)
        self.detail = detail


def _revert(code: str, reason: str) -> type[ContractRevert]:
    return type(code, (ContractRevert,), {"code": code, "reason": reason})


Unauthorized = _revert("Unauthorized", "unauthorized sender")
DuplicateModel = _revert("DuplicateModel", "duplicate model")
UnknownModel = _revert("UnknownModel", "unknown model")
DuplicateInstance = _revert("DuplicateInstance", "duplicate instance")
UnknownInstance = _revert("UnknownInstance", "unknown instance")
InstanceTerminated = _revert("InstanceTerminated", "instance terminated")
DuplicateState = _revert("DuplicateState", "duplicate state")
UnknownState = _revert("UnknownState", "unknown state")
DuplicateTransition = _revert("DuplicateTransition", "duplicate transition")
AlreadyTerminated = _revert("AlreadyTerminated", "instance already terminated")
BadArguments = _revert("BadArguments", "malformed arguments")
UnknownFunction = _revert("UnknownFunction", "unknown function")


@dataclass
class InstanceEntry:
    model: str
    terminated: bool = False


@dataclass
class ContractState:
    deployment_address: str
    engine_id: str
    writers: frozenset[str] = frozenset()
    models: set[str] = field(default_factory=set)
    instances: dict[str, InstanceEntry] = field(default_factory=dict)
    states: dict[str, str] = field(default_factory=dict)
    transitions: dict[str, str] = field(default_factory=dict)


Emitted = list[tuple[str, dict[str, Any]]]


def _hash_arg(args: dict[str, Any], key: str) -> str:
    value = args.get(key)
    try:
        return ContentHash.from_hex(value).hex()
    except (ValueError, TypeError, AttributeError):
        raise BadArguments(f"{key} must be a 64-digit hex hash") from None


class InstanceTrackingContract:
    """Registers models, instances, states and transitions by content hash.

    Only the deploying client may register, unless additional writers are
    named at deployment.
    """

    def __init__(self, address: str, state: ContractState) -> None:
        self.address = address
        self.state = state

    @classmethod
    def deploy(cls, address: str, deployer: str, args: dict[str, Any]) -> tuple[InstanceTrackingContract, Emitted]:
        engine_id = args.get("engine_id")
        if not isinstance(engine_id, str) or not engine_id:
            raise BadArguments("engine_id is required")
        writers = args.get("writers", [])
        if not isinstance(writers, list) or not all(isinstance(w, str) for w in writers):
            raise BadArguments("writers must be a list of addresses")
        state = ContractState(deployment_address=deployer, engine_id=engine_id, writers=frozenset(writers))
        event = {"deployment_address": deployer, "engine_id": engine_id, "writers": sorted(writers)}
        return cls(address, state), [(CONTRACT_DEPLOYED, event)]

    @property
    def owner(self) -> str:
        return self.state.deployment_address

    def call(self, function: str, sender: str, args: dict[str, Any]) -> Emitted:
        method = {
            REGISTER_MODEL: self.register_model,
            REGISTER_INSTANCE: self.register_instance,
            REGISTER_STATE: self.register_state,
            REGISTER_TRANSITION: self.register_transition,
            TERMINATE_INSTANCE: self.terminate_instance,
        }.get(function)
        if method is None:
            raise UnknownFunction(function)
        if not isinstance(args, dict):
            raise BadArguments("args must be an object")
        return method(sender, args)

    def _authorize(self, sender: str) -> None:
        if sender != self.state.deployment_address and sender not in self.state.writers:
            raise Unauthorized(sender)

    def _live_instance(self, h_i: str) -> InstanceEntry:
        entry = self.state.instances.get(h_i)
        if entry is None:
            raise UnknownInstance(h_i)
        if entry.terminated:
            raise InstanceTerminated(h_i)
        return entry

    def register_model(self, sender: str, args: dict[str, Any]) -> Emitted:
        self._authorize(sender)
        h_m = _hash_arg(args, "model_hash")
        if h_m in self.state.models:
            raise DuplicateModel(h_m)
        self.state.models.add(h_m)
        return [(REGISTER_MODEL, args)]

    def register_instance(self, sender: str, args: dict[str, Any]) -> Emitted:
        self._authorize(sender)
        h_i = _hash_arg(args, "instance_hash")
        h_m = _hash_arg(args, "model_hash")
        if h_m not in self.state.models:
            raise UnknownModel(h_m)
        if h_i in self.state.instances:
            raise DuplicateInstance(h_i)
        self.state.instances[h_i] = InstanceEntry(model=h_m)
        return [(REGISTER_INSTANCE, args)]

    def register_state(self, sender: str, args: dict[str, Any]) -> Emitted:
        self._authorize(sender)
        h_s = _hash_arg(args, "state_hash")
        h_i = _hash_arg(args, "instance_hash")
        self._live_instance(h_i)
        if h_s in self.state.states:
            raise DuplicateState(h_s)
        self.state.states[h_s] = h_i
        return [(REGISTER_STATE, args)]

    def register_transition(self, sender: str, args: dict[str, Any]) -> Emitted:
        self._authorize(sender)
        h_t = _hash_arg(args, "transition_hash")
        h_i = _hash_arg(args, "instance_hash")
        self._live_instance(h_i)
        meta = args.get("meta") or {}
        for end in ("from", "to"):
            h_s = _hash_arg(meta, end)
            if self.state.states.get(h_s) != h_i:
                raise UnknownState(f"{end} {h_s}")
        if h_t in self.state.transitions:
            raise DuplicateTransition(h_t)
        self.state.transitions[h_t] = h_i
        return [(REGISTER_TRANSITION, args)]

    def terminate_instance(self, sender: str, args: dict[str, Any]) -> Emitted:
        self._authorize(sender)
        h_i = _hash_arg(args, "instance_hash")
        _hash_arg(args, "termination_hash")
        entry = self.state.instances.get(h_i)
        if entry is None:
            raise UnknownInstance(h_i)
        if entry.terminated:
            raise AlreadyTerminated(h_i)
        entry.terminated = True
        return [(TERMINATE_INSTANCE, args)]


def replay_events(events: Iterable[Any], address: Optional[str] = None) -> ContractState:
    """Apply a contract event log to a fresh state, re-checking every rule.

    ``events`` are :class:`~chaintrack.ledger.ContractEvent` objects (or
    anything with ``event_type``, ``sender`` and ``args``). Raises
    :class:`ContractRevert` on the first event the contract would have
    rejected.
    """
    contract: Optional[InstanceTrackingContract] = None
    for event in events:
        if event.event_type == CONTRACT_DEPLOYED:
            if address is None:
                address = event.contract
            if event.contract != address:
                continue
            contract, _ = InstanceTrackingContract.deploy(event.contract, event.sender, event.args)
            continue
        if contract is None or event.contract != address:
            continue
        contract.call(event.event_type, event.sender, event.args)
    if contract is None:
        raise UnknownFunction("no ContractDeployed event in log")
    return contract.state
