"""A deterministic single-node blockchain simulator.

Accounts sign transactions with Ed25519 keys derived from a seed; the
ledger checks signatures and nonces, executes the instance-tracking
contract, seals blocks (one transaction per block by default) and
broadcasts the emitted contract events. Block timestamps are read from
the clock shared with the execution engine.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from . import contract as c
from .canonical import ContentHash, canonicalize, content_hash
from .clock import VirtualClock, WallClock
from .stream import Broadcaster, EventStream

logger = logging.getLogger(__name__)

ZERO_HASH = ContentHash(bytes(32))

DEFAULT_FEES = {
    c.DEPLOY: 100_000,
    c.REGISTER_MODEL: 30_000,
    c.REGISTER_INSTANCE: 30_000,
    c.REGISTER_STATE: 30_000,
    c.REGISTER_TRANSITION: 30_000,
    c.TERMINATE_INSTANCE: 20_000,
}
DEFAULT_FEE_UNIT = "gas"
DEFAULT_UNIT_PRICE = 1


class LedgerError(Exception):
    pass


class BadSignature(LedgerError):
    pass


class BadNonce(LedgerError):
    pass


class UnknownContract(LedgerError):
    pass


class NotFound(LedgerError):
    pass


class ChainIntegrityError(LedgerError):
    pass


# -- signatures & accounts -----------------------------------------------------


class SignatureScheme(Protocol):
    name: str

    def keypair(self, seed: bytes) -> tuple[bytes, bytes]: ...

    def sign(self, secret: bytes, message: bytes) -> bytes: ...

    def verify(self, public_key: bytes, signature: bytes, message: bytes) -> bool: ...


class Ed25519Scheme:
    """Deterministic Ed25519 signatures; the secret key is SHA-256(seed)."""

    name = "ed25519"

    def keypair(self, seed: bytes) -> tuple[bytes, bytes]:
        secret = hashlib.sha256(seed).digest()
        public = Ed25519PrivateKey.from_private_bytes(secret).public_key()
        return secret, public.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)

    def sign(self, secret: bytes, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(secret).sign(message)

    def verify(self, public_key: bytes, signature: bytes, message: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        except (InvalidSignature, ValueError):
            return False
        return True


DEFAULT_SCHEME = Ed25519Scheme()


class AccountKind(str, Enum):
    CLIENT = "Client"
    CONTRACT = "Contract"


def address_of(public_key: bytes) -> str:
    return "0x" + hashlib.sha256(public_key).digest()[:20].hex()


@dataclass(frozen=True)
class Account:
    address: str
    kind: AccountKind
    public_key: bytes = b""
    secret: bytes = field(default=b"", repr=False, compare=False)
    scheme: SignatureScheme = field(default=DEFAULT_SCHEME, repr=False, compare=False)

    def sign(self, message: bytes) -> bytes:
        if not self.secret:
            raise LedgerError(f"account {self.address} cannot sign")
        return self.scheme.sign(self.secret, message)


def create_account(seed: bytes, scheme: SignatureScheme = DEFAULT_SCHEME) -> Account:
    """Derive a client account deterministically from ``seed``."""
    secret, public = scheme.keypair(seed)
    return Account(address_of(public), AccountKind.CLIENT, public, secret, scheme)


def contract_address(deployer: str, nonce: int) -> str:
    doc = {"kind": "contract-address", "deployer": deployer, "nonce": nonce}
    return "0x" + hashlib.sha256(canonicalize(doc)).digest()[:20].hex()


# -- records -----------------------------------------------------------------


@dataclass(frozen=True)
class SignedTransaction:
    transaction_hash: ContentHash
    sender: str
    to: Optional[str]
    function: str
    args: dict[str, Any]
    nonce: int
    fee_units: int
    fee_unit: str
    unit_price: int
    public_key: bytes
    signature: bytes

    @staticmethod
    def make_body(sender, to, function, args, nonce, fee_units, fee_unit, unit_price, public_key) -> dict[str, Any]:
        return {
            "kind": "transaction",
            "sender": sender,
            "to": to,
            "function": function,
            "args": args,
            "nonce": nonce,
            "fee_units": fee_units,
            "fee_unit": fee_unit,
            "unit_price": unit_price,
            "public_key": "0x" + public_key.hex(),
        }

    def body(self) -> dict[str, Any]:
        return self.make_body(
            self.sender, self.to, self.function, self.args, self.nonce,
            self.fee_units, self.fee_unit, self.unit_price, self.public_key,
        )

    @classmethod
    def sign(
        cls,
        account: Account,
        function: str,
        args: dict[str, Any],
        nonce: int,
        to: Optional[str] = None,
        fee_units: int = 0,
        fee_unit: str = DEFAULT_FEE_UNIT,
        unit_price: int = DEFAULT_UNIT_PRICE,
    ) -> SignedTransaction:
        body = cls.make_body(account.address, to, function, args, nonce, fee_units, fee_unit, unit_price, account.public_key)
        return cls(
            transaction_hash=content_hash(body),
            sender=account.address,
            to=to,
            function=function,
            args=args,
            nonce=nonce,
            fee_units=fee_units,
            fee_unit=fee_unit,
            unit_price=unit_price,
            public_key=account.public_key,
            signature=account.sign(canonicalize(body)),
        )

    def to_dict(self) -> dict[str, Any]:
        d = self.body()
        del d["kind"]
        d["transaction_hash"] = self.transaction_hash.prefixed()
        d["signature"] = "0x" + self.signature.hex()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SignedTransaction:
        return cls(
            transaction_hash=ContentHash.from_hex(d["transaction_hash"]),
            sender=d["sender"],
            to=d["to"],
            function=d["function"],
            args=d["args"],
            nonce=d["nonce"],
            fee_units=d["fee_units"],
            fee_unit=d["fee_unit"],
            unit_price=d["unit_price"],
            public_key=bytes.fromhex(d["public_key"][2:]),
            signature=bytes.fromhex(d["signature"][2:]),
        )


@dataclass(frozen=True)
class Block:
    block_hash: ContentHash
    parent_hash: ContentHash
    height: int
    timestamp: int
    transactions: tuple[ContentHash, ...] = ()

    @staticmethod
    def header(parent_hash: ContentHash, height: int, timestamp: int, transactions: Iterable[ContentHash]) -> dict[str, Any]:
        return {
            "kind": "block",
            "parent_hash": parent_hash.prefixed(),
            "height": height,
            "timestamp": timestamp,
            "transactions": [t.prefixed() for t in transactions],
        }

    @classmethod
    def seal(cls, parent_hash: ContentHash, height: int, timestamp: int, transactions: Iterable[ContentHash]) -> Block:
        txs = tuple(transactions)
        return cls(content_hash(cls.header(parent_hash, height, timestamp, txs)), parent_hash, height, timestamp, txs)

    def to_dict(self) -> dict[str, Any]:
        d = self.header(self.parent_hash, self.height, self.timestamp, self.transactions)
        del d["kind"]
        d["block_hash"] = self.block_hash.prefixed()
        return d


@dataclass(frozen=True)
class ContractEvent:
    event_type: str
    contract: str
    sender: str
    args: dict[str, Any]
    transaction_hash: ContentHash
    event_index: int
    block_hash: ContentHash
    block_timestamp: int
    block_height: int
    tx_index: int = 0

    @property
    def position(self) -> tuple[int, int, int]:
        """Chain order key: (block height, transaction index in block, event index)."""
        return (self.block_height, self.tx_index, self.event_index)

    def to_dict(self) -> dict[str, Any]:
        return {
            "event_type": self.event_type,
            "contract": self.contract,
            "sender": self.sender,
            "args": self.args,
            "transaction_hash": self.transaction_hash.prefixed(),
            "event_index": self.event_index,
            "block_hash": self.block_hash.prefixed(),
            "block_timestamp": self.block_timestamp,
            "block_height": self.block_height,
            "tx_index": self.tx_index,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ContractEvent:
        return cls(
            event_type=d["event_type"],
            contract=d["contract"],
            sender=d["sender"],
            args=d["args"],
            transaction_hash=ContentHash.from_hex(d["transaction_hash"]),
            event_index=d["event_index"],
            block_hash=ContentHash.from_hex(d["block_hash"]),
            block_timestamp=d["block_timestamp"],
            block_height=d["block_height"],
            tx_index=d.get("tx_index", 0),
        )


@dataclass
class Receipt:
    transaction_hash: ContentHash
    status: str
    fee_charged: int
    block_hash: Optional[ContentHash] = None
    block_height: Optional[int] = None
    events: list[ContractEvent] = field(default_factory=list)
    contract_address: Optional[str] = None
    revert_error: Optional[str] = None
    revert_reason: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "success"

    @property
    def sealed(self) -> bool:
        return self.block_hash is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "transaction_hash": self.transaction_hash.prefixed(),
            "status": self.status,
            "fee_charged": self.fee_charged,
            "block_hash": self.block_hash.prefixed() if self.block_hash else None,
            "block_height": self.block_height,
            "events": [e.to_dict() for e in self.events],
            "contract_address": self.contract_address,
            "revert_error": self.revert_error,
            "revert_reason": self.revert_reason,
        }


@dataclass
class _Pending:
    tx: SignedTransaction
    receipt: Receipt
    emitted: list[tuple[str, str, dict[str, Any]]]


# -- ledger --------------------------------------------------------------------


class Ledger:
    def __init__(
        self,
        clock: Union[VirtualClock, WallClock, None] = None,
        block_batch: int = 1,
        unit_price: int = DEFAULT_UNIT_PRICE,
        fee_unit: str = DEFAULT_FEE_UNIT,
        fee_schedule: Optional[dict[str, int]] = None,
        scheme: SignatureScheme = DEFAULT_SCHEME,
        journal_path: Union[str, Path, None] = None,
        genesis_timestamp: Optional[int] = None,
    ) -> None:
        if block_batch < 1:
            raise ValueError("block_batch must be >= 1")
        self.clock = clock or VirtualClock()
        self.block_batch = block_batch
        self.unit_price = unit_price
        self.fee_unit = fee_unit
        self.fee_schedule = dict(DEFAULT_FEES if fee_schedule is None else fee_schedule)
        self.scheme = scheme
        self._lock = threading.RLock()
        self._bus: Broadcaster[ContractEvent] = Broadcaster()
        genesis = Block.seal(ZERO_HASH, 0, self.clock.now() if genesis_timestamp is None else genesis_timestamp, ())
        self._blocks: list[Block] = [genesis]
        self._block_index: dict[ContentHash, Block] = {genesis.block_hash: genesis}
        self._txs: dict[ContentHash, SignedTransaction] = {}
        self._receipts: dict[ContentHash, Receipt] = {}
        self._events: list[ContractEvent] = []
        self._contracts: dict[str, c.InstanceTrackingContract] = {}
        self._nonces: dict[str, int] = {}
        self._pending: list[_Pending] = []
        self._journal = Path(journal_path) if journal_path else None
        if self._journal is not None and (not self._journal.exists() or self._journal.stat().st_size == 0):
            self._write_journal(genesis, [])

    # -- accounts ----------------------------------------------------------

    def create_account(self, seed: bytes) -> Account:
        return create_account(seed, self.scheme)

    def next_nonce(self, address: str) -> int:
        with self._lock:
            return self._nonces.get(address, 0)

    def prepare(
        self,
        account: Account,
        function: str,
        args: dict[str, Any],
        to: Optional[str] = None,
        nonce: Optional[int] = None,
    ) -> SignedTransaction:
        """Sign a transaction with the next nonce and the scheduled fee."""
        return SignedTransaction.sign(
            account,
            function,
            args,
            self.next_nonce(account.address) if nonce is None else nonce,
            to=to,
            fee_units=self.fee_schedule.get(function, 0),
            fee_unit=self.fee_unit,
            unit_price=self.unit_price,
        )

    # -- transactions ------------------------------------------------------

    def submit_transaction(self, tx: SignedTransaction) -> Receipt:
        """Execute ``tx`` and queue it for sealing.

        Raises :class:`BadSignature`, :class:`BadNonce` or
        :class:`UnknownContract` without sealing anything. A contract revert
        is sealed with a failure receipt and no events.
        """
        with self._lock:
            self._admit(tx)
            receipt = self._execute(tx)
            if len(self._pending) >= self.block_batch:
                self.seal()
            return receipt

    def _admit(self, tx: SignedTransaction) -> None:
        body = tx.body()
        if content_hash(body) != tx.transaction_hash:
            raise BadSignature("transaction hash does not match body")
        if address_of(tx.public_key) != tx.sender:
            raise BadSignature("public key does not belong to sender")
        if not self.scheme.verify(tx.public_key, tx.signature, canonicalize(body)):
            raise BadSignature("signature does not verify")
        expected = self._nonces.get(tx.sender, 0)
        if tx.nonce != expected:
            raise BadNonce(f"expected nonce {expected}, got {tx.nonce}")
        if tx.function == c.DEPLOY:
            if tx.to is not None:
                raise UnknownContract("Deploy transactions take no recipient")
        elif tx.to not in self._contracts:
            raise UnknownContract(str(tx.to))
        if tx.transaction_hash in self._txs:
            raise BadNonce("transaction already included")

    def _execute(self, tx: SignedTransaction) -> Receipt:
        self._nonces[tx.sender] = tx.nonce + 1
        receipt = Receipt(tx.transaction_hash, "success", tx.fee_units * tx.unit_price)
        emitted: list[tuple[str, str, dict[str, Any]]] = []
        try:
            if tx.function == c.DEPLOY:
                address = contract_address(tx.sender, tx.nonce)
                instance, events = c.InstanceTrackingContract.deploy(address, tx.sender, tx.args)
                self._contracts[address] = instance
                receipt.contract_address = address
            else:
                address = tx.to
                events = self._contracts[address].call(tx.function, tx.sender, tx.args)
            emitted = [(address, name, args) for name, args in events]
        except c.ContractRevert as exc:
            receipt.status = "reverted"
            receipt.revert_error = exc.code
            receipt.revert_reason = exc.reason
            logger.debug("tx %s reverted: %s", tx.transaction_hash.abbrev(), exc)
        self._txs[tx.transaction_hash] = tx
        self._receipts[tx.transaction_hash] = receipt
        self._pending.append(_Pending(tx, receipt, emitted))
        return receipt

    def seal(self, timestamp: Optional[int] = None) -> Optional[Block]:
        """Seal every pending transaction into one block."""
        with self._lock:
            if not self._pending:
                return None
            parent = self._blocks[-1]
            ts = max(parent.timestamp, self.clock.now() if timestamp is None else timestamp)
            block = Block.seal(parent.block_hash, parent.height + 1, ts, (p.tx.transaction_hash for p in self._pending))
            sealed: list[ContractEvent] = []
            for tx_index, p in enumerate(self._pending):
                p.receipt.block_hash = block.block_hash
                p.receipt.block_height = block.height
                for index, (address, name, args) in enumerate(p.emitted):
                    event = ContractEvent(
                        event_type=name,
                        contract=address,
                        sender=p.tx.sender,
                        args=args,
                        transaction_hash=p.tx.transaction_hash,
                        event_index=index,
                        block_hash=block.block_hash,
                        block_timestamp=block.timestamp,
                        block_height=block.height,
                        tx_index=tx_index,
                    )
                    p.receipt.events.append(event)
                    sealed.append(event)
            pending, self._pending = self._pending, []
            self._blocks.append(block)
            self._block_index[block.block_hash] = block
            self._events.extend(sealed)
            if self._journal is not None:
                self._write_journal(block, pending)
            for event in sealed:
                self._bus.publish(event)
            return block

    # -- reads ---------------------------------------------------------------

    @property
    def height(self) -> int:
        return self._blocks[-1].height

    def get_block(self, ref: Union[int, ContentHash, str]) -> Block:
        with self._lock:
            if isinstance(ref, int):
                if 0 <= ref < len(self._blocks):
                    return self._blocks[ref]
            else:
                try:
                    block = self._block_index.get(ContentHash.from_hex(ref) if isinstance(ref, str) else ref)
                except ValueError:
                    block = None
                if block is not None:
                    return block
        raise NotFound(f"block {ref}")

    def blocks(self) -> list[Block]:
        with self._lock:
            return list(self._blocks)

    def get_transaction(self, tx_hash: Union[ContentHash, str]) -> SignedTransaction:
        try:
            key = ContentHash.from_hex(tx_hash) if isinstance(tx_hash, str) else tx_hash
            return self._txs[key]
        except (KeyError, ValueError):
            raise NotFound(f"transaction {tx_hash}") from None

    def get_receipt(self, tx_hash: Union[ContentHash, str]) -> Receipt:
        try:
            key = ContentHash.from_hex(tx_hash) if isinstance(tx_hash, str) else tx_hash
            return self._receipts[key]
        except (KeyError, ValueError):
            raise NotFound(f"receipt {tx_hash}") from None

    def get_events(
        self,
        contract: Optional[str] = None,
        event_types: Optional[Iterable[str]] = None,
        from_height: int = 0,
        to_height: Optional[int] = None,
    ) -> list[ContractEvent]:
        match = _event_filter(contract, event_types)
        with self._lock:
            return [
                e for e in self._events
                if match(e) and e.block_height >= from_height and (to_height is None or e.block_height <= to_height)
            ]

    def subscribe_events(
        self,
        contract: Optional[str] = None,
        event_types: Optional[Iterable[str]] = None,
        from_height: Optional[int] = None,
        callback: Optional[Callable[[ContractEvent], None]] = None,
    ) -> EventStream[ContractEvent]:
        """Subscribe to sealed contract events in chain order.

        ``from_height`` replays already-sealed events from that height before
        live delivery starts; ``None`` delivers only future events.
        """
        match = _event_filter(contract, event_types)
        with self._lock:
            backlog = [] if from_height is None else [e for e in self._events if e.block_height >= from_height]
            return self._bus.subscribe(match, backlog, callback)

    def unsubscribe(self, stream: EventStream[ContractEvent]) -> None:
        self._bus.unsubscribe(stream)

    def contract(self, address: str) -> c.InstanceTrackingContract:
        try:
            return self._contracts[address]
        except KeyError:
            raise UnknownContract(address) from None

    def contract_owner(self, address: str) -> str:
        return self.contract(address).owner

    # -- integrity & persistence -----------------------------------------------

    def verify_chain(self) -> list[str]:
        """Recompute every hash, signature and link; returns a list of problems."""
        problems: list[str] = []
        with self._lock:
            prev: Optional[Block] = None
            for block in self._blocks:
                recomputed = Block.seal(block.parent_hash, block.height, block.timestamp, block.transactions)
                if recomputed.block_hash != block.block_hash:
                    problems.append(f"block {block.height}: hash mismatch")
                if prev is not None:
                    if block.parent_hash != prev.block_hash:
                        problems.append(f"block {block.height}: parent link broken")
                    if block.timestamp < prev.timestamp:
                        problems.append(f"block {block.height}: timestamp decreases")
                    if block.height != prev.height + 1:
                        problems.append(f"block {block.height}: height gap")
                for tx_hash in block.transactions:
                    tx = self._txs.get(tx_hash)
                    if tx is None:
                        problems.append(f"block {block.height}: missing tx {tx_hash.abbrev()}")
                        continue
                    body = tx.body()
                    if content_hash(body) != tx_hash:
                        problems.append(f"tx {tx_hash.abbrev()}: hash mismatch")
                    if not self.scheme.verify(tx.public_key, tx.signature, canonicalize(body)):
                        problems.append(f"tx {tx_hash.abbrev()}: bad signature")
                prev = block
            seen: dict[str, int] = {}
            for block in self._blocks:
                for tx_hash in block.transactions:
                    tx = self._txs.get(tx_hash)
                    if tx is None:
                        continue
                    if tx.nonce != seen.get(tx.sender, 0):
                        problems.append(f"tx {tx_hash.abbrev()}: nonce out of order")
                    seen[tx.sender] = tx.nonce + 1
        return problems

    def _write_journal(self, block: Block, pending: list[_Pending]) -> None:
        line = {
            "block": block.to_dict(),
            "transactions": [p.tx.to_dict() for p in pending],
            "receipts": [p.receipt.to_dict() for p in pending],
        }
        with self._journal.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(line, sort_keys=True, ensure_ascii=False) + "\n")

    @classmethod
    def from_journal(cls, journal_path: Union[str, Path], **kwargs) -> Ledger:
        """Rebuild a ledger by re-executing every journaled transaction.

        Raises :class:`ChainIntegrityError` if a recomputed block hash or
        event log differs from the journal.
        """
        ledger = cls(journal_path=None, **kwargs)
        path = Path(journal_path)
        if path.exists():
            with path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    record = json.loads(line)
                    if record["block"]["height"] == 0:
                        genesis = Block.seal(ZERO_HASH, 0, record["block"]["timestamp"], ())
                        if genesis.to_dict() != record["block"]:
                            raise ChainIntegrityError("journal genesis block mismatch")
                        ledger._blocks = [genesis]
                        ledger._block_index = {genesis.block_hash: genesis}
                        ledger.clock.advance_to(genesis.timestamp)
                        continue
                    try:
                        for tx in record["transactions"]:
                            with ledger._lock:
                                t = SignedTransaction.from_dict(tx)
                                ledger._admit(t)
                                ledger._execute(t)
                    except LedgerError as exc:
                        raise ChainIntegrityError(f"journal line {lineno}: {exc}") from exc
                    expected = record["block"]
                    ledger.clock.advance_to(expected["timestamp"])
                    block = ledger.seal(timestamp=expected["timestamp"])
                    if block is None or block.to_dict() != expected:
                        raise ChainIntegrityError(f"journal line {lineno}: block mismatch")
                    receipts = [ledger._receipts[ContentHash.from_hex(t["transaction_hash"])].to_dict() for t in record["transactions"]]
                    if receipts != record["receipts"]:
                        raise ChainIntegrityError(f"journal line {lineno}: receipts/events mismatch")
        ledger._journal = path
        return ledger


def _event_filter(contract: Optional[str], event_types: Optional[Iterable[str]]) -> Callable[[ContractEvent], bool]:
    types = None if event_types is None else frozenset([event_types] if isinstance(event_types, str) else event_types)

    def match(e: ContractEvent) -> bool:
        return (contract is None or e.contract == contract) and (types is None or e.event_type in types)

    return match
