"""The bundled reference scenario and the wiring shared by the CLI.

The reference model receives records from a queue, then maps over them:
each record is transformed, written to the warehouse and dequeued. The task
handlers are deterministic stand-ins for the managed functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from .canonical import content_hash
from .clock import make_clock
from .engine import DEFAULT_REGION, DEFAULT_SEED, Engine
from .ledger import Account, Ledger
from .states import ExecutableModel, parse_model
from .tracker import DEFAULT_TOLERANCE_MS, Controller, Observer
from .warehouse import Warehouse

RECEIVE = "sim:lambda:receive-messages"
TRANSFORM = "sim:lambda:transform-data"
UPDATE = "sim:dynamodb:update-item"
DEQUEUE = "sim:lambda:dequeue"

CHAIN_JOURNAL = "chain.jsonl"
ENGINE_JOURNAL = "engine.jsonl"
WAREHOUSE_FILE = "warehouse.sqlite"
OBSERVER_LOG = "observer.log.jsonl"
CURSOR_FILE = "observer.cursor.json"
STATE_FILE = "deployment.json"


def reference_model_bytes() -> bytes:
    return resources.files("chaintrack").joinpath("data/reference_model.json").read_bytes()


def load_reference_model() -> ExecutableModel:
    return parse_model(reference_model_bytes())


def reference_input(n_records: int = 4) -> dict[str, Any]:
    return {"queue": "sim-queue", "records": [{"id": i, "body": f"record-{i}"} for i in range(n_records)]}


def _receive(data: Any) -> Any:
    out = dict(data or {})
    out.setdefault("records", [])
    out["received"] = len(out["records"])
    return out


def _transform(item: Any) -> Any:
    item = dict(item)
    item["body"] = str(item.get("body", "")).upper()
    item["digest"] = content_hash({"kind": "record", "body": item["body"]}).hex()[:16]
    return item


def _update(item: Any) -> Any:
    return {**item, "stored": True}


def _dequeue(item: Any) -> Any:
    return {"id": item.get("id"), "dequeued": True}


REFERENCE_HANDLERS = {RECEIVE: _receive, TRANSFORM: _transform, UPDATE: _update, DEQUEUE: _dequeue}


def install_reference_handlers(engine: Engine) -> int:
    for uri, fn in REFERENCE_HANDLERS.items():
        engine.register_task_handler(uri, fn)
    return len(REFERENCE_HANDLERS)


@dataclass(frozen=True)
class RunConfig:
    seed: int = DEFAULT_SEED
    region: str = DEFAULT_REGION
    clock_mode: str = "virtual"
    time_tolerance_ms: int = DEFAULT_TOLERANCE_MS
    emit_transitions: bool = True
    data_dir: Optional[Path] = None
    block_batch: int = 1

    def __post_init__(self) -> None:
        if self.time_tolerance_ms <= 0:
            raise ValueError("time_tolerance_ms must be positive")
        if self.block_batch < 1:
            raise ValueError("block_batch must be >= 1")
        if self.clock_mode not in ("virtual", "wall"):
            raise ValueError("clock_mode must be 'virtual' or 'wall'")


def client_account(ledger: Ledger, seed: int, name: str = "client-a") -> Account:
    return ledger.create_account(f"{name}:{seed}".encode())


@dataclass
class World:
    """Engine, ledger, contract and one tracking client, wired together."""

    config: RunConfig
    engine: Engine
    ledger: Ledger
    account: Account
    controller: Controller
    observer: Observer
    warehouse: Warehouse
    model_hash: Optional[str] = None
    instances: list[tuple[str, str]] = field(default_factory=list)

    @property
    def contract_address(self) -> str:
        return self.controller.contract_address

    def deploy(self, model: ExecutableModel) -> str:
        h, _ = self.engine.deploy_model(model)
        self.model_hash = h.hex()
        return self.model_hash

    def run(self, input: Any, model_hash: Optional[str] = None) -> tuple[str, str]:
        """Run one instance to completion; the controller registers every event."""
        guid, _ = self.engine.run(model_hash or self.model_hash, input)
        self.engine.run_to_completion(guid)
        h_i = self.engine.instance(guid).instance_hash.hex()
        self.instances.append((guid, h_i))
        return guid, h_i

    def settle(self) -> None:
        """Seal any partially filled block and let the observer catch up."""
        self.ledger.seal()
        self.observer.sync()

    def replay_client(self, warehouse: Optional[Warehouse] = None) -> Observer:
        """A second client that replays the chain from genesis into its own warehouse."""
        other = Observer(
            self.ledger, self.engine, self.contract_address,
            warehouse=warehouse if warehouse is not None else Warehouse(),
            tolerance_ms=self.config.time_tolerance_ms,
            client_ids=self.observer.client_ids,
        )
        other.replay(0)
        return other


def build_world(config: RunConfig = RunConfig(), warehouse: Optional[Warehouse] = None) -> World:
    """Fresh world: accounts, contract deployment and a live observer.

    With ``config.data_dir`` the chain and engine journals, the warehouse
    and the observer log are written there; the directory must be clean.
    """
    d = config.data_dir
    if d is not None:
        d = Path(d)
        d.mkdir(parents=True, exist_ok=True)
    clock = make_clock(config.clock_mode)
    engine = Engine(
        clock=clock, region=config.region, seed=config.seed,
        emit_transitions=config.emit_transitions,
        journal_path=d / ENGINE_JOURNAL if d else None,
    )
    install_reference_handlers(engine)
    ledger = Ledger(clock=clock, block_batch=config.block_batch, journal_path=d / CHAIN_JOURNAL if d else None)
    account = client_account(ledger, config.seed)
    controller = Controller.deploy_contract(engine, ledger, account)
    controller.attach()
    if warehouse is None:
        warehouse = Warehouse(d / WAREHOUSE_FILE if d else ":memory:")
    observer = Observer(
        ledger, engine, controller.contract_address,
        warehouse=warehouse,
        tolerance_ms=config.time_tolerance_ms,
        client_ids={account.address: "client-a"},
        log_path=d / OBSERVER_LOG if d else None,
    )
    observer.subscribe(from_height=0)
    world = World(config, engine, ledger, account, controller, observer, warehouse)
    if d is not None:
        save_deployment(d, world)
    return world


def run_reference(config: RunConfig = RunConfig(), records: tuple[int, ...] = (4,), tamper: Optional[int] = None) -> World:
    """Deploy the reference model, run one instance per record count, track everything.

    ``tamper`` flips one byte of the n-th (1-based) state payload of the first
    instance after it was registered and before the observer verifies it.
    """
    world = build_world(config)
    world.deploy(load_reference_model())
    for n in records:
        world.run(reference_input(n))
    world.ledger.seal()
    if tamper is not None:
        tamper_state(world, tamper)
    world.observer.sync()
    return world


def state_hashes(world: World, guid: str) -> list[str]:
    """Registered state hashes of one instance, in emission order."""
    return [
        content_hash(e.payload).hex()
        for e in world.engine.events
        if e.instance_guid == guid and e.payload.get("kind") == "state"
    ]


def tamper_state(world: World, n: int, offset: int = 0, instance: int = 0) -> str:
    guid, _ = world.instances[instance]
    hashes = state_hashes(world, guid)
    if not 1 <= n <= len(hashes):
        raise ValueError(f"state index {n} outside 1..{len(hashes)}")
    h = hashes[n - 1]

    def flip(data: bytes) -> bytes:
        i = offset % len(data)
        return data[:i] + bytes([data[i] ^ 0x01]) + data[i + 1:]

    world.engine.tamper_artifact("state", h, flip)
    return h


# -- persisted deployments ---------------------------------------------------------


def save_deployment(data_dir: Path, world: World) -> None:
    cfg = world.config
    doc = {
        "contract_address": world.contract_address,
        "client_address": world.account.address,
        "seed": cfg.seed,
        "region": cfg.region,
        "clock_mode": cfg.clock_mode,
        "emit_transitions": cfg.emit_transitions,
        "block_batch": cfg.block_batch,
    }
    (Path(data_dir) / STATE_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_deployment(data_dir: Path) -> dict[str, Any]:
    return json.loads((Path(data_dir) / STATE_FILE).read_text(encoding="utf-8"))


def open_world(config: RunConfig) -> World:
    """Reopen a persisted world, or create one if the data dir is empty.

    Chain and engine state are rebuilt from their journals. The observer is
    not subscribed; callers replay it explicitly.
    """
    d = Path(config.data_dir)
    if not (d / STATE_FILE).exists():
        build_world(config).warehouse.close()
    saved = load_deployment(d)
    clock = make_clock(saved["clock_mode"])
    engine = Engine.from_journal(
        d / ENGINE_JOURNAL, clock=clock, region=saved["region"], seed=saved["seed"],
        emit_transitions=saved["emit_transitions"],
    )
    install_reference_handlers(engine)
    ledger = Ledger.from_journal(d / CHAIN_JOURNAL, clock=clock, block_batch=saved["block_batch"])
    account = client_account(ledger, saved["seed"])
    if account.address != saved["client_address"]:
        raise ValueError("client account does not match the persisted deployment")
    controller = Controller(engine, ledger, account, saved["contract_address"])
    for run in engine.instances():
        controller._instances[run.guid] = run.instance_hash.hex()
    controller.attach()
    cfg = RunConfig(
        seed=saved["seed"], region=saved["region"], clock_mode=saved["clock_mode"],
        time_tolerance_ms=config.time_tolerance_ms, emit_transitions=saved["emit_transitions"],
        data_dir=d, block_batch=saved["block_batch"],
    )
    warehouse = Warehouse(d / WAREHOUSE_FILE)
    observer = Observer(
        ledger, engine, saved["contract_address"], warehouse=warehouse,
        tolerance_ms=config.time_tolerance_ms,
        client_ids={account.address: "client-a"},
        log_path=d / OBSERVER_LOG, cursor_path=d / CURSOR_FILE,
    )
    models = engine.models()
    world = World(cfg, engine, ledger, account, controller, observer, warehouse,
                  model_hash=models[-1].hex() if models else None)
    world.instances = [(r.guid, r.instance_hash.hex()) for r in engine.instances()]
    return world
