"""Command-line interface.

Exit codes: 0 ok, 2 validation failure detected, 3 ledger rejection,
4 engine error, 5 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import report
from .engine import EngineError
from .ledger import LedgerError
from .scenario import (
    WAREHOUSE_FILE,
    RunConfig,
    World,
    build_world,
    load_reference_model,
    open_world,
    reference_input,
    tamper_state,
)
from .states import ModelError, parse_model
from .tracker import (
    EngineUnavailable,
    HashingFailed,
    LedgerRejected,
    UnknownInstance,
    verify_instance,
)
from .warehouse import Warehouse, WarehouseError, write_csv

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_LEDGER = 3
EXIT_ENGINE = 4
EXIT_IO = 5

log = logging.getLogger("chaintrack")


class CommandError(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def _config(args: argparse.Namespace) -> RunConfig:
    try:
        return RunConfig(
            seed=args.seed,
            region=args.region,
            clock_mode=args.clock,
            time_tolerance_ms=args.tolerance_ms,
            emit_transitions=args.emit_transitions,
            data_dir=Path(args.data_dir) if args.data_dir else None,
            block_batch=args.block_batch,
        )
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_VALIDATION) from exc


def _need_data_dir(cfg: RunConfig) -> Path:
    if cfg.data_dir is None:
        raise CommandError("this command needs --data-dir", EXIT_IO)
    return cfg.data_dir


def _emit(text: str) -> None:
    sys.stdout.write(text)


# -- demo ------------------------------------------------------------------------------


def _parse_tamper(spec: Optional[str], debug: bool) -> Optional[int]:
    if spec is None:
        return None
    if not debug:
        raise CommandError("--tamper is a test hook and requires --debug", EXIT_VALIDATION)
    kind, _, n = spec.partition(":")
    if kind != "state" or not n.isdigit():
        raise CommandError("--tamper expects state:N", EXIT_VALIDATION)
    return int(n)


def cmd_demo(args: argparse.Namespace) -> int:
    cfg = _config(args)
    tamper = _parse_tamper(args.tamper, args.debug)
    if cfg.data_dir is not None and cfg.data_dir.exists() and any(cfg.data_dir.iterdir()):
        raise CommandError(f"data dir {cfg.data_dir} is not empty", EXIT_IO)
    world = build_world(cfg)
    world.deploy(load_reference_model())
    records = [args.records] + ([args.compare] if args.compare is not None else [])
    for n in records:
        world.run(reference_input(n))
    world.ledger.seal()
    if tamper is not None:
        try:
            tamper_state(world, tamper)
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_VALIDATION) from exc
    world.observer.sync()
    _demo_report(world, args)
    discarded_states = [d for d in world.observer.discards if d["event_type"] == "RegisterState"]
    return EXIT_VALIDATION if discarded_states else EXIT_OK


def _demo_report(world: World, args: argparse.Namespace) -> None:
    fmt = args.format
    wh = world.warehouse
    h_i = world.instances[0][1]
    protocol = wh.query_instance_protocol(h_i)
    counts = wh.query_state_counts(world.model_hash)
    stats = wh.query_state_stats(model_hash=world.model_hash)
    state_events = [e for e in world.ledger.get_events(world.contract_address, ["RegisterState"])
                    if e.args["instance_hash"] == h_i]
    state_discards = [d for d in world.observer.discards if d["event_type"] == "RegisterState"]

    if fmt == "table":
        out = [
            f"contract   {world.contract_address}\n",
            f"client     {world.account.address}\n",
            f"model      {world.model_hash}\n",
            f"instance   {h_i}\n\n",
            "Instance protocol\n",
            report.render(protocol, "table", report.PROTOCOL_COLUMNS),
            "\nStates per instance\n",
            report.render(counts, "table", report.COUNT_COLUMNS),
            "\nState statistics\n",
            report.render_record(stats, "table"),
            "\n",
        ]
        for d in world.observer.discards:
            out.append(f"discarded {d['event_type']} {report._short(d['artifact_hash'])}: "
                       f"{d['failed_check']} ({d['detail']})\n")
        out.append(f"valid: {len(protocol)}/{len(state_events)} states, {len(state_discards)} discarded\n")
        _emit("".join(out))
    elif fmt == "json":
        _emit(json.dumps({
            "contract": world.contract_address,
            "client": world.account.address,
            "model_hash": world.model_hash,
            "instance_hash": h_i,
            "protocol": protocol,
            "state_counts": counts,
            "stats": stats,
            "discards": world.observer.discards,
        }, indent=2) + "\n")
    else:
        _emit(report.render(protocol, "csv", report.PROTOCOL_COLUMNS))

    if args.out:
        _write_outputs(Path(args.out), protocol, counts, stats, world.observer.discards)


def _write_outputs(out: Path, protocol, counts, stats, discards) -> None:
    from .plotting import plot_state_counts, plot_timeline

    try:
        out.mkdir(parents=True, exist_ok=True)
        write_csv([{c: r[c] for c in report.PROTOCOL_COLUMNS} for r in protocol], out / "protocol.csv")
        write_csv(counts, out / "state_counts.csv")
        write_csv([stats], out / "state_stats.csv")
        if discards:
            write_csv(discards, out / "discards.csv")
        plot_timeline(protocol, out / "protocol_timeline.png")
        plot_state_counts(counts, out / "state_counts.png")
    except OSError as exc:
        raise CommandError(f"cannot write outputs: {exc}", EXIT_IO) from exc


# -- persisted commands ----------------------------------------------------------------


def _open(args: argparse.Namespace) -> World:
    cfg = _config(args)
    _need_data_dir(cfg)
    return open_world(cfg)


def cmd_deploy_model(args: argparse.Namespace) -> int:
    try:
        raw = Path(args.path).read_bytes()
    except OSError as exc:
        raise CommandError(str(exc), EXIT_IO) from exc
    model = parse_model(raw)
    world = _open(args)
    h = world.deploy(model)
    world.ledger.seal()
    _emit(report.render_record({"model_hash": h, "contract": world.contract_address}, args.format))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    if args.input:
        try:
            data = json.loads(Path(args.input).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CommandError(str(exc), EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CommandError(f"input is not JSON: {exc}", EXIT_ENGINE) from exc
    else:
        data = reference_input(args.records)
    world = _open(args)
    guid, h_i = world.run(data, model_hash=args.model_hash)
    world.ledger.seal()
    run = world.engine.instance(guid)
    _emit(report.render_record({"guid": guid, "instance_hash": h_i, "status": run.status.value}, args.format))
    return EXIT_OK


def _track_once(args: argparse.Namespace) -> tuple[int, int]:
    world = _open(args)
    before = len(world.observer.discards)
    entries = world.observer.replay(0)
    world.warehouse.close()
    return len(entries), len(world.observer.discards) - before


def cmd_track(args: argparse.Namespace) -> int:
    total = discarded = 0
    while True:
        n, d = _track_once(args)
        total += n
        discarded += d
        if not args.follow:
            break
        try:
            time.sleep(args.interval)
        except KeyboardInterrupt:
            break
    _emit(report.render_record({"entries": total, "discarded": discarded}, args.format))
    return EXIT_VALIDATION if discarded else EXIT_OK


def _warehouse(args: argparse.Namespace) -> Warehouse:
    cfg = _config(args)
    path = _need_data_dir(cfg) / WAREHOUSE_FILE
    if not path.exists():
        raise CommandError(f"no warehouse at {path}; run 'track' first", EXIT_IO)
    return Warehouse(path)


def cmd_query(args: argparse.Namespace) -> int:
    with _warehouse(args) as wh:
        if args.what == "protocol":
            _emit(report.render(wh.query_instance_protocol(args.hash), args.format, report.PROTOCOL_COLUMNS))
        elif args.what == "counts":
            _emit(report.render(wh.query_state_counts(args.hash), args.format, report.COUNT_COLUMNS))
        else:
            scope = {"instance_hash": args.hash} if args.instance else {"model_hash": args.hash}
            _emit(report.render_record(wh.query_state_stats(**scope), args.format))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    world = _open(args)
    result = verify_instance(world.ledger, world.engine, world.contract_address, args.instance_hash,
                             tolerance_ms=world.config.time_tolerance_ms)
    world.warehouse.close()
    if args.format == "table":
        _emit(result.summary() + "\n")
        for d in result.discards:
            _emit(f"discarded {d['event_type']} {report._short(d['artifact_hash'])}: {d['failed_check']} ({d['detail']})\n")
    else:
        rec = {"instance_hash": result.instance_hash, "valid_states": result.valid_states,
               "total_states": result.total_states, "discards": len(result.discards)}
        _emit(report.render_record(rec, args.format))
    return EXIT_OK if result.ok else EXIT_VALIDATION


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=7, help="engine and account seed (default: 7)")
    common.add_argument("--region", default="sim-east-1")
    common.add_argument("--clock", choices=("virtual", "wall"), default="virtual")
    common.add_argument("--tolerance-ms", type=int, default=300_000, help="time window for the Time check")
    common.add_argument("--emit-transitions", action=argparse.BooleanOptionalAction, default=True)
    common.add_argument("--block-batch", type=int, default=1, help="transactions per block")
    common.add_argument("--data-dir", help="directory for journals and the warehouse")
    common.add_argument("--format", choices=report.FORMATS, default="table")
    common.add_argument("--debug", action="store_true", help="enable debug logging and test hooks")

    p = argparse.ArgumentParser(prog="chaintrack", description="Track state-machine instances on a simulated ledger.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demo", parents=[common], help="run the reference scenario end to end")
    d.add_argument("--records", type=int, default=4)
    d.add_argument("--compare", type=int, metavar="N", help="also run a second instance over N records")
    d.add_argument("--tamper", metavar="state:N", help="flip one byte of state N after registration (needs --debug)")
    d.add_argument("--out", help="directory for CSV files and figures")
    d.set_defaults(func=cmd_demo)

    m = sub.add_parser("deploy-model", parents=[common], help="deploy a model document")
    m.add_argument("path")
    m.set_defaults(func=cmd_deploy_model)

    r = sub.add_parser("run", parents=[common], help="run an instance of a deployed model")
    r.add_argument("model_hash")
    r.add_argument("--input", help="JSON input document")
    r.add_argument("--records", type=int, default=4, help="reference input size when --input is absent")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("track", parents=[common], help="verify chain events into the warehouse")
    t.add_argument("--follow", action="store_true", help="keep polling the chain journal until interrupted")
    t.add_argument("--interval", type=float, default=2.0)
    t.set_defaults(func=cmd_track)

    q = sub.add_parser("query", parents=[common], help="query the warehouse")
    q.add_argument("what", choices=("protocol", "counts", "stats"))
    q.add_argument("hash", help="instance hash (protocol), model hash (counts, stats)")
    q.add_argument("--instance", action="store_true", help="stats over one instance instead of a model")
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("verify", parents=[common], help="re-verify one instance from chain data")
    v.add_argument("instance_hash")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except UnknownInstance as exc:
        print(f"error: unknown instance {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LedgerRejected, LedgerError) as exc:
        print(f"error: ledger rejected: {exc}", file=sys.stderr)
        return EXIT_LEDGER
    except (EngineError, EngineUnavailable, HashingFailed, ModelError) as exc:
        print(f"error: engine: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except (OSError, WarehouseError) as exc:
        print(f"error: i/o: {exc}", file=sys.stderr)
        return EXIT_IO


def _entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    _entry()
