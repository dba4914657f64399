"""Operator command line.

Subcommands: run-registry and run-reflector (daemons), sim run (deterministic
scenario execution), topo export (DOT/JSON topology documents), and metrics
tail (live metric stream). Exit codes are uniform across subcommands:
0 success, 1 invariant violation, 2 input error, 3 bind error,
4 connectivity error.
"""
from __future__ import annotations

import argparse
import json
import signal
import socket
import sys
from datetime import datetime, timezone

from .config import load_config
from .daemon import ReflectorDaemon, RegistryDaemon, parse_hostport
from .errors import BadPattern, ConfigError, RegistryUnreachable, SchemaError
from .export import load_snapshot_document, render_dot_dict, render_snapshot_dict
from .monitor import compile_pattern
from .protocol import decode_message, encode_message, make_snapshot_request, make_subscribe
from .sim import OverlaySim, load_scenario_file

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_INPUT = 2
EXIT_BIND = 3
EXIT_CONNECT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vroverlay", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    registry = sub.add_parser("run-registry", help="run the registry daemon")
    registry.add_argument("--config", help="key=value config file")
    registry.add_argument("--listen", help="HOST:PORT to bind (overrides config)")

    reflector = sub.add_parser("run-reflector", help="run one reflector daemon")
    reflector.add_argument("--config", help="key=value config file")
    reflector.add_argument("--id", type=int, help="reflector id (overrides config)")
    reflector.add_argument("--registry", help="registry HOST:PORT (overrides config)")
    reflector.add_argument("--listen", help="media HOST:PORT to bind (overrides config)")
    reflector.add_argument("--region", help="region tag, e.g. EU or US")
    reflector.add_argument(
        "--peer",
        action="append",
        default=[],
        metavar="ID=HOST:PORT",
        help="static peer reflector (repeatable)",
    )

    sim = sub.add_parser("sim", help="deterministic simulation")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)
    sim_run = sim_sub.add_parser("run", help="run a scenario file")
    sim_run.add_argument("scenario", help="scenario JSON document")
    sim_run.add_argument("--seed", type=int, help="override the scenario seed")
    sim_run.add_argument("--trace", help="write the JSON-lines trace here")
    sim_run.add_argument("--snapshot-out",
                         help="write the final topology snapshot here (topo export input)")
    sim_run.add_argument("--no-monitoring", action="store_true",
                         help="disable metric recording (control plane still runs)")

    topo = sub.add_parser("topo", help="topology documents")
    topo_sub = topo.add_subparsers(dest="topo_command", required=True)
    export = topo_sub.add_parser("export", help="print the overlay topology")
    export.add_argument("--format", choices=("dot", "json"), default="dot")
    export.add_argument("--registry", help="registry HOST:PORT (live mode)")
    export.add_argument("--snapshot", help="snapshot JSON file (offline mode)")
    export.add_argument("--config", help="key=value config file")

    metrics = sub.add_parser("metrics", help="metric streams")
    metrics_sub = metrics.add_subparsers(dest="metrics_command", required=True)
    tail = metrics_sub.add_parser("tail", help="stream metric samples")
    tail.add_argument("--filter", default="*", help="glob over metric names")
    tail.add_argument("--reflector", type=int, action="append",
                      help="only these reflector ids (repeatable)")
    tail.add_argument("--registry", help="registry HOST:PORT")
    tail.add_argument("--config", help="key=value config file")
    tail.add_argument("--limit", type=int, default=0,
                      help="stop after N samples (0 = run until interrupted)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run-registry":
            return _run_registry(args)
        if args.command == "run-reflector":
            return _run_reflector(args)
        if args.command == "sim":
            return _sim_run(args)
        if args.command == "topo":
            return _topo_export(args)
        if args.command == "metrics":
            return _metrics_tail(args)
    except (ConfigError, SchemaError, BadPattern) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_INPUT
    except RegistryUnreachable as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONNECT
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_CONNECT
    raise AssertionError("unhandled command")


def _install_stop_handler(stop):
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda signum, frame: stop())


def _run_registry(args) -> int:
    config = load_config(args.config)
    daemon = RegistryDaemon(config, listen=args.listen, notification_stream=sys.stderr)
    # Handlers go in before the daemon is reachable, so a prompt SIGTERM
    # still shuts down cleanly instead of killing the process.
    _install_stop_handler(daemon.stop)
    try:
        daemon.start()
    except OSError as exc:
        print("error: cannot bind %s: %s" % (args.listen or config.registry_address, exc),
              file=sys.stderr)
        return EXIT_BIND
    print("registry listening on %s:%d" % (daemon.listen_address[0], daemon.port), flush=True)
    daemon.run_forever()
    return EXIT_OK


def _run_reflector(args) -> int:
    overrides = {}
    if args.id is not None:
        overrides["reflector_id"] = args.id
    if args.registry:
        overrides["registry_address"] = args.registry
    if args.listen:
        overrides["listen"] = args.listen
    if args.region:
        overrides["region"] = args.region
    config = load_config(args.config, overrides)
    peers = {}
    for spec in args.peer:
        peer_id, _, address = spec.partition("=")
        try:
            peers[int(peer_id)] = address
            parse_hostport(address)
        except (ValueError, ConfigError):
            raise ConfigError("bad --peer %r, expected ID=HOST:PORT" % spec) from None
    daemon = ReflectorDaemon(config, peers=peers)
    _install_stop_handler(daemon.shutdown)
    try:
        daemon.start()
    except (RegistryUnreachable, OSError) as exc:
        if daemon.stopping:
            return EXIT_OK  # terminated mid-startup: that is a clean shutdown
        if isinstance(exc, RegistryUnreachable):
            raise
        if isinstance(exc, ConnectionError) or not _is_bind_error(exc, config.listen):
            print("error: registry unreachable at %s: %s"
                  % (config.registry_address, exc), file=sys.stderr)
            return EXIT_CONNECT
        print("error: cannot bind %s: %s" % (config.listen, exc), file=sys.stderr)
        return EXIT_BIND
    print("reflector %d listening on port %d" % (config.reflector_id, daemon.port), flush=True)
    daemon.run_forever()
    daemon.shutdown()
    return EXIT_OK


def _is_bind_error(exc: OSError, listen: str) -> bool:
    try:
        host, port = parse_hostport(listen)
    except ConfigError:
        return False
    import errno

    return exc.errno in (errno.EADDRINUSE, errno.EACCES, errno.EADDRNOTAVAIL) and port != 0


def _sim_run(args) -> int:
    scenario = load_scenario_file(args.scenario, seed_override=args.seed)
    sim = OverlaySim(scenario, monitoring=not args.no_monitoring)
    report = sim.run()
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            for event in report.trace:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
    if args.snapshot_out:
        from .export import snapshot_to_json

        snapshot = sim.registry.latest_snapshot
        if snapshot is None:
            snapshot = sim.registry.build_snapshot()
        with open(args.snapshot_out, "w", encoding="utf-8") as fh:
            fh.write(snapshot_to_json(snapshot))
    for line in report.summary_lines():
        print(line)
    print("trace hash: %s" % report.trace_hash())
    return EXIT_OK if report.ok() else EXIT_INVARIANT


def _fetch_snapshot_document(address: str) -> dict:
    try:
        with socket.create_connection(parse_hostport(address), timeout=5.0) as sock:
            sock.sendall(encode_message(make_snapshot_request()).encode("utf-8"))
            reader = sock.makefile("r", encoding="utf-8")
            while True:
                line = reader.readline()
                if not line:
                    raise RegistryUnreachable("registry closed the connection")
                msg = decode_message(line)
                if msg["kind"] == "snapshot":
                    return msg["snapshot"]
    except OSError as exc:
        raise RegistryUnreachable("cannot reach registry at %s: %s" % (address, exc)) from exc


def _topo_export(args) -> int:
    if args.snapshot:
        try:
            with open(args.snapshot, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise SchemaError("cannot read snapshot %s: %s" % (args.snapshot, exc)) from exc
        try:
            doc = load_snapshot_document(text)
        except json.JSONDecodeError as exc:
            raise SchemaError("snapshot is not valid JSON: %s" % exc.msg) from None
    else:
        config = load_config(args.config)
        doc = _fetch_snapshot_document(args.registry or config.registry_address)
    if args.format == "json":
        sys.stdout.write(render_snapshot_dict(doc))
    else:
        sys.stdout.write(render_dot_dict(doc))
    return EXIT_OK


def _metrics_tail(args) -> int:
    compile_pattern(args.filter)  # reject bad globs before dialing out
    config = load_config(args.config)
    address = args.registry or config.registry_address
    try:
        sock = socket.create_connection(parse_hostport(address), timeout=5.0)
    except OSError as exc:
        raise RegistryUnreachable("cannot reach registry at %s: %s" % (address, exc)) from exc
    stop = {"flag": False}
    _install_stop_handler(lambda: stop.__setitem__("flag", True) or sock.close())
    printed = 0
    with sock:
        sock.sendall(
            encode_message(
                make_subscribe(args.filter, reflectors=args.reflector)
            ).encode("utf-8")
        )
        reader = sock.makefile("r", encoding="utf-8")
        while not stop["flag"]:
            try:
                line = reader.readline()
            except OSError:
                break
            if not line:
                break
            msg = decode_message(line)
            if msg["kind"] == "ack" and not msg["ok"]:
                raise BadPattern(msg.get("error", "subscription rejected"))
            if msg["kind"] == "event" and msg.get("event") == "metric":
                stamp = datetime.fromtimestamp(msg["at"] / 1000.0, timezone.utc)
                print(
                    "%s %d %s %g"
                    % (stamp.isoformat(), msg["reflector"], msg["name"], msg["value"]),
                    flush=True,
                )
                printed += 1
                if args.limit and printed >= args.limit:
                    break
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
