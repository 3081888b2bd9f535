"""Command-line entry point: ``cingal <verb> ...``.

Exit codes: 0 success, 1 validation error, 2 phase failure, 3 transport
failure.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from .bundle import (
    SIGNATURE_SCHEME,
    certificate_of,
    decode,
    entity_id,
    generate_keypair,
    load_private_key,
    save_private_key,
    sign_bundle,
)
from .deploy import Catalogue, DeploymentEngine, DeploymentReport, RecordState, load_ddd
from .errors import ChannelClosed, CingalError, PhaseFailed, TransportError
from .harness import NodeConfig, SimCluster, start_node, tsscp_frames
from .node_state import NodeState, parse_rights, render_rights
from .transport import TcpTransport
from .tsscp import client_send_fire

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_PHASE = 2
EXIT_TRANSPORT = 3

_TRANSPORT_CODES = {str(TransportError.code), "504"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1), not argparse's 2, which
    would collide with the phase-failure code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _read_key(path: str):
    return load_private_key(Path(path).read_bytes())


def _read_cert(path: str) -> bytes:
    return bytes.fromhex(Path(path).read_text().strip())


def _open_state(args) -> NodeState:
    """Open a stopped node's state; a config also bootstraps its owner."""
    if args.config:
        config = NodeConfig.load(args.config)
        if not config.data_dir:
            raise UsageError("the node config has no data_dir")
        return NodeState(config.data_dir, config.owner_entry())
    return NodeState(args.data_dir)


def _add_state_args(parser: argparse.ArgumentParser) -> None:
    where = parser.add_mutually_exclusive_group(required=True)
    where.add_argument("--config", help="node configuration (bootstraps the owner entry)")
    where.add_argument("--data-dir", help="node data directory")


# -- verbs -------------------------------------------------------------------------


def cmd_keygen(args) -> int:
    key, cert = generate_keypair()
    prefix = Path(args.out)
    prefix.with_suffix(".key").write_bytes(save_private_key(key))
    prefix.with_suffix(".cert").write_text(cert.hex() + "\n")
    print(entity_id(cert))
    return EXIT_OK


def cmd_trust(args) -> int:
    """Add a certificate to a stopped node's VER, acting as ``--as-key``."""
    caller = entity_id(certificate_of(_read_key(args.as_key)))
    cert = _read_cert(args.cert)
    state = _open_state(args)
    try:
        entity = state.ver_put(caller, cert, SIGNATURE_SCHEME, args.subject, parse_rights(args.rights))
    finally:
        state.close()
    print(entity)
    return EXIT_OK


def cmd_node_start(args) -> int:
    config = NodeConfig.load(args.config)
    node = start_node(config)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"node {config.node_id} listening on {node.address}", flush=True)
    try:
        stop.wait()
    finally:
        node.shutdown()
    return EXIT_OK


def cmd_fire(args) -> int:
    key = _read_key(args.key)
    bundle = sign_bundle(key, decode(Path(args.bundle).read_bytes()), overwrite=True)
    handle = client_send_fire(TcpTransport(), args.address, bundle)
    print(f"connector {handle.connector}", file=sys.stderr)
    try:
        for msg in args.send:
            handle.channel.write(msg)
        for _ in range(args.read):
            print(handle.channel.read_str(args.timeout))
    except ChannelClosed:
        pass
    finally:
        handle.channel.close()
    return EXIT_OK


def _node_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        node, sep, address = pair.partition("=")
        if not sep or not node or not address:
            raise UsageError(f"--node expects ID=ADDRESS, got {pair!r}")
        out[node] = address
    return out


def _summary(report: DeploymentReport) -> str:
    lines = []
    for r in report.records.values():
        where = f" {r.connector}" if r.connector else ""
        why = f" ({r.error})" if r.error else ""
        lines.append(f"{r.deployment}: {r.state.value}{where}{why}")
    for name, ok in report.wired.items():
        lines.append(f"{name}: {'connected' if ok else 'NOT connected'}")
    return "\n".join(lines)


def _failure_exit(report: DeploymentReport) -> int:
    """3 when every failed task of the failing phase failed in transport."""
    codes = [
        o.datums.get("Error")
        for run in report.tool_runs
        if run.phase == report.failed_phase
        for o in run.report.outcomes
        if not o.success
    ]
    if codes and all(c in _TRANSPORT_CODES for c in codes):
        return EXIT_TRANSPORT
    return EXIT_PHASE


def _finish(report: DeploymentReport, xml: bool) -> int:
    print(report.to_xml() if xml else _summary(report))
    if report.failed_phase is not None:
        print(f"deployment failed in the {report.failed_phase} phase", file=sys.stderr)
        return _failure_exit(report)
    if not all(r.state is RecordState.WIRED for r in report.records.values()):
        return EXIT_PHASE
    return EXIT_OK


def cmd_deploy(args) -> int:
    ddd = load_ddd(args.ddd).with_addresses(_node_overrides(args.node))
    catalogue = Catalogue(args.catalogue)
    engine = DeploymentEngine(TcpTransport(args.host), _read_key(args.key), report_timeout=args.timeout)
    try:
        report = engine.deploy(ddd, catalogue, continue_on_failure=args.keep_going)
    except PhaseFailed as exc:
        report = exc.report
    return _finish(report, args.xml)


def cmd_sim(args) -> int:
    ddd = load_ddd(args.ddd)
    catalogue = Catalogue(args.catalogue) if args.catalogue else None
    with SimCluster(args.nodes or max(1, len(ddd.nodes))) as cluster:
        try:
            report = cluster.deploy(ddd, catalogue)
        except PhaseFailed as exc:
            report = exc.report
        if args.trace:
            for t in tsscp_frames(cluster.trace):
                fields = " ".join(f"{k}={v}" for k, v in sorted(t.frame.fields.items()))
                print(f"{t.seq:5d} {t.src} -> {t.dst}:{t.server_port} {t.frame.type} {fields}".rstrip())
    return _finish(report, args.xml)


def cmd_inspect(args) -> int:
    state = _open_state(args)
    try:
        if args.table == "store":
            for guid in state.store_keys():
                print(guid.hex)
        elif args.table == "sbinder":
            for b in state.sbinder_items():
                print(f"{b.name}\t{b.guid.hex}\t{b.clue or ''}")
        elif args.table == "pbinder":
            for name, s in state.pbinder_items().items():
                print(f"{name}\t{s.guid.hex}\tinstances={s.instances}\towner={s.owner}")
        else:
            for e in state.ver_entries():
                print(f"{e.entity}\t{e.subject}\t{render_rights(e.rights)}")
    finally:
        state.close()
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cingal", description="Thin-server nodes and DDD deployment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log debug output to stderr")
    verbs = parser.add_subparsers(dest="verb", required=True)

    node = verbs.add_parser("node", help="run a node")
    node_verbs = node.add_subparsers(dest="node_verb", required=True)
    start = node_verbs.add_parser("start", help="serve TSSCP until interrupted")
    start.add_argument("--config", required=True, help="JSON node configuration")
    start.set_defaults(func=cmd_node_start)

    keygen = verbs.add_parser("keygen", help="create a signing identity")
    keygen.add_argument("--out", required=True, help="writes OUT.key (PEM) and OUT.cert (hex)")
    keygen.set_defaults(func=cmd_keygen)

    trust = verbs.add_parser("trust", help="add a certificate to a stopped node's VER")
    _add_state_args(trust)
    trust.add_argument("--as-key", required=True, help="key of an entity holding VER_PUT on the node")
    trust.add_argument("--cert", required=True, help="certificate file written by keygen")
    trust.add_argument("--rights", default="ALL", help="ALL or a comma-separated list of rights")
    trust.add_argument("--subject", default="trusted entity")
    trust.set_defaults(func=cmd_trust)

    fire = verbs.add_parser("fire", help="sign and fire a bundle, printing what it writes")
    fire.add_argument("--address", required=True, help="host[:port] of the node")
    fire.add_argument("--bundle", required=True)
    fire.add_argument("--key", required=True)
    fire.add_argument("--send", action="append", default=[], help="message to write first (repeatable)")
    fire.add_argument("--read", type=int, default=1, help="messages to read from the default channel")
    fire.add_argument("--timeout", type=float, default=30.0)
    fire.set_defaults(func=cmd_fire)

    deploy = verbs.add_parser("deploy", help="deploy a DDD onto running nodes")
    deploy.add_argument("--ddd", required=True)
    deploy.add_argument("--catalogue", required=True, help="directory the DDD's code paths are relative to")
    deploy.add_argument("--key", required=True, help="engine signing key")
    deploy.add_argument("--node", action="append", default=[], metavar="ID=ADDRESS",
                        help="override a DDD node address (repeatable)")
    deploy.add_argument("--host", default="127.0.0.1", help="local interface for outgoing connections")
    deploy.add_argument("--timeout", type=float, default=60.0, help="seconds to wait for each task report")
    deploy.add_argument("--keep-going", action="store_true", help="continue later phases after a failure")
    deploy.add_argument("--xml", action="store_true", help="print the full DeploymentReport document")
    deploy.set_defaults(func=cmd_deploy)

    sim = verbs.add_parser("sim", help="deploy a DDD onto in-process simulated nodes")
    sim.add_argument("--ddd", required=True)
    sim.add_argument("--nodes", type=int, default=0, help="node count (default: one per DDD node)")
    sim.add_argument("--catalogue", help="bundle directory (default: bundled fixtures)")
    sim.add_argument("--trace", action="store_true", help="print the TSSCP frame trace")
    sim.add_argument("--xml", action="store_true")
    sim.set_defaults(func=cmd_sim)

    inspect = verbs.add_parser("inspect", help="list a stopped node's persistent state")
    inspect.add_argument("table", choices=["store", "sbinder", "pbinder", "ver"])
    _add_state_args(inspect)
    inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TransportError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except PhaseFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PHASE
    except (CingalError, UsageError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
