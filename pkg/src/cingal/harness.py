"""Node configuration, an in-process multi-node cluster on the simulated
network, and helpers for inspecting the frame trace it records."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

from . import frames
from .bundle import SIGNATURE_SCHEME, entity_id, generate_keypair
from .channels import DEFAULT_LISTEN_TIMEOUT, ChannelEnd, Connector
from .deploy import Catalogue, DeploymentDescription, DeploymentEngine, DeploymentReport, REPORT_TIMEOUT
from .errors import PhaseFailed
from .machine import Node
from .node_state import ALL_RIGHTS, NodeState, VerEntry, parse_rights
from .transport import SimulatedNetwork, TcpTransport, TraceEvent
from .tsscp import DEFAULT_PORT

ENGINE_HOST = "sim://engine"


def fixture_path(*parts: str) -> Path:
    return Path(str(resources.files("cingal") / "fixtures")).joinpath(*parts)


def fixture_catalogue() -> Catalogue:
    return Catalogue(fixture_path())


# -- node configuration ----------------------------------------------------------


@dataclass
class NodeConfig:
    node_id: str
    standard_port: int = DEFAULT_PORT
    data_dir: str | None = None
    owner_certificate: str = ""  # hex of the raw certificate bytes
    owner_rights: str = "ALL"
    host: str = "127.0.0.1"
    transport: str = "tcp"
    listen_timeout: float = DEFAULT_LISTEN_TIMEOUT

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NodeConfig":
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError("node config must be a JSON object")
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown node config fields: {', '.join(sorted(unknown))}")
        config = cls(**raw)
        config.validate()
        return config

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    def validate(self) -> None:
        if not self.node_id:
            raise ValueError("node_id is required")
        if self.transport not in ("tcp", "sim"):
            raise ValueError(f"transport must be 'tcp' or 'sim', not {self.transport!r}")
        if not 0 <= int(self.standard_port) < 65536:
            raise ValueError(f"standard_port {self.standard_port} is out of range")
        if self.owner_certificate:
            bytes.fromhex(self.owner_certificate)
        parse_rights(self.owner_rights)

    def owner_entry(self) -> VerEntry | None:
        if not self.owner_certificate:
            return None
        cert = bytes.fromhex(self.owner_certificate)
        return VerEntry(entity_id(cert), cert, SIGNATURE_SCHEME, "node owner", parse_rights(self.owner_rights))


def start_node(config: NodeConfig, network: SimulatedNetwork | None = None) -> Node:
    """Load (or create) the node's state and start serving TSSCP."""
    config.validate()
    state = NodeState(config.data_dir, config.owner_entry())
    if config.transport == "sim":
        if network is None:
            raise ValueError("a simulated node needs a SimulatedNetwork")
        transport = network.add_host(config.host)
    else:
        transport = TcpTransport(config.host)
    node = Node(config.node_id, transport, state, config.standard_port, config.listen_timeout)
    try:
        return node.start()
    except BaseException:
        state.close()
        raise


# -- simulated cluster -------------------------------------------------------------


@dataclass
class SimCluster:
    """``node_count`` nodes named ``sim://node-1`` ... on one simulated
    network, each trusting the engine identity with ``engine_rights``."""

    node_count: int
    engine_rights: frozenset = ALL_RIGHTS
    listen_timeout: float = DEFAULT_LISTEN_TIMEOUT
    report_timeout: float = REPORT_TIMEOUT
    network: SimulatedNetwork = field(default_factory=SimulatedNetwork)
    nodes: list[Node] = field(default_factory=list, init=False)

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("a cluster needs at least one node")
        self.owner_key, owner_cert = generate_keypair()
        self.engine_key, engine_cert = generate_keypair()
        self.engine_entity = ""
        for k in range(1, self.node_count + 1):
            state = NodeState.with_owner(owner_cert)
            self.engine_entity = state.ver_put(
                state.owner, engine_cert, SIGNATURE_SCHEME, "deployment engine", self.engine_rights
            )
            node = Node(f"node-{k}", self.network.add_host(f"sim://node-{k}"), state,
                        listen_timeout=self.listen_timeout)
            self.nodes.append(node.start())
        self.engine_transport = self.network.add_host(ENGINE_HOST)

    def __enter__(self) -> "SimCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()

    def shutdown(self) -> None:
        for node in self.nodes:
            node.shutdown()

    @property
    def trace(self) -> list[TraceEvent]:
        return self.network.trace

    def engine(self) -> DeploymentEngine:
        return DeploymentEngine(self.engine_transport, self.engine_key, self.report_timeout)

    def place(self, ddd: DeploymentDescription) -> DeploymentDescription:
        """Map the DDD's nodes, in declaration order, onto cluster nodes."""
        return ddd.with_addresses(
            {n.id: self.nodes[i % len(self.nodes)].address for i, n in enumerate(ddd.nodes)}
        )

    def deploy(self, ddd: DeploymentDescription, catalogue: Catalogue | None = None,
               **kwargs) -> DeploymentReport:
        return self.engine().deploy(self.place(ddd), catalogue or fixture_catalogue(), **kwargs)

    def node_for(self, connector: Connector | str) -> Node:
        if isinstance(connector, str):
            connector = Connector.parse(connector)
        for node in self.nodes:
            if node.host == connector.ip and node.machine_at(connector) is not None:
                return node
        raise LookupError(f"no live machine at {connector}")

    def channel(self, connector: Connector | str, name: str) -> ChannelEnd:
        """The named channel of the machine at ``connector`` (for probes)."""
        return self.node_for(connector).machine_at(connector).cm.get_abstract_channel(name)


def sim_run(ddd: DeploymentDescription, node_count: int | None = None,
            catalogue: Catalogue | None = None, **kwargs) -> tuple[DeploymentReport, list[TraceEvent]]:
    """Boot ``node_count`` simulated nodes (default: one per DDD node),
    deploy, shut down, and return the report with the frame trace. A failed
    phase still returns the partial report."""
    with SimCluster(node_count or max(1, len(ddd.nodes)), **kwargs) as cluster:
        try:
            report = cluster.deploy(ddd, catalogue)
        except PhaseFailed as exc:
            report = exc.report
        return report, list(cluster.trace)


# -- trace inspection --------------------------------------------------------------


@dataclass(frozen=True)
class TraceFrame:
    seq: int
    src: str
    dst: str
    server_port: int
    from_dialer: bool
    kind: str
    frame: frames.Frame | None


def decode_trace(trace: Iterable[TraceEvent]) -> list[TraceFrame]:
    out = []
    for ev in trace:
        kind, frame = frames.describe(ev.frame)
        out.append(TraceFrame(ev.seq, ev.src, ev.dst, ev.server_port, ev.from_dialer, kind, frame))
    return out


def tsscp_frames(trace: Iterable[TraceEvent], *types: str) -> list[TraceFrame]:
    return [
        t for t in decode_trace(trace)
        if t.frame is not None and (not types or t.frame.type in types)
    ]

