"""Deployment engine: parse a Deployment Description Document (DDD), compile
it into per-node installer/runner and per-connection wirer to-do lists, and
drive the three phases that take every component from Planned through
Deployed and Running to Wired.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping

from . import xmldoc
from .bundle import (
    Bundle,
    Datum,
    Guid,
    builtin_bundle,
    canonical_encode,
    certificate_of,
    compute_guid,
    decode,
    entity_id,
    sign_bundle,
)
from .channels import Connector
from .control import FIRE, INSTALL, WIRE, Task, TaskOutcome, TaskReport, ToDoList
from .errors import (
    CingalError,
    MalformedDocument,
    MissingBundle,
    PhaseFailed,
    UnresolvedReference,
)
from .tools import INSTALLER, RUNNER, WIRER
from .tsscp import client_send_fire

log = logging.getLogger(__name__)

REPORT_TIMEOUT = 60.0


def _key(name: str) -> str:
    return " ".join(name.split()).casefold()


# -- the description -----------------------------------------------------------


@dataclass(frozen=True)
class BundleDecl:
    name: str
    code: str


@dataclass(frozen=True)
class NodeDecl:
    id: str
    address: str


@dataclass(frozen=True)
class DeploymentDecl:
    name: str
    bundle: str  # a BundleDecl name
    target: str  # a NodeDecl id


@dataclass(frozen=True)
class Endpoint:
    deployment: str
    channel: str


@dataclass(frozen=True)
class ConnectionDecl:
    source: Endpoint
    destination: Endpoint

    @property
    def name(self) -> str:
        s, d = self.source, self.destination
        return f"{s.deployment}.{s.channel}->{d.deployment}.{d.channel}"


@dataclass(frozen=True)
class DeploymentDescription:
    name: str
    bundles: tuple[BundleDecl, ...] = ()
    nodes: tuple[NodeDecl, ...] = ()
    deployments: tuple[DeploymentDecl, ...] = ()
    connections: tuple[ConnectionDecl, ...] = ()

    def node(self, id: str) -> NodeDecl:
        return next(n for n in self.nodes if n.id == id)

    def bundle(self, name: str) -> BundleDecl:
        return next(b for b in self.bundles if b.name == name)

    def deployment(self, name: str) -> DeploymentDecl:
        return next(d for d in self.deployments if d.name == name)

    def with_addresses(self, addresses: Mapping[str, str]) -> "DeploymentDescription":
        """Copy with node addresses replaced (keys matched case-insensitively)."""
        table = {_key(k): v for k, v in addresses.items()}
        nodes = tuple(NodeDecl(n.id, table.get(_key(n.id), n.address)) for n in self.nodes)
        return DeploymentDescription(self.name, self.bundles, nodes, self.deployments, self.connections)


def _section(root, tag: str, item: str):
    found = root.findall(tag)
    if len(found) > 1:
        raise MalformedDocument(f"<{tag}> appears more than once")
    if not found:
        return []
    xmldoc.check_no_stray_text(found[0])
    items = list(found[0])
    for node in items:
        if node.tag != item:
            raise MalformedDocument(f"unexpected <{node.tag}> inside <{tag}>")
    return items


def _unique(kind: str, names: Iterable[str]) -> dict[str, str]:
    table: dict[str, str] = {}
    for name in names:
        if _key(name) in table:
            raise MalformedDocument(f"{kind} {name!r} is declared twice")
        table[_key(name)] = name
    return table


def _resolve(table: dict[str, str], kind: str, ref: str, where: str) -> str:
    try:
        return table[_key(ref)]
    except KeyError:
        raise UnresolvedReference(f"{where} refers to unknown {kind} {ref.strip()!r}") from None


def parse_ddd(doc: bytes | str) -> DeploymentDescription:
    """Parse and fully resolve a DDD. References match declarations ignoring
    case and surrounding whitespace; the result uses declared spellings."""
    root = xmldoc.parse(doc, "DDD")
    xmldoc.check_no_stray_text(root)
    for child in root:
        if child.tag not in ("bundles", "nodes", "deployments", "connections"):
            raise MalformedDocument(f"unexpected <{child.tag}> inside DDD")
    bundles = tuple(
        BundleDecl(xmldoc.require(n, "name").strip(), xmldoc.require(n, "code").strip())
        for n in _section(root, "bundles", "bundle")
    )
    nodes = tuple(
        NodeDecl(xmldoc.require(n, "id").strip(), xmldoc.require(n, "address").strip())
        for n in _section(root, "nodes", "node")
    )
    bundle_names = _unique("bundle", (b.name for b in bundles))
    node_ids = _unique("node", (n.id for n in nodes))
    deployments = []
    for n in _section(root, "deployments", "deployment"):
        name = xmldoc.require(n, "name").strip()
        deployments.append(
            DeploymentDecl(
                name,
                _resolve(bundle_names, "bundle", xmldoc.require(n, "bundle"), f"deployment {name!r}"),
                _resolve(node_ids, "node", xmldoc.require(n, "target"), f"deployment {name!r}"),
            )
        )
    deployment_names = _unique("deployment", (d.name for d in deployments))
    connections = []
    for index, n in enumerate(_section(root, "connections", "connection"), start=1):
        xmldoc.check_no_stray_text(n)
        ends = {}
        for child in n:
            if child.tag not in ("source", "destination") or child.tag in ends:
                raise MalformedDocument(f"connection {index}: unexpected <{child.tag}>")
            ends[child.tag] = Endpoint(
                _resolve(deployment_names, "deployment", xmldoc.require(child, "deployment"), f"connection {index}"),
                xmldoc.require(child, "channel").strip(),
            )
        if set(ends) != {"source", "destination"}:
            raise MalformedDocument(f"connection {index} needs a source and a destination")
        connections.append(ConnectionDecl(ends["source"], ends["destination"]))
    return DeploymentDescription(
        xmldoc.require(root, "name"), bundles, nodes, tuple(deployments), tuple(connections)
    )


def load_ddd(path: str | os.PathLike) -> DeploymentDescription:
    return parse_ddd(Path(path).read_bytes())


# -- catalogue ---------------------------------------------------------------------


class Catalogue:
    """Bundle documents addressed by the DDD's relative ``code`` paths."""

    def __init__(self, root: str | os.PathLike | None = None, bundles: Mapping[str, Bundle] | None = None):
        self.root = Path(root) if root is not None else None
        self._bundles = dict(bundles or {})

    def __contains__(self, code: str) -> bool:
        if code in self._bundles:
            return True
        return self.root is not None and (self.root / code).is_file()

    def load(self, code: str) -> Bundle:
        if code in self._bundles:
            return self._bundles[code]
        if self.root is not None:
            path = self.root / code
            if path.is_file():
                bundle = decode(path.read_bytes())
                self._bundles[code] = bundle
                return bundle
        raise MissingBundle(f"catalogue has no bundle at {code!r}")


# -- the plan ----------------------------------------------------------------------


def task_guid(ddd_name: str, phase: str, subject: str) -> str:
    digest = hashlib.md5(f"{ddd_name}\x00{phase}\x00{subject}".encode("utf-8")).hexdigest()
    return f"urn:gloss:{digest}"


@dataclass(frozen=True)
class InstallTask:
    deployment: str
    guid: str
    payload_ref: str
    payload: Bundle


@dataclass(frozen=True)
class ToolPlan:
    node: str
    address: str
    tasks: tuple


@dataclass(frozen=True)
class WirePlan:
    connection: ConnectionDecl
    guid: str
    primary: Endpoint
    secondary: Endpoint
    primary_node: str
    secondary_node: str


@dataclass(frozen=True)
class DeploymentPlan:
    ddd: DeploymentDescription
    installers: tuple[ToolPlan, ...]
    runners: tuple[ToolPlan, ...]  # tasks are (deployment, task guid)
    wirers: tuple[WirePlan, ...]

    def serialize(self) -> bytes:
        installers = [
            xmldoc.element(
                "installer",
                {"node": p.node, "address": p.address},
                [
                    xmldoc.element(
                        "install",
                        {
                            "deployment": t.deployment,
                            "guid": t.guid,
                            "payloadRef": t.payload_ref,
                            "payloadGuid": t.payload.guid.hex,
                        },
                    )
                    for t in p.tasks
                ],
            )
            for p in self.installers
        ]
        runners = [
            xmldoc.element(
                "runner",
                {"node": p.node, "address": p.address},
                [xmldoc.element("fire", {"deployment": d, "guid": g}) for d, g in p.tasks],
            )
            for p in self.runners
        ]
        wirers = [
            xmldoc.element(
                "wirer",
                {
                    "guid": w.guid,
                    "primary": w.primary.deployment,
                    "primaryChannel": w.primary.channel,
                    "primaryNode": w.primary_node,
                    "secondary": w.secondary.deployment,
                    "secondaryChannel": w.secondary.channel,
                    "secondaryNode": w.secondary_node,
                },
            )
            for w in self.wirers
        ]
        return xmldoc.element(
            "DeploymentPlan",
            {"ddd": self.ddd.name},
            [
                xmldoc.element("installers", {}, installers),
                xmldoc.element("runners", {}, runners),
                xmldoc.element("wirers", {}, wirers),
            ],
        ).encode("utf-8")


def compile_plan(ddd: DeploymentDescription, catalogue: Catalogue) -> DeploymentPlan:
    """One installer and one runner per node hosting deployments, one wirer
    per connection; the source endpoint of each connection is the primary."""
    by_node: dict[str, list[DeploymentDecl]] = {}
    for d in ddd.deployments:
        by_node.setdefault(d.target, []).append(d)
    installers, runners = [], []
    for node in ddd.nodes:
        hosted = by_node.get(node.id)
        if not hosted:
            continue
        tasks = []
        for d in hosted:
            code = ddd.bundle(d.bundle).code
            payload = catalogue.load(code)
            tasks.append(
                InstallTask(
                    d.name,
                    task_guid(ddd.name, "install", d.name),
                    task_guid(ddd.name, "payload", d.name),
                    payload,
                )
            )
        installers.append(ToolPlan(node.id, node.address, tuple(tasks)))
        runners.append(
            ToolPlan(node.id, node.address, tuple((d.name, task_guid(ddd.name, "run", d.name)) for d in hosted))
        )
    wirers = tuple(
        WirePlan(
            c,
            task_guid(ddd.name, "wire", c.name),
            c.source,
            c.destination,
            ddd.deployment(c.source.deployment).target,
            ddd.deployment(c.destination.deployment).target,
        )
        for c in ddd.connections
    )
    return DeploymentPlan(ddd, tuple(installers), tuple(runners), wirers)


compile = compile_plan


# -- records and reports -----------------------------------------------------------


class RecordState(str, Enum):
    PLANNED = "Planned"
    DEPLOYED = "Deployed"
    RUNNING = "Running"
    WIRED = "Wired"
    FAILED = "Failed"


_ORDER = [RecordState.PLANNED, RecordState.DEPLOYED, RecordState.RUNNING, RecordState.WIRED]


@dataclass
class DeploymentRecord:
    deployment: str
    node: str
    state: RecordState = RecordState.PLANNED
    bundle_guid: Guid | None = None
    connector: Connector | None = None
    error: str | None = None
    history: list[RecordState] = field(default_factory=lambda: [RecordState.PLANNED])

    def advance(self, state: RecordState) -> None:
        if self.state is RecordState.FAILED:
            return
        if state is not RecordState.FAILED and _ORDER.index(state) < _ORDER.index(self.state):
            raise ValueError(f"{self.deployment}: cannot move from {self.state.value} back to {state.value}")
        if state is not self.state:
            self.state = state
            self.history.append(state)

    def fail(self, error: str) -> None:
        if self.state is not RecordState.FAILED:
            self.error = error
            self.advance(RecordState.FAILED)


@dataclass(frozen=True)
class ToolRun:
    phase: str
    node: str
    todo: ToDoList
    report: TaskReport


@dataclass
class DeploymentReport:
    ddd: str
    records: dict[str, DeploymentRecord]
    tool_runs: list[ToolRun] = field(default_factory=list)
    wired: dict[str, bool] = field(default_factory=dict)
    phase_reached: str = "compile"
    failed_phase: str | None = None

    @property
    def succeeded(self) -> bool:
        return self.failed_phase is None and all(r.state is RecordState.WIRED for r in self.records.values())

    def to_xml(self) -> str:
        records = [
            xmldoc.element(
                "record",
                {
                    "deployment": r.deployment,
                    "node": r.node,
                    "state": r.state.value,
                    "bundleGuid": r.bundle_guid.hex if r.bundle_guid else None,
                    "connector": str(r.connector) if r.connector else None,
                    "error": r.error,
                },
            )
            for r in self.records.values()
        ]
        connections = [
            xmldoc.element("connection", {"name": name, "wired": "TRUE" if ok else "FALSE"})
            for name, ok in self.wired.items()
        ]
        runs = [
            xmldoc.element(
                "tool", {"phase": t.phase, "node": t.node}, [t.todo.to_xml(), t.report.to_xml()]
            )
            for t in self.tool_runs
        ]
        return xmldoc.element(
            "DeploymentReport",
            {"ddd": self.ddd, "phase": self.phase_reached, "failed": self.failed_phase},
            [
                xmldoc.element("records", {}, records),
                xmldoc.element("connections", {}, connections),
                xmldoc.element("tools", {}, runs),
            ],
        )


def new_records(plan: DeploymentPlan) -> dict[str, DeploymentRecord]:
    return {d.name: DeploymentRecord(d.name, d.target) for d in plan.ddd.deployments}


# -- the engine --------------------------------------------------------------------


class DeploymentEngine:
    """Fires signed tool bundles at nodes and gathers their task reports.

    ``emitted`` logs every to-do list sent, in order, for inspection.
    """

    def __init__(self, transport, signing_key, report_timeout: float = REPORT_TIMEOUT, max_workers: int = 16):
        self.transport = transport
        self.signing_key = signing_key
        self.entity = entity_id(certificate_of(signing_key))
        self.report_timeout = report_timeout
        self.max_workers = max_workers
        self.emitted: list[tuple[str, str, ToDoList]] = []
        self._lock = threading.Lock()

    def compile(self, ddd: DeploymentDescription, catalogue: Catalogue) -> DeploymentPlan:
        return compile_plan(ddd, catalogue)

    def _tool_bundle(self, entry: str, todo: ToDoList, payloads: Iterable[Datum] = ()) -> Bundle:
        bundle = builtin_bundle(entry, [*payloads, todo.as_datum()])
        return sign_bundle(self.signing_key, bundle, self.entity)

    def run_tool(self, phase: str, node: str, address: str, entry: str, todo: ToDoList,
                 payloads: Iterable[Datum] = ()) -> TaskReport:
        """Fire one tool and wait for its report. Transport failures and
        timeouts turn every task into a failed outcome."""
        with self._lock:
            self.emitted.append((phase, node, todo))
        try:
            handle = client_send_fire(self.transport, address, self._tool_bundle(entry, todo, payloads))
            try:
                report = TaskReport.parse(handle.channel.read(self.report_timeout))
            finally:
                handle.channel.close()
        except (CingalError, TimeoutError) as exc:
            code = str(exc.code) if isinstance(exc, CingalError) else "504"
            return TaskReport(tuple(TaskOutcome.failed(t.guid, code, f"{type(exc).__name__}: {exc}") for t in todo.tasks))
        # every task gets exactly one outcome, in task order
        outcomes = []
        for t in todo.tasks:
            o = report.outcome(t.guid)
            outcomes.append(o if o is not None else TaskOutcome.failed(t.guid, "500", "tool reported no outcome"))
        return TaskReport(tuple(outcomes))

    def _dispatch(self, jobs: list[Callable[[], object]]) -> list:
        if not jobs:
            return []
        with ThreadPoolExecutor(max_workers=min(self.max_workers, len(jobs))) as pool:
            return list(pool.map(lambda job: job(), jobs))

    def phase_install(self, plan: DeploymentPlan, records: dict[str, DeploymentRecord],
                      report: DeploymentReport | None = None) -> dict[str, Guid]:
        jobs = []
        for tool in plan.installers:
            tasks = [t for t in tool.tasks if records[t.deployment].state is RecordState.PLANNED]
            if not tasks:
                continue
            todo = ToDoList(tuple(Task(t.guid, INSTALL, {"PayloadRef": t.payload_ref}) for t in tasks))
            payloads = [Datum(t.payload_ref, t.payload) for t in tasks]
            jobs.append((tool, tasks, todo, payloads))
        results = self._dispatch(
            [lambda j=j: self.run_tool("install", j[0].node, j[0].address, INSTALLER, j[2], j[3]) for j in jobs]
        )
        guids: dict[str, Guid] = {}
        failures = []
        for (tool, tasks, todo, _), tool_report in zip(jobs, results):
            if report is not None:
                report.tool_runs.append(ToolRun("install", tool.node, todo, tool_report))
            for t in tasks:
                record = records[t.deployment]
                outcome = tool_report.outcome(t.guid)
                if outcome.success:
                    try:
                        guid = Guid.parse(outcome.datums.get("StoreGuid", ""))
                    except ValueError:
                        guid = None
                    if guid == compute_guid(canonical_encode(t.payload)):
                        record.bundle_guid = guid
                        record.advance(RecordState.DEPLOYED)
                        guids[t.deployment] = guid
                        continue
                    outcome = TaskOutcome.failed(t.guid, "500", "installer reported a wrong store guid")
                record.fail(f"install: {_describe(outcome)}")
                failures.append(t.deployment)
        if failures:
            raise PhaseFailed("install", f"{len(failures)} deployment(s) failed: {', '.join(failures)}", report)
        return guids

    def phase_run(self, plan: DeploymentPlan, guids: Mapping[str, Guid], records: dict[str, DeploymentRecord],
                  report: DeploymentReport | None = None) -> dict[str, Connector]:
        jobs = []
        for tool in plan.runners:
            # a FIRE task is only ever emitted for a successful install
            tasks = [
                (d, g) for d, g in tool.tasks
                if records[d].state is RecordState.DEPLOYED and d in guids
            ]
            if not tasks:
                continue
            todo = ToDoList(tuple(Task(g, FIRE, {"StoreGuid": guids[d].hex}) for d, g in tasks))
            jobs.append((tool, tasks, todo))
        results = self._dispatch(
            [lambda j=j: self.run_tool("run", j[0].node, j[0].address, RUNNER, j[2]) for j in jobs]
        )
        connectors: dict[str, Connector] = {}
        failures = []
        for (tool, tasks, todo), tool_report in zip(jobs, results):
            if report is not None:
                report.tool_runs.append(ToolRun("run", tool.node, todo, tool_report))
            for d, g in tasks:
                record = records[d]
                outcome = tool_report.outcome(g)
                if outcome.success:
                    try:
                        connector = Connector.parse(outcome.datums.get("Connector", ""))
                    except ValueError:
                        outcome = TaskOutcome.failed(g, "500", "runner reported a malformed connector")
                    else:
                        record.connector = connector
                        record.advance(RecordState.RUNNING)
                        connectors[d] = connector
                        continue
                record.fail(f"run: {_describe(outcome)}")
                failures.append(d)
        if failures:
            raise PhaseFailed("run", f"{len(failures)} deployment(s) failed: {', '.join(failures)}", report)
        return connectors

    def phase_wire(self, plan: DeploymentPlan, connectors: Mapping[str, Connector],
                   records: dict[str, DeploymentRecord], report: DeploymentReport | None = None) -> dict[str, bool]:
        ddd = plan.ddd
        jobs, wired = [], {}
        for w in plan.wirers:
            p, s = w.primary.deployment, w.secondary.deployment
            ready = all(
                records[x].state is RecordState.RUNNING and x in connectors for x in (p, s)
            )
            if not ready:
                wired[w.connection.name] = False
                continue
            todo = ToDoList((
                Task(w.guid, WIRE, {
                    "PrimaryConnector": str(connectors[p]),
                    "SecondaryConnector": str(connectors[s]),
                    "PrimaryAbstractChannel": w.primary.channel,
                    "SecondaryAbstractChannel": w.secondary.channel,
                    "SecondaryNode": ddd.node(w.secondary_node).address,
                }),
            ))
            jobs.append((w, todo))
        results = self._dispatch(
            [
                lambda j=j: self.run_tool("wire", j[0].primary_node, ddd.node(j[0].primary_node).address, WIRER, j[1])
                for j in jobs
            ]
        )
        for (w, todo), tool_report in zip(jobs, results):
            if report is not None:
                report.tool_runs.append(ToolRun("wire", w.primary_node, todo, tool_report))
            wired[w.connection.name] = tool_report.outcome(w.guid).success
        for record in records.values():
            if record.state is not RecordState.RUNNING:
                continue
            mine = [
                wired.get(w.connection.name, False)
                for w in plan.wirers
                if record.deployment in (w.primary.deployment, w.secondary.deployment)
            ]
            if all(mine):
                record.advance(RecordState.WIRED)
        if report is not None:
            report.wired.update(wired)
        failed = [name for name, ok in wired.items() if not ok]
        if failed:
            raise PhaseFailed("wire", f"{len(failed)} connection(s) not established: {', '.join(failed)}", report)
        return wired

    def deploy(
        self,
        ddd: DeploymentDescription,
        catalogue: Catalogue,
        observer: Callable[[str, dict[str, DeploymentRecord]], None] | None = None,
        continue_on_failure: bool = False,
    ) -> DeploymentReport:
        """compile, install, run, wire. A failing phase stops the deployment
        (raising :class:`PhaseFailed` with the report attached) unless
        ``continue_on_failure`` is set, in which case later phases proceed
        with the deployments that succeeded. ``observer`` is called after each
        phase."""
        plan = self.compile(ddd, catalogue)
        records = new_records(plan)
        report = DeploymentReport(ddd.name, records)
        guids: dict[str, Guid] = {}
        connectors: dict[str, Connector] = {}
        phases = (
            ("install", lambda: guids.update(self.phase_install(plan, records, report))),
            ("run", lambda: connectors.update(self.phase_run(plan, guids, records, report))),
            ("wire", lambda: self.phase_wire(plan, connectors, records, report)),
        )
        first_failure = None
        for name, run in phases:
            report.phase_reached = name
            try:
                run()
            except PhaseFailed as exc:
                _salvage(name, records, guids, connectors)
                first_failure = first_failure or exc
                report.failed_phase = report.failed_phase or name
                if observer is not None:
                    observer(name, records)
                if not continue_on_failure:
                    raise
                continue
            if observer is not None:
                observer(name, records)
        if first_failure is not None:
            raise PhaseFailed(first_failure.phase, str(first_failure), report)
        return report


def _salvage(phase, records, guids, connectors) -> None:
    # a raising phase still recorded its successes on the records
    for name, r in records.items():
        if r.state is RecordState.DEPLOYED and r.bundle_guid is not None:
            guids.setdefault(name, r.bundle_guid)
        if r.state is RecordState.RUNNING and r.connector is not None:
            connectors.setdefault(name, r.connector)


def _describe(outcome: TaskOutcome) -> str:
    error = outcome.datums.get("Error", "?")
    reason = outcome.datums.get("Reason")
    return f"error {error}" + (f" ({reason})" if reason else "")


def deploy(transport, signing_key, ddd: DeploymentDescription, catalogue: Catalogue, **kwargs) -> DeploymentReport:
    return DeploymentEngine(transport, signing_key).deploy(ddd, catalogue, **kwargs)
