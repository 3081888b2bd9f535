"""Thin-server nodes and the machines they run fired bundles in.

A :class:`Node` owns the shared :class:`~cingal.node_state.NodeState`, the
TSSCP listener and a table of live machines. Each :class:`Machine` runs one
bundle on its own thread and sees the node only through a
:class:`MachineApi`, which is bound to the entity that authorised the fire
and checks that entity's rights on every privileged call.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
from enum import Enum
from typing import Callable

from . import frames, tools
from .bundle import BUILTIN, SCRIPT, Bundle, Datum, Guid
from .channels import (
    DEFAULT_CAPACITY,
    DEFAULT_LISTEN_TIMEOUT,
    ChannelEnd,
    ConnectionManager,
    Connector,
    RawChannel,
    channel_pair,
)
from .errors import (
    ChannelClosed,
    CingalError,
    NameInUse,
    UnknownEntryPoint,
    UnknownResource,
    UnsupportedCodeType,
)
from .node_state import NodeState, Right
from .script import ScriptProgram
from .tsscp import (
    DEFAULT_PORT,
    ClientHandle,
    NodeListener,
    client_machine_request,
    client_resource_connect,
    client_send_fire,
    join_address,
)

log = logging.getLogger(__name__)


class MachineState(str, Enum):
    STARTING = "Starting"
    RUNNING = "Running"
    TERMINATED = "Terminated"


class Machine:
    def __init__(self, node: "Node", machine_id: str, bundle: Bundle, entity: str, run: Callable):
        self.node = node
        self.machine_id = machine_id
        self.bundle = bundle
        self.bundle_guid = bundle.guid
        self.entity = entity
        self.state = MachineState.STARTING
        self.history = [MachineState.STARTING]
        self.exit: str | None = None
        self.default = ChannelEnd("default", node.capacity)
        self.cm = ConnectionManager(node.transport, node.node_id, node.listen_timeout, node.capacity)
        self.resource_names: set[str] = set()
        self._run = run
        self._incoming: queue.Queue = queue.Queue()
        self._accepted: list[ChannelEnd] = []
        self._stopping = threading.Event()
        self._done = threading.Event()
        self._lock = threading.Lock()
        self._machine_server = node.transport.serve(0, lambda c: node.listener.handle_machine(self, c))
        self._resource_server = node.transport.serve(0, lambda c: node.listener.handle_resource(self, c))
        self.machine_port = self._machine_server.port
        self.resource_port = self._resource_server.port
        self.api = MachineApi(self)

    def __repr__(self) -> str:
        return f"<Machine {self.machine_id} {self.state.value} {self.connector}>"

    @property
    def connector(self) -> Connector:
        return Connector(self.node.host, self.machine_port, self.resource_port)

    @property
    def alive(self) -> bool:
        return self.state is not MachineState.TERMINATED

    @property
    def stopping(self) -> bool:
        return self._stopping.is_set()

    def _set_state(self, state: MachineState) -> None:
        with self._lock:
            self.state = state
            self.history.append(state)

    def start(self) -> None:
        threading.Thread(target=self._main, daemon=True, name=f"machine {self.machine_id}").start()

    def _main(self) -> None:
        self._set_state(MachineState.RUNNING)
        try:
            self._run(self.api)
            self.exit = "ok"
        except ChannelClosed as exc:
            self.exit = f"channel closed: {exc}"
        except Exception as exc:  # noqa: BLE001 - bundle code failures end the machine, not the node
            log.info("machine %s failed: %s", self.machine_id, exc)
            self.exit = f"{type(exc).__name__}: {exc}"
        finally:
            self._teardown()
            self._set_state(MachineState.TERMINATED)
            self.node._machine_gone(self)
            self._done.set()

    def _teardown(self) -> None:
        self._machine_server.close()
        self._resource_server.close()
        self.cm.close()
        self.default.close()
        with self._lock:
            accepted, self._accepted = self._accepted, []
        for end in accepted:
            end.close()
        while True:
            try:
                end = self._incoming.get_nowait()
            except queue.Empty:
                break
            if end is not None:
                end.close()
        if self._stopping.is_set():
            # the drain above may have taken the wake-up meant for accept()
            self._incoming.put(None)

    def stop(self) -> None:
        """Ask the machine to end: its ports close and blocked reads fail."""
        self._stopping.set()
        self._incoming.put(None)
        self._teardown()

    def join(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    def offer(self, end: ChannelEnd) -> None:
        if self._stopping.is_set() or not self.alive:
            end.close()
            return
        self._incoming.put(end)

    def accept(self, timeout: float | None = None) -> ChannelEnd:
        try:
            end = self._incoming.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError("no incoming connection") from None
        if end is None:
            self._incoming.put(None)
            raise ChannelClosed("machine is stopping")
        with self._lock:
            self._accepted.append(end)
        return end


class MachineApi:
    """Everything a running bundle may do: use the store and binders, fire
    other bundles, and talk to other machines over channels."""

    def __init__(self, machine: Machine):
        self._machine = machine
        self._node = machine.node

    @property
    def entity(self) -> str:
        return self._machine.entity

    @property
    def machine_id(self) -> str:
        return self._machine.machine_id

    @property
    def bundle(self) -> Bundle:
        return self._machine.bundle

    @property
    def stopping(self) -> bool:
        return self._machine.stopping

    def datum(self, id: str) -> Datum | None:
        return self._machine.bundle.datum(id)

    def _check(self, right: Right) -> None:
        self._node.state.check_capability(self.entity, right)

    # store and binders
    def store_put(self, bundle: Bundle) -> Guid:
        return self._node.state.store_put(self.entity, bundle)

    def store_get(self, guid: Guid) -> Bundle:
        return self._node.state.store_get(self.entity, guid)

    def store_remove(self, guid: Guid) -> None:
        self._node.state.store_remove(self.entity, guid)

    def sbinder_put(self, name: str, guid: Guid, clue: str | None = None) -> None:
        self._node.state.sbinder_put(self.entity, name, guid, clue)

    def sbinder_get(self, name: str) -> frozenset[Guid]:
        return self._node.state.sbinder_get(self.entity, name)

    def sbinder_remove(self, name: str, guid: Guid) -> None:
        self._node.state.sbinder_remove(self.entity, name, guid)

    def pbinder_put(self, service: str, guid: Guid, instances: int) -> None:
        self._node.state.pbinder_put(self.entity, service, guid, instances)

    def pbinder_remove(self, service: str) -> None:
        self._node.state.pbinder_remove(self.entity, service)

    # firing
    def fire_local_by_guid(self, guid: Guid) -> ClientHandle:
        self._check(Right.FIRE_LOCAL)
        bundle = self.store_get(guid)
        return self._node.fire_local(bundle, self.entity)

    def fire_local_bundle(self, bundle: Bundle) -> ClientHandle:
        self._check(Right.FIRE_LOCAL)
        return self._node.fire_local(bundle, self.entity)

    def fire_remote(self, address: str, bundle: Bundle) -> ClientHandle:
        return client_send_fire(self._node.transport, address, bundle)

    # channels
    def get_default_channel(self) -> ChannelEnd:
        return self._machine.default

    def get_abstract_channel(self, name: str) -> ChannelEnd:
        return self._machine.cm.get_abstract_channel(name)

    def set_resource_name(self, name: str) -> None:
        self._node.set_resource_name(self._machine, name)

    def accept(self, timeout: float | None = None) -> ChannelEnd:
        return self._machine.accept(timeout)

    def resource_connect_local(self, resource: str, provider: str = "") -> ClientHandle:
        return self._node.connect_resource(resource, provider)

    def resource_connect_remote(self, host: str, resource: str, provider: str = "") -> ClientHandle:
        return client_resource_connect(self._node.transport, host, resource, provider, self._node.node_id)

    def resource_connect_raw(self, host: str, port: int) -> RawChannel:
        return RawChannel(self._node.transport.connect_raw(host, int(port)))

    def machine_request(self, connector: Connector, frame: frames.Frame) -> frames.Frame:
        self._check(Right.CHANNEL_WIRE)
        return client_machine_request(self._node.transport, connector, frame)

    # camelCase aliases for bundle code written against the original API
    getDefaultChannel = get_default_channel
    getAbstractChannel = get_abstract_channel
    setResourceName = set_resource_name


def fire_local_by_guid(api: MachineApi, guid: Guid) -> ClientHandle:
    return api.fire_local_by_guid(guid)


def fire_local_bundle(api: MachineApi, bundle: Bundle) -> ClientHandle:
    return api.fire_local_bundle(bundle)


def get_default_channel(api: MachineApi) -> ChannelEnd:
    return api.get_default_channel()


def get_abstract_channel(api: MachineApi, name: str) -> ChannelEnd:
    return api.get_abstract_channel(name)


def set_resource_name(api: MachineApi, name: str) -> None:
    api.set_resource_name(name)


def resource_connect_local(api: MachineApi, resource: str, provider: str = "") -> ClientHandle:
    return api.resource_connect_local(resource, provider)


def resource_connect_remote(api: MachineApi, host: str, resource: str, provider: str = "") -> ClientHandle:
    return api.resource_connect_remote(host, resource, provider)


def resource_connect_raw(api: MachineApi, host: str, port: int) -> RawChannel:
    return api.resource_connect_raw(host, port)


class Node:
    """A thin server: listener, state, and the machines it is running."""

    def __init__(
        self,
        node_id: str,
        transport,
        state: NodeState,
        standard_port: int = DEFAULT_PORT,
        listen_timeout: float = DEFAULT_LISTEN_TIMEOUT,
        capacity: int = DEFAULT_CAPACITY,
    ):
        self.node_id = node_id
        self.transport = transport
        self.state = state
        self.standard_port = standard_port
        self.listen_timeout = listen_timeout
        self.capacity = capacity
        self.listener = NodeListener(self)
        self._lock = threading.RLock()
        self._machines: dict[str, Machine] = {}
        self._resource_names: dict[str, str] = {}
        self._ids = itertools.count(1)
        self._server = None

    def __repr__(self) -> str:
        return f"<Node {self.node_id} {self.address}>"

    @property
    def host(self) -> str:
        return self.transport.host

    @property
    def address(self) -> str:
        return join_address(self.host, self.standard_port)

    def start(self) -> "Node":
        self._server = self.transport.serve(self.standard_port, self.listener.handle_standard)
        self.standard_port = self._server.port
        return self

    def shutdown(self, timeout: float = 2.0) -> None:
        if self._server is not None:
            self._server.close()
            self._server = None
        for machine in self.machines():
            machine.stop()
        for machine in self.machines():
            machine.join(timeout)
        self.state.close()

    # -- machines --------------------------------------------------------

    def machines(self) -> list[Machine]:
        with self._lock:
            return list(self._machines.values())

    def machine(self, machine_id: str) -> Machine:
        with self._lock:
            return self._machines[machine_id]

    def machine_at(self, connector: Connector | str) -> Machine | None:
        if isinstance(connector, str):
            connector = Connector.parse(connector)
        with self._lock:
            for m in self._machines.values():
                if m.machine_port == connector.machine_port and m.resource_port == connector.resource_port:
                    return m
        return None

    def terminate(self, machine_id: str, timeout: float = 2.0) -> None:
        machine = self.machine(machine_id)
        machine.stop()
        machine.join(timeout)

    def _entry_point(self, bundle: Bundle) -> Callable:
        code = bundle.code
        if code.code_type == BUILTIN:
            tool = tools.BUILTIN_TOOLS.get(code.entry)
            if tool is None:
                raise UnknownEntryPoint(f"no built-in tool named {code.entry!r}")
            return tool
        if code.code_type == SCRIPT:
            part = code.part(code.entry)
            if part is None:
                raise UnknownEntryPoint(f"entry {code.entry!r} names no code part")
            return ScriptProgram.parse(part.payload).run
        raise UnsupportedCodeType(f"code type {code.code_type!r} cannot be executed here")

    def spawn(self, bundle: Bundle, entity: str) -> Machine:
        """Create a machine for ``bundle`` in the Starting state; call
        :meth:`Machine.start` to run it."""
        run = self._entry_point(bundle)
        with self._lock:
            machine_id = f"{self.node_id}/m{next(self._ids)}"
            machine = Machine(self, machine_id, bundle, entity, run)
            self._machines[machine_id] = machine
        return machine

    def fire(self, bundle: Bundle, entity: str) -> tuple[Machine, ChannelEnd]:
        """Fire ``bundle`` for ``entity``; returns the machine and the
        creator's end of its default channel."""
        from .transport import memory_pipe

        machine = self.spawn(bundle, entity)
        creator = ChannelEnd("default", self.capacity)
        a, b = memory_pipe(self.host, self.host)
        creator.attach(b)
        machine.default.attach(a)
        machine.start()
        return machine, creator

    def fire_local(self, bundle: Bundle, entity: str) -> ClientHandle:
        machine, creator = self.fire(bundle, entity)
        return ClientHandle(creator, machine.connector)

    def _machine_gone(self, machine: Machine) -> None:
        with self._lock:
            for name in list(machine.resource_names):
                if self._resource_names.get(name) == machine.machine_id:
                    del self._resource_names[name]
        self.state.pbinder_machine_gone(machine.machine_id)

    # -- resources -------------------------------------------------------

    def set_resource_name(self, machine: Machine, name: str) -> None:
        if not name:
            raise ValueError("resource names are non-empty")
        with self._lock:
            holder = self._resource_names.get(name)
            if holder is not None and holder != machine.machine_id and self._machines[holder].alive:
                raise NameInUse(f"resource {name!r} is held by {holder}")
            self._resource_names[name] = machine.machine_id
            machine.resource_names.add(name)

    def resolve_resource(self, resource: str, provider: str = "") -> Machine:
        """Find the machine serving ``resource``: a named machine first, then
        the process binder (spawning while below its instance cap)."""
        while True:
            with self._lock:
                holder = self._resource_names.get(resource)
                if holder is not None:
                    return self._machines[holder]
            reservation = self.state.pbinder_reserve(resource)
            if reservation is None:
                raise UnknownResource(f"no resource named {resource!r}")
            if not reservation.spawn:
                with self._lock:
                    machine = self._machines.get(reservation.machine_id)
                if machine is not None and machine.alive:
                    return machine
                continue
            try:
                bundle = self.state.store_fetch(reservation.guid)
                machine = self.spawn(bundle, reservation.owner)
            except CingalError:
                self.state.pbinder_release(reservation)
                raise
            self.state.pbinder_commit(reservation, machine.machine_id)
            machine.start()
            return machine

    def connect_resource(self, resource: str, provider: str = "") -> ClientHandle:
        machine = self.resolve_resource(resource, provider)
        client, server = channel_pair(resource, self.capacity)
        machine.offer(server)
        return ClientHandle(client, machine.connector)
