"""Built-in tools: installer, runner, wirer and echo.

A tool is fired like any other bundle, with ``type="builtin"`` and its entry
naming one of the constants below. Installer, runner and wirer read the
``ToDoList`` datum of their own bundle and answer with a ``TaskReport`` on the
default channel; a failing task becomes a ``success="FALSE"`` outcome rather
than an exception.
"""

from __future__ import annotations

import logging
from typing import Callable

from . import frames
from .bundle import Bundle, Fragment
from .channels import Connector
from .control import FIRE, INSTALL, WIRE, Task, TaskOutcome, TaskReport, ToDoList
from .errors import ChannelClosed, CingalError, MalformedDocument

log = logging.getLogger(__name__)

INSTALLER = "cingal.tool.installer"
RUNNER = "cingal.tool.runner"
WIRER = "cingal.tool.wirer"
ECHO = "cingal.tool.echo"

OFFSPRING_TIMEOUT = 30.0

BUILTIN_TOOLS: dict[str, Callable] = {}


def _failure(task: Task, exc: BaseException) -> TaskOutcome:
    code = exc.code if isinstance(exc, CingalError) else 500
    return TaskOutcome.failed(task.guid, str(code), f"{type(exc).__name__}: {exc}")


def read_todo(api) -> ToDoList:
    datum = api.datum("ToDoList")
    if datum is None:
        raise MalformedDocument("tool bundle carries no ToDoList datum")
    if isinstance(datum.content, Fragment):
        return ToDoList.parse(datum.content.xml)
    return ToDoList.parse(datum.text)


def _tool(name: str, body: Callable):
    def run(api) -> TaskReport:
        report = body(api, read_todo(api))
        api.get_default_channel().write(report.to_xml())
        return report

    run.__name__ = body.__name__
    BUILTIN_TOOLS[name] = run
    return body


def run_builtin_installer(api, todo: ToDoList) -> TaskReport:
    outcomes = []
    for task in todo.tasks:
        if task.type != INSTALL:
            outcomes.append(TaskOutcome.failed(task.guid, "400", f"installer cannot run {task.type} tasks"))
            continue
        ref = task.datums.get("PayloadRef", "")
        datum = api.datum(ref) if ref else None
        if datum is None or not isinstance(datum.content, Bundle):
            outcomes.append(TaskOutcome.failed(task.guid, "403", f"no payload bundle in datum {ref!r}"))
            continue
        try:
            guid = api.store_put(datum.content)
        except CingalError as exc:
            outcomes.append(_failure(task, exc))
            continue
        outcomes.append(TaskOutcome(task.guid, True, {"StoreGuid": guid.hex}))
    return TaskReport(tuple(outcomes))


def run_builtin_runner(api, todo: ToDoList) -> TaskReport:
    from .bundle import Guid

    outcomes = []
    for task in todo.tasks:
        if task.type != FIRE:
            outcomes.append(TaskOutcome.failed(task.guid, "400", f"runner cannot run {task.type} tasks"))
            continue
        try:
            guid = Guid.parse(task.datums.get("StoreGuid", ""))
        except ValueError as exc:
            outcomes.append(TaskOutcome.failed(task.guid, "400", str(exc)))
            continue
        try:
            handle = api.fire_local_by_guid(guid)
        except CingalError as exc:
            outcomes.append(_failure(task, exc))
            continue
        outcomes.append(TaskOutcome(task.guid, True, {"Connector": str(handle.connector)}))
    return TaskReport(tuple(outcomes))


def _wire_primary(api, task: Task) -> TaskOutcome:
    d = task.datums
    primary = Connector.parse(d["PrimaryConnector"])
    secondary = Connector.parse(d["SecondaryConnector"])
    name = d["PrimaryAbstractChannel"]
    reply = api.machine_request(primary, frames.request(frames.CHANNEL_LISTEN, name=name))
    port = reply.get("port")
    # the offspring reuses this bundle's signed code with a fresh to-do list
    offspring_task = Task(task.guid, WIRE, {**d, "ListenHost": primary.ip, "ListenPort": port})
    offspring = api.bundle.with_data([ToDoList((offspring_task,)).as_datum()])
    try:
        handle = api.fire_remote(d.get("SecondaryNode") or secondary.ip, offspring)
        try:
            report = TaskReport.parse(handle.channel.read(OFFSPRING_TIMEOUT))
        finally:
            handle.channel.close()
        outcome = report.outcome(task.guid)
        if outcome is None:
            raise MalformedDocument("offspring wirer reported no outcome for the task")
    except (CingalError, TimeoutError) as exc:
        outcome = _failure(task, exc)
    if not outcome.success:
        try:
            api.machine_request(primary, frames.request(frames.CHANNEL_CANCEL, name=name))
        except CingalError:
            log.warning("could not cancel listener for %s at %s", name, primary)
    return TaskOutcome(task.guid, outcome.success, {**outcome.datums, "ListenPort": port})


def _wire_secondary(api, task: Task) -> TaskOutcome:
    d = task.datums
    secondary = Connector.parse(d["SecondaryConnector"])
    reply = api.machine_request(
        secondary,
        frames.request(
            frames.CHANNEL_CONNECT,
            name=d["SecondaryAbstractChannel"],
            host=d["ListenHost"],
            port=d["ListenPort"],
        ),
    )
    if reply.get("ok") != "TRUE":
        return TaskOutcome.failed(task.guid, "500", "secondary could not reach the primary listener")
    return TaskOutcome(task.guid, True, {})


_WIRE_DATUMS = ("PrimaryConnector", "SecondaryConnector", "PrimaryAbstractChannel", "SecondaryAbstractChannel")


def run_builtin_wirer(api, todo: ToDoList) -> TaskReport:
    outcomes = []
    for task in todo.tasks:
        if task.type != WIRE:
            outcomes.append(TaskOutcome.failed(task.guid, "400", f"wirer cannot run {task.type} tasks"))
            continue
        missing = [k for k in _WIRE_DATUMS if not task.datums.get(k)]
        if missing:
            outcomes.append(TaskOutcome.failed(task.guid, "400", f"missing datums: {', '.join(missing)}"))
            continue
        try:
            if "ListenPort" in task.datums:
                outcomes.append(_wire_secondary(api, task))
            else:
                outcomes.append(_wire_primary(api, task))
        except (CingalError, ValueError, TimeoutError) as exc:
            outcomes.append(_failure(task, exc))
    return TaskReport(tuple(outcomes))


def run_builtin_echo(api) -> None:
    channel = api.get_default_channel()
    greeting = api.datum("Message")
    channel.write(greeting.text if greeting is not None else "HelloWorld")
    while True:
        try:
            msg = channel.read()
        except ChannelClosed:
            return
        channel.write(msg)


_tool(INSTALLER, run_builtin_installer)
_tool(RUNNER, run_builtin_runner)
_tool(WIRER, run_builtin_wirer)
BUILTIN_TOOLS[ECHO] = run_builtin_echo
