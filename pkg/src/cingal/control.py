"""To-do lists and task reports: the documents tools are configured with and
answer in."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import xmldoc
from .bundle import Datum, Fragment
from .errors import MalformedDocument

INSTALL = "INSTALL"
FIRE = "FIRE"
WIRE = "WIRE"
TASK_TYPES = (INSTALL, FIRE, WIRE)


def _datums(node) -> dict[str, str]:
    values: dict[str, str] = {}
    xmldoc.check_no_stray_text(node)
    for child in node:
        if child.tag != "datum":
            raise MalformedDocument(f"unexpected <{child.tag}> inside <{node.tag}>")
        id = xmldoc.require(child, "id")
        if id in values:
            raise MalformedDocument(f"duplicate datum {id!r}")
        values[id] = (child.text or "").strip()
    return values


def _render_datums(datums: dict[str, str]) -> list[str]:
    return [xmldoc.element("datum", {"id": k}, text=v) for k, v in datums.items()]


@dataclass(frozen=True)
class Task:
    guid: str
    type: str
    datums: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in TASK_TYPES:
            raise MalformedDocument(f"unknown task type {self.type!r}")

    def to_xml(self) -> str:
        return xmldoc.element(
            "Task", {"guid": self.guid, "type": self.type}, _render_datums(self.datums)
        )


@dataclass(frozen=True)
class ToDoList:
    tasks: tuple[Task, ...] = ()

    def __post_init__(self):
        tasks = tuple(self.tasks)
        guids = [t.guid for t in tasks]
        if len(set(guids)) != len(guids):
            raise MalformedDocument("task guids must be unique within a to-do list")
        object.__setattr__(self, "tasks", tasks)

    def to_xml(self) -> str:
        return xmldoc.element("ToDoList", {}, [t.to_xml() for t in self.tasks])

    def as_datum(self, id: str = "ToDoList") -> Datum:
        return Datum(id, Fragment(self.to_xml()))

    @classmethod
    def parse(cls, doc: bytes | str) -> "ToDoList":
        root = xmldoc.parse(doc, "ToDoList")
        xmldoc.check_no_stray_text(root)
        tasks = []
        for node in root:
            if node.tag != "Task":
                raise MalformedDocument(f"unexpected <{node.tag}> inside ToDoList")
            tasks.append(
                Task(xmldoc.require(node, "guid"), xmldoc.require(node, "type"), _datums(node))
            )
        return cls(tuple(tasks))


@dataclass(frozen=True)
class TaskOutcome:
    guid: str
    success: bool
    datums: dict[str, str] = field(default_factory=dict)

    @classmethod
    def failed(cls, guid: str, error: str, reason: str = "") -> "TaskOutcome":
        datums = {"Error": error}
        if reason:
            datums["Reason"] = reason
        return cls(guid, False, datums)

    def to_xml(self) -> str:
        return xmldoc.element(
            "TaskOutcome",
            {"guid": self.guid, "success": "TRUE" if self.success else "FALSE"},
            _render_datums(self.datums),
        )


@dataclass(frozen=True)
class TaskReport:
    outcomes: tuple[TaskOutcome, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))

    def to_xml(self) -> str:
        return xmldoc.element("TaskReport", {}, [o.to_xml() for o in self.outcomes])

    def outcome(self, guid: str) -> TaskOutcome | None:
        for o in self.outcomes:
            if o.guid == guid:
                return o
        return None

    @property
    def succeeded(self) -> bool:
        return all(o.success for o in self.outcomes)

    @classmethod
    def parse(cls, doc: bytes | str) -> "TaskReport":
        root = xmldoc.parse(doc, "TaskReport")
        xmldoc.check_no_stray_text(root)
        outcomes = []
        for node in root:
            if node.tag != "TaskOutcome":
                raise MalformedDocument(f"unexpected <{node.tag}> inside TaskReport")
            flag = xmldoc.require(node, "success").strip().upper()
            if flag not in ("TRUE", "FALSE"):
                raise MalformedDocument(f"success must be TRUE or FALSE, not {flag!r}")
            outcomes.append(
                TaskOutcome(xmldoc.require(node, "guid"), flag == "TRUE", _datums(node))
            )
        return cls(tuple(outcomes))
