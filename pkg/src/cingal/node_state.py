"""Per-node shared state: store, store binder, process binder and the Valid
Entity Repository (VER) with its capability rights.

Every public operation takes the calling entity first and checks its rights
before touching anything, so a denied call never changes state. All segments
share one lock; operations are atomic with respect to each other.
"""

from __future__ import annotations

import base64
import fcntl
import itertools
import os
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import xmldoc
from .bundle import (
    SIGNATURE_SCHEME,
    Bundle,
    Guid,
    canonical_encode,
    compute_guid,
    decode,
    entity_id,
    verify_signature,
)
from .errors import (
    BadSignature,
    CorruptState,
    InvalidInstances,
    MalformedDocument,
    PermissionDenied,
    UnknownEntity,
    UnknownKey,
    UnknownService,
    Unsigned,
)


class Right(str, Enum):
    STORE_GET = "STORE_GET"
    STORE_PUT = "STORE_PUT"
    STORE_REMOVE = "STORE_REMOVE"
    SBIND_GET = "SBIND_GET"
    SBIND_PUT = "SBIND_PUT"
    SBIND_REMOVE = "SBIND_REMOVE"
    PBIND_PUT = "PBIND_PUT"
    PBIND_REMOVE = "PBIND_REMOVE"
    VER_PUT = "VER_PUT"
    VER_REMOVE = "VER_REMOVE"
    FIRE_LOCAL = "FIRE_LOCAL"
    CHANNEL_WIRE = "CHANNEL_WIRE"


ALL_RIGHTS = frozenset(Right)


def parse_rights(text: str) -> frozenset[Right]:
    """Parse ``"ALL"`` or a comma/space separated list of right names."""
    names = [n for n in text.replace(",", " ").split() if n]
    if names == ["ALL"]:
        return ALL_RIGHTS
    try:
        return frozenset(Right(n.upper()) for n in names)
    except ValueError as exc:
        raise ValueError(f"unknown right: {exc}") from None


def render_rights(rights) -> str:
    return " ".join(sorted(r.value for r in rights))


@dataclass(frozen=True)
class VerEntry:
    entity: str
    certificate: bytes
    cert_type: str
    subject: str
    rights: frozenset[Right]


@dataclass(frozen=True)
class Binding:
    name: str
    guid: Guid
    clue: str | None = None


@dataclass
class Service:
    guid: Guid
    instances: int
    owner: str
    live: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Reservation:
    """Outcome of a process-binder lookup: spawn a new instance or attach."""

    service: str
    spawn: bool
    guid: Guid | None = None
    owner: str | None = None
    machine_id: str | None = None
    token: str | None = None


class NodeState:
    def __init__(self, data_dir: str | os.PathLike | None = None, owner: VerEntry | None = None):
        self._lock = threading.RLock()
        self._pbinder_changed = threading.Condition(self._lock)
        self._store: dict[Guid, Bundle] = {}
        self._sbinder: dict[tuple[str, Guid], Binding] = {}
        self._pbinder: dict[str, Service] = {}
        self._ver: dict[str, VerEntry] = {}
        self._round_robin: dict[str, int] = {}
        self._tokens = itertools.count(1)
        self._lock_file = None
        self.data_dir = Path(data_dir) if data_dir is not None else None
        if self.data_dir is not None:
            self._open_data_dir()
            self._load()
        if owner is not None and owner.entity not in self._ver:
            # bootstrap: the configured owner is installed without a capability check
            self._ver[owner.entity] = owner
            self._save_ver()
        self.owner = owner.entity if owner is not None else None

    @classmethod
    def with_owner(cls, certificate: bytes, data_dir=None, subject: str = "node owner"):
        entry = VerEntry(entity_id(certificate), certificate, SIGNATURE_SCHEME, subject, ALL_RIGHTS)
        return cls(data_dir, entry)

    def close(self) -> None:
        if self._lock_file is not None:
            fcntl.flock(self._lock_file, fcntl.LOCK_UN)
            self._lock_file.close()
            self._lock_file = None

    # -- capabilities ----------------------------------------------------

    def check_capability(self, entity: str, right: Right) -> None:
        with self._lock:
            entry = self._ver.get(entity)
            if entry is None:
                raise UnknownEntity(f"entity {entity!r} is not in the VER")
            if right not in entry.rights:
                raise PermissionDenied(f"entity {entity} lacks {right.value}")

    # -- store -----------------------------------------------------------

    def store_put(self, caller: str, bundle: Bundle) -> Guid:
        with self._lock:
            self.check_capability(caller, Right.STORE_PUT)
            content = canonical_encode(bundle)
            key = compute_guid(content)
            if key not in self._store:
                self._store[key] = bundle
                self._write(Path("store") / f"{key.hex}.xml", content)
            return key

    def store_get(self, caller: str, key: Guid) -> Bundle:
        with self._lock:
            self.check_capability(caller, Right.STORE_GET)
            try:
                return self._store[key]
            except KeyError:
                raise UnknownKey(f"no bundle stored under {key}") from None

    def store_remove(self, caller: str, key: Guid) -> None:
        with self._lock:
            self.check_capability(caller, Right.STORE_REMOVE)
            if key not in self._store:
                raise UnknownKey(f"no bundle stored under {key}")
            del self._store[key]
            self._unlink(Path("store") / f"{key.hex}.xml")

    def store_fetch(self, key: Guid) -> Bundle:
        """Infrastructure-only lookup (process binder spawns); no entity involved."""
        with self._lock:
            try:
                return self._store[key]
            except KeyError:
                raise UnknownKey(f"no bundle stored under {key}") from None

    def store_keys(self) -> list[Guid]:
        with self._lock:
            return sorted(self._store)

    # -- store binder ----------------------------------------------------

    def sbinder_put(self, caller: str, name: str, guid: Guid, clue: str | None = None) -> None:
        with self._lock:
            self.check_capability(caller, Right.SBIND_PUT)
            self._sbinder[(name, guid)] = Binding(name, guid, clue)
            self._save_sbinder()

    def sbinder_get(self, caller: str, name: str) -> frozenset[Guid]:
        with self._lock:
            self.check_capability(caller, Right.SBIND_GET)
            return frozenset(g for (n, g) in self._sbinder if n == name)

    def sbinder_remove(self, caller: str, name: str, guid: Guid) -> None:
        with self._lock:
            self.check_capability(caller, Right.SBIND_REMOVE)
            if self._sbinder.pop((name, guid), None) is not None:
                self._save_sbinder()

    def sbinder_items(self) -> list[Binding]:
        with self._lock:
            return sorted(self._sbinder.values(), key=lambda b: (b.name, b.guid))

    # -- process binder --------------------------------------------------

    def pbinder_put(self, caller: str, service: str, guid: Guid, instances: int) -> None:
        with self._lock:
            self.check_capability(caller, Right.PBIND_PUT)
            if instances < 1:
                raise InvalidInstances(f"instances must be >= 1, got {instances}")
            self._pbinder[service] = Service(guid, instances, caller)
            self._round_robin.pop(service, None)
            self._save_pbinder()
            self._pbinder_changed.notify_all()

    def pbinder_remove(self, caller: str, service: str) -> None:
        with self._lock:
            self.check_capability(caller, Right.PBIND_REMOVE)
            if service not in self._pbinder:
                raise UnknownService(f"no service named {service!r}")
            del self._pbinder[service]
            self._save_pbinder()
            self._pbinder_changed.notify_all()

    def pbinder_lookup(self, service: str) -> Service | None:
        with self._lock:
            entry = self._pbinder.get(service)
            if entry is None:
                return None
            return Service(entry.guid, entry.instances, entry.owner, list(entry.live))

    def pbinder_reserve(self, service: str, timeout: float | None = 30.0) -> Reservation | None:
        """Decide between spawning a new instance and attaching to a live one.

        A spawn holds a slot (counted against ``instances``) until
        :meth:`pbinder_commit` or :meth:`pbinder_release`. Attach waits while
        every slot is still being spawned. Returns None for unknown services.
        """
        with self._lock:
            while True:
                entry = self._pbinder.get(service)
                if entry is None:
                    return None
                if len(entry.live) < entry.instances:
                    token = f"pending:{next(self._tokens)}"
                    entry.live.append(token)
                    return Reservation(service, True, entry.guid, entry.owner, token=token)
                ready = [m for m in entry.live if not m.startswith("pending:")]
                if ready:
                    turn = self._round_robin.get(service, 0)
                    self._round_robin[service] = turn + 1
                    return Reservation(service, False, machine_id=ready[turn % len(ready)])
                if not self._pbinder_changed.wait(timeout):
                    raise TimeoutError(f"no instance of {service!r} became ready")

    def pbinder_commit(self, reservation: Reservation, machine_id: str) -> None:
        with self._lock:
            entry = self._pbinder.get(reservation.service)
            if entry is not None and reservation.token in entry.live:
                entry.live[entry.live.index(reservation.token)] = machine_id
            self._pbinder_changed.notify_all()

    def pbinder_release(self, reservation: Reservation) -> None:
        with self._lock:
            entry = self._pbinder.get(reservation.service)
            if entry is not None and reservation.token in entry.live:
                entry.live.remove(reservation.token)
            self._pbinder_changed.notify_all()

    def pbinder_machine_gone(self, machine_id: str) -> None:
        with self._lock:
            for entry in self._pbinder.values():
                if machine_id in entry.live:
                    entry.live.remove(machine_id)
            self._pbinder_changed.notify_all()

    def pbinder_items(self) -> dict[str, Service]:
        with self._lock:
            return {
                k: Service(v.guid, v.instances, v.owner, list(v.live))
                for k, v in sorted(self._pbinder.items())
            }

    # -- VER -------------------------------------------------------------

    def ver_put(
        self, caller: str, certificate: bytes, cert_type: str, subject: str, rights
    ) -> str:
        with self._lock:
            self.check_capability(caller, Right.VER_PUT)
            entity = entity_id(certificate)
            self._ver[entity] = VerEntry(entity, bytes(certificate), cert_type, subject, frozenset(Right(r) for r in rights))
            self._save_ver()
            return entity

    def ver_remove(self, caller: str, entity: str) -> None:
        with self._lock:
            self.check_capability(caller, Right.VER_REMOVE)
            if entity not in self._ver:
                raise UnknownEntity(f"entity {entity!r} is not in the VER")
            del self._ver[entity]
            self._save_ver()

    def ver_verify(self, bundle: Bundle) -> str:
        if bundle.auth is None:
            raise Unsigned("bundle is not signed")
        with self._lock:
            entry = self._ver.get(bundle.auth.entity)
        if entry is None:
            raise UnknownEntity(f"entity {bundle.auth.entity!r} is not in the VER")
        if not verify_signature(bundle, entry.certificate):
            raise BadSignature(f"signature does not verify for entity {entry.entity}")
        return entry.entity

    def ver_entries(self) -> list[VerEntry]:
        with self._lock:
            return sorted(self._ver.values(), key=lambda e: e.entity)

    def ver_entry(self, entity: str) -> VerEntry | None:
        with self._lock:
            return self._ver.get(entity)

    # -- persistence -----------------------------------------------------

    def _open_data_dir(self) -> None:
        self.data_dir.mkdir(parents=True, exist_ok=True)
        (self.data_dir / "store").mkdir(exist_ok=True)
        handle = open(self.data_dir / ".lock", "a+")
        try:
            fcntl.flock(handle, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            handle.close()
            raise CorruptState(f"data directory {self.data_dir} is in use by another node") from None
        self._lock_file = handle

    def _write(self, relative: Path, content: bytes) -> None:
        if self.data_dir is None:
            return
        target = self.data_dir / relative
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_bytes(content)
        os.replace(tmp, target)

    def _unlink(self, relative: Path) -> None:
        if self.data_dir is not None:
            (self.data_dir / relative).unlink(missing_ok=True)

    def _save_sbinder(self) -> None:
        rows = [
            xmldoc.element("binding", {"name": b.name, "guid": b.guid.hex, "clue": b.clue})
            for b in self.sbinder_items()
        ]
        self._write(Path("sbinder.xml"), xmldoc.element("SBINDER", {}, rows).encode())

    def _save_pbinder(self) -> None:
        rows = [
            xmldoc.element(
                "service",
                {"name": name, "guid": s.guid.hex, "instances": str(s.instances), "owner": s.owner},
            )
            for name, s in sorted(self._pbinder.items())
        ]
        self._write(Path("pbinder.xml"), xmldoc.element("PBINDER", {}, rows).encode())

    def _save_ver(self) -> None:
        rows = [
            xmldoc.element(
                "entity",
                {
                    "id": e.entity,
                    "certificate": base64.b64encode(e.certificate).decode(),
                    "type": e.cert_type,
                    "subject": e.subject,
                    "rights": render_rights(e.rights),
                },
            )
            for e in sorted(self._ver.values(), key=lambda e: e.entity)
        ]
        self._write(Path("ver.xml"), xmldoc.element("VER", {}, rows).encode())

    def _load(self) -> None:
        try:
            for path in sorted((self.data_dir / "store").glob("*.xml")):
                content = path.read_bytes()
                key = compute_guid(content)
                if key.hex != path.stem:
                    raise CorruptState(f"{path} does not hash to its name")
                self._store[key] = decode(content)
            doc = self._read("sbinder.xml", "SBINDER")
            for row in doc if doc is not None else ():
                b = Binding(row.get("name"), Guid.parse(row.get("guid")), row.get("clue"))
                self._sbinder[(b.name, b.guid)] = b
            doc = self._read("pbinder.xml", "PBINDER")
            for row in doc if doc is not None else ():
                self._pbinder[row.get("name")] = Service(
                    Guid.parse(row.get("guid")), int(row.get("instances")), row.get("owner")
                )
            doc = self._read("ver.xml", "VER")
            for row in doc if doc is not None else ():
                entry = VerEntry(
                    row.get("id"),
                    base64.b64decode(row.get("certificate")),
                    row.get("type"),
                    row.get("subject"),
                    parse_rights(row.get("rights", "")),
                )
                self._ver[entry.entity] = entry
        except CorruptState:
            self.close()
            raise
        except (MalformedDocument, ValueError, TypeError) as exc:
            self.close()
            raise CorruptState(f"cannot load {self.data_dir}: {exc}") from None

    def _read(self, name: str, root: str):
        path = self.data_dir / name
        if not path.exists():
            return None
        return xmldoc.parse(path.read_bytes(), root)
