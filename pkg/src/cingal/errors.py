"""Exception hierarchy shared by every layer of a node.

Each error carries a stable numeric ``code`` so it can cross the wire in an
ERROR frame and be rebuilt as the same type on the client side.
"""

from __future__ import annotations


class CingalError(Exception):
    code = 500


class MalformedDocument(CingalError):
    code = 400


class DuplicateDatumId(MalformedDocument):
    pass


class UnresolvedReference(MalformedDocument):
    pass


class InvalidKey(CingalError):
    code = 400


class InvalidInstances(CingalError):
    code = 400


class UnknownEntryPoint(CingalError):
    code = 400


class UnsupportedCodeType(CingalError):
    code = 400


class ScriptError(CingalError):
    pass


class Unsigned(CingalError):
    code = 401


class MissingAuthSection(Unsigned):
    pass


class BadSignature(CingalError):
    code = 401


class UnknownEntity(CingalError):
    code = 402


class PermissionDenied(CingalError):
    code = 403


class UnknownKey(CingalError):
    code = 404


class UnknownService(CingalError):
    code = 404


class UnknownResource(CingalError):
    code = 404


class MissingBundle(CingalError):
    code = 404


class AlreadyBound(CingalError):
    code = 409


class NameInUse(CingalError):
    code = 409


class NotBound(CingalError):
    code = 409


class ChannelClosed(CingalError):
    pass


class WireFailed(CingalError):
    pass


class PhaseFailed(CingalError):
    def __init__(self, phase: str, message: str = "", report=None):
        super().__init__(f"{phase} phase failed" + (f": {message}" if message else ""))
        self.phase = phase
        self.report = report


class CorruptState(CingalError):
    pass


class TransportError(CingalError):
    code = 503


class HostUnreachable(TransportError):
    pass


class ConnectionRefused(TransportError):
    pass


class PortInUse(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class RemoteError(CingalError):
    """An ERROR reply whose name has no local exception class."""

    def __init__(self, code: int, name: str, message: str):
        super().__init__(f"{name} ({code}): {message}")
        self.code = code
        self.name = name


def _registry() -> dict[str, type[CingalError]]:
    found: dict[str, type[CingalError]] = {}
    stack = [CingalError]
    while stack:
        cls = stack.pop()
        found[cls.__name__] = cls
        stack.extend(cls.__subclasses__())
    return found


def from_wire(code: int, name: str, message: str) -> CingalError:
    cls = _registry().get(name)
    if cls is None or cls in (PhaseFailed, RemoteError):
        return RemoteError(code, name, message)
    exc = cls(message)
    exc.code = code
    return exc
