"""A small deterministic instruction language for bundle code.

One instruction per line, operands separated by whitespace (shell-style
quoting allowed, ``#`` starts a comment). ``$name`` operands are registers;
anything else is a literal. docs/scripts.md lists every instruction.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass

from .bundle import Bundle, Guid, bundle_to_xml
from .errors import ScriptError

ScriptError.code = 400

# opcode -> (min operands, max operands)
_ARITY = {
    "set": (2, 2),
    "concat": (2, None),
    "datum": (2, 2),
    "write_default": (1, 1),
    "read_default": (1, 1),
    "channel": (1, 1),
    "write": (2, 2),
    "read": (2, 2),
    "resource": (1, 1),
    "accept": (1, 1),
    "connect": (2, 3),
    "connect_remote": (3, 4),
    "connect_raw": (3, 3),
    "send": (2, 2),
    "recv": (2, 2),
    "close": (1, 1),
    "store_put": (2, 2),
    "store_get": (2, 2),
    "store_remove": (1, 1),
    "sbind_put": (2, 3),
    "sbind_get": (2, 2),
    "sbind_remove": (2, 2),
    "pbind_put": (3, 3),
    "pbind_remove": (1, 1),
    "fire": (2, 2),
    "fire_datum": (2, 2),
    "label": (1, 1),
    "goto": (1, 1),
    "if_eq": (3, 3),
    "halt": (0, 0),
}

# operands that must name a register to write into, by opcode
_TARGETS = {
    "set": 0, "concat": 0, "datum": 0, "read_default": 0, "read": 1, "accept": 0,
    "connect": 0, "connect_remote": 0, "connect_raw": 0, "recv": 1, "store_put": 0,
    "store_get": 0, "sbind_get": 0, "fire": 0, "fire_datum": 0,
}


@dataclass(frozen=True)
class Instruction:
    op: str
    args: tuple[str, ...]
    line: int


def _text(value) -> str:
    if isinstance(value, str):
        return value
    raise ScriptError(f"expected a string, found a {type(value).__name__}")


class ScriptProgram:
    def __init__(self, instructions: list[Instruction]):
        self.instructions = tuple(instructions)
        self.labels: dict[str, int] = {}
        for index, ins in enumerate(self.instructions):
            if ins.op == "label":
                if ins.args[0] in self.labels:
                    raise ScriptError(f"line {ins.line}: label {ins.args[0]!r} defined twice")
                self.labels[ins.args[0]] = index
        for ins in self.instructions:
            if ins.op in ("goto", "if_eq") and ins.args[-1] not in self.labels:
                raise ScriptError(f"line {ins.line}: unknown label {ins.args[-1]!r}")

    @classmethod
    def parse(cls, source: str) -> "ScriptProgram":
        instructions = []
        for number, raw in enumerate(source.splitlines(), start=1):
            try:
                tokens = shlex.split(raw, comments=True)
            except ValueError as exc:
                raise ScriptError(f"line {number}: {exc}") from None
            if not tokens:
                continue
            op, args = tokens[0], tuple(tokens[1:])
            if op not in _ARITY:
                raise ScriptError(f"line {number}: unknown instruction {op!r}")
            low, high = _ARITY[op]
            if len(args) < low or (high is not None and len(args) > high):
                raise ScriptError(f"line {number}: wrong number of operands for {op}")
            target = _TARGETS.get(op)
            if target is not None and not args[target].startswith("$"):
                raise ScriptError(f"line {number}: {op} writes to a register, got {args[target]!r}")
            instructions.append(Instruction(op, args, number))
        return cls(instructions)

    def run(self, api, max_steps: int | None = None) -> dict:
        """Execute against ``api``; returns the final registers."""
        regs: dict[str, object] = {}

        def val(token: str):
            if token.startswith("$"):
                if token not in regs:
                    raise ScriptError(f"register {token} is unset")
                return regs[token]
            return token

        def text(token: str) -> str:
            return _text(val(token))

        def handle_channel(token: str):
            h = val(token)
            return getattr(h, "channel", h)

        pc = steps = 0
        while pc < len(self.instructions):
            if api.stopping:
                return regs
            steps += 1
            if max_steps is not None and steps > max_steps:
                raise ScriptError("step limit exceeded")
            ins = self.instructions[pc]
            op, a = ins.op, ins.args
            pc += 1
            try:
                if op == "set":
                    regs[a[0]] = val(a[1])
                elif op == "concat":
                    regs[a[0]] = "".join(text(t) for t in a[1:])
                elif op == "datum":
                    d = api.datum(text(a[1]))
                    if d is None:
                        raise ScriptError(f"no datum {a[1]!r}")
                    regs[a[0]] = bundle_to_xml(d.content) if isinstance(d.content, Bundle) else d.text
                elif op == "write_default":
                    api.get_default_channel().write(text(a[0]))
                elif op == "read_default":
                    regs[a[0]] = api.get_default_channel().read_str()
                elif op == "channel":
                    api.get_abstract_channel(text(a[0]))
                elif op == "write":
                    api.get_abstract_channel(text(a[0])).write(text(a[1]))
                elif op == "read":
                    regs[a[1]] = api.get_abstract_channel(text(a[0])).read_str()
                elif op == "resource":
                    api.set_resource_name(text(a[0]))
                elif op == "accept":
                    regs[a[0]] = api.accept()
                elif op == "connect":
                    regs[a[0]] = api.resource_connect_local(text(a[1]), text(a[2]) if len(a) > 2 else "")
                elif op == "connect_remote":
                    regs[a[0]] = api.resource_connect_remote(
                        text(a[1]), text(a[2]), text(a[3]) if len(a) > 3 else ""
                    )
                elif op == "connect_raw":
                    regs[a[0]] = api.resource_connect_raw(text(a[1]), int(text(a[2])))
                elif op == "send":
                    handle_channel(a[0]).write(text(a[1]))
                elif op == "recv":
                    regs[a[1]] = handle_channel(a[0]).read_str()
                elif op == "close":
                    handle_channel(a[0]).close()
                elif op == "store_put":
                    d = api.datum(text(a[1]))
                    if d is None or not isinstance(d.content, Bundle):
                        raise ScriptError(f"datum {a[1]!r} does not hold a bundle")
                    regs[a[0]] = api.store_put(d.content).hex
                elif op == "store_get":
                    regs[a[0]] = bundle_to_xml(api.store_get(Guid.parse(text(a[1]))))
                elif op == "store_remove":
                    api.store_remove(Guid.parse(text(a[0])))
                elif op == "sbind_put":
                    api.sbinder_put(text(a[0]), Guid.parse(text(a[1])), text(a[2]) if len(a) > 2 else None)
                elif op == "sbind_get":
                    regs[a[0]] = " ".join(sorted(g.hex for g in api.sbinder_get(text(a[1]))))
                elif op == "sbind_remove":
                    api.sbinder_remove(text(a[0]), Guid.parse(text(a[1])))
                elif op == "pbind_put":
                    api.pbinder_put(text(a[0]), Guid.parse(text(a[1])), int(text(a[2])))
                elif op == "pbind_remove":
                    api.pbinder_remove(text(a[0]))
                elif op == "fire":
                    regs[a[0]] = api.fire_local_by_guid(Guid.parse(text(a[1])))
                elif op == "fire_datum":
                    d = api.datum(text(a[1]))
                    if d is None or not isinstance(d.content, Bundle):
                        raise ScriptError(f"datum {a[1]!r} does not hold a bundle")
                    regs[a[0]] = api.fire_local_bundle(d.content)
                elif op == "goto":
                    pc = self.labels[a[0]]
                elif op == "if_eq":
                    if val(a[0]) == val(a[1]):
                        pc = self.labels[a[2]]
                elif op == "halt":
                    return regs
            except ValueError as exc:
                raise ScriptError(f"line {ins.line}: {exc}") from None
        return regs
