"""Canonical XML writing and tolerant-but-strict parsing.

Every document a node emits (bundles, frames, control documents, persisted
segments) goes through :func:`element` so the byte form is fixed: attributes
sorted by name, no indentation, LF only, UTF-8.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from typing import Iterable, Mapping

from .errors import MalformedDocument

_TEXT_ESCAPES = {"&": "&amp;", "<": "&lt;", ">": "&gt;", "\r": "&#13;"}
_ATTR_ESCAPES = {
    **_TEXT_ESCAPES,
    '"': "&quot;",
    "\n": "&#10;",
    "\t": "&#9;",
}


def escape_text(value: str) -> str:
    return "".join(_TEXT_ESCAPES.get(ch, ch) for ch in value)


def escape_attr(value: str) -> str:
    return "".join(_ATTR_ESCAPES.get(ch, ch) for ch in value)


def element(
    tag: str,
    attrs: Mapping[str, str | None] | None = None,
    children: Iterable[str] = (),
    text: str | None = None,
) -> str:
    """Render one element; ``None``-valued attributes are omitted."""
    parts = [f"<{tag}"]
    for name in sorted(attrs or {}):
        value = attrs[name]
        if value is not None:
            parts.append(f' {name}="{escape_attr(value)}"')
    body = "".join(children)
    if text:
        body = escape_text(text) + body
    if not body:
        parts.append("/>")
        return "".join(parts)
    parts.append(f">{body}</{tag}>")
    return "".join(parts)


def parse(doc: bytes | str, root: str | None = None) -> ET.Element:
    try:
        node = ET.fromstring(doc)
    except ET.ParseError as exc:
        raise MalformedDocument(f"not well-formed: {exc}") from None
    if root is not None and node.tag != root:
        raise MalformedDocument(f"expected <{root}>, found <{node.tag}>")
    return node


def require(node: ET.Element, attr: str) -> str:
    value = node.get(attr)
    if value is None:
        raise MalformedDocument(f"<{node.tag}> is missing attribute {attr!r}")
    return value


def is_blank(text: str | None) -> bool:
    return text is None or not text.strip()


def check_no_stray_text(node: ET.Element) -> None:
    """Reject non-whitespace text between child elements of ``node``."""
    if not is_blank(node.text):
        raise MalformedDocument(f"unexpected text inside <{node.tag}>")
    for child in node:
        if not is_blank(child.tail):
            raise MalformedDocument(f"unexpected text after <{child.tag}>")


def canonical(node: ET.Element) -> str:
    """Re-render a parsed element canonically.

    Leaf text is kept verbatim; whitespace-only text between child elements is
    dropped.
    """
    children = list(node)
    if not children:
        return element(node.tag, dict(node.attrib), text=node.text or "")
    parts = []
    for child in children:
        parts.append(canonical(child))
        if not is_blank(child.tail):
            parts.append(escape_text(child.tail))
    lead = "" if is_blank(node.text) else node.text
    return element(node.tag, dict(node.attrib), parts, text=lead)
