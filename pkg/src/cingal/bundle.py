"""Bundles: the only unit a node will store or execute.

A bundle is a code section, an ordered list of named datums and, once signed,
an authentication section. Bundles are immutable values; their canonical XML
form is what gets hashed into a :class:`Guid` and what the signature covers
(the CODE element only).
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace
from typing import Union

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from . import xmldoc
from .errors import DuplicateDatumId, InvalidKey, MalformedDocument, MissingAuthSection

SIGNATURE_SCHEME = "Ed25519"

BUILTIN = "builtin"
SCRIPT = "script"


@dataclass(frozen=True, order=True)
class Guid:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != 16:
            raise ValueError("a Guid is exactly 16 bytes")

    @classmethod
    def parse(cls, text: str) -> "Guid":
        text = text.strip()
        if len(text) != 32:
            raise ValueError(f"not a 32 hex character guid: {text!r}")
        try:
            return cls(bytes.fromhex(text))
        except ValueError:
            raise ValueError(f"not a 32 hex character guid: {text!r}") from None

    @property
    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex

    def __repr__(self) -> str:
        return f"Guid({self.hex})"


def compute_guid(content: bytes) -> Guid:
    return Guid(hashlib.md5(content).digest())


@dataclass(frozen=True)
class Fragment:
    """An XML element carried inside a datum (e.g. an embedded ToDoList)."""

    xml: str

    def __post_init__(self):
        node = xmldoc.parse(self.xml)
        object.__setattr__(self, "xml", xmldoc.canonical(node))

    @property
    def tag(self) -> str:
        return xmldoc.parse(self.xml).tag


DatumContent = Union[str, "Bundle", Fragment]


@dataclass(frozen=True)
class Datum:
    id: str
    content: DatumContent

    def __post_init__(self):
        if not self.id:
            raise MalformedDocument("datum id must be non-empty")

    @property
    def text(self) -> str:
        if isinstance(self.content, str):
            return self.content
        if isinstance(self.content, Fragment):
            return self.content.xml
        raise TypeError(f"datum {self.id!r} holds a bundle, not text")


@dataclass(frozen=True)
class CodePart:
    name: str
    payload: str = ""


@dataclass(frozen=True)
class CodeSection:
    entry: str
    code_type: str = SCRIPT
    parts: tuple[CodePart, ...] = ()

    def __post_init__(self):
        if not self.entry:
            raise MalformedDocument("CODE entry must be non-empty")
        object.__setattr__(self, "parts", tuple(self.parts))

    def part(self, name: str) -> CodePart | None:
        for p in self.parts:
            if p.name == name:
                return p
        return None


@dataclass(frozen=True)
class AuthSection:
    entity: str
    signature: bytes


@dataclass(frozen=True)
class Bundle:
    code: CodeSection
    data: tuple[Datum, ...] = ()
    auth: AuthSection | None = None

    def __post_init__(self):
        data = tuple(self.data)
        seen = set()
        for d in data:
            if d.id in seen:
                raise DuplicateDatumId(f"duplicate datum id {d.id!r}")
            seen.add(d.id)
        object.__setattr__(self, "data", data)

    def datum(self, id: str) -> Datum | None:
        for d in self.data:
            if d.id == id:
                return d
        return None

    def with_data(self, data) -> "Bundle":
        return replace(self, data=tuple(data))

    @property
    def guid(self) -> Guid:
        return compute_guid(canonical_encode(self))


def script_bundle(source: str, entry: str = "main", data=()) -> Bundle:
    return Bundle(CodeSection(entry, SCRIPT, (CodePart(entry, source),)), tuple(data))


def builtin_bundle(entry: str, data=()) -> Bundle:
    return Bundle(CodeSection(entry, BUILTIN, (CodePart(entry),)), tuple(data))


# -- canonical form ---------------------------------------------------------


def _render_code(code: CodeSection) -> str:
    parts = [
        xmldoc.element("Class", {"name": p.name}, text=p.payload) for p in code.parts
    ]
    return xmldoc.element(
        "CODE", {"entry": code.entry, "type": code.code_type or None}, parts
    )


def _render_datum(datum: Datum) -> str:
    content = datum.content
    if isinstance(content, Bundle):
        return xmldoc.element("DATUM", {"id": datum.id}, [_render(content)])
    if isinstance(content, Fragment):
        return xmldoc.element("DATUM", {"id": datum.id}, [content.xml])
    return xmldoc.element("DATUM", {"id": datum.id}, text=content)


def _render(bundle: Bundle) -> str:
    children = []
    if bundle.auth is not None:
        children.append(
            xmldoc.element(
                "AUTHENTICATION",
                {
                    "entity": bundle.auth.entity,
                    "signature": base64.b64encode(bundle.auth.signature).decode(),
                },
            )
        )
    children.append(_render_code(bundle.code))
    children.append(
        xmldoc.element("DATA", {}, [_render_datum(d) for d in bundle.data])
    )
    return xmldoc.element("BUNDLE", {}, children)


def canonical_encode(bundle: Bundle) -> bytes:
    return _render(bundle).encode("utf-8")


def code_section_bytes(bundle: Bundle) -> bytes:
    return _render_code(bundle.code).encode("utf-8")


def bundle_to_xml(bundle: Bundle) -> str:
    return _render(bundle)


# -- decoding ----------------------------------------------------------------


def _decode_auth(node: ET.Element) -> AuthSection:
    entity = xmldoc.require(node, "entity")
    try:
        signature = base64.b64decode(xmldoc.require(node, "signature"), validate=True)
    except binascii.Error:
        raise MalformedDocument("AUTHENTICATION signature is not base64") from None
    return AuthSection(entity, signature)


def _decode_code(node: ET.Element) -> CodeSection:
    xmldoc.check_no_stray_text(node)
    parts = []
    for child in node:
        if child.tag != "Class":
            raise MalformedDocument(f"unexpected <{child.tag}> inside CODE")
        if len(child):
            raise MalformedDocument("Class elements carry text only")
        parts.append(CodePart(xmldoc.require(child, "name"), child.text or ""))
    return CodeSection(xmldoc.require(node, "entry"), node.get("type", ""), tuple(parts))


def _decode_datum(node: ET.Element) -> Datum:
    id = node.get("id")
    if not id:
        raise MalformedDocument("DATUM requires a non-empty id")
    children = list(node)
    if not children:
        return Datum(id, node.text or "")
    xmldoc.check_no_stray_text(node)
    if len(children) != 1:
        raise MalformedDocument(f"DATUM {id!r} holds more than one element")
    inner = children[0]
    if inner.tag == "BUNDLE":
        return Datum(id, _decode(inner))
    return Datum(id, Fragment(xmldoc.canonical(inner)))


def _decode(node: ET.Element) -> Bundle:
    if node.tag != "BUNDLE":
        raise MalformedDocument(f"expected <BUNDLE>, found <{node.tag}>")
    xmldoc.check_no_stray_text(node)
    auth = code = None
    data: list[Datum] = []
    seen_data = False
    for child in node:
        if child.tag == "AUTHENTICATION":
            if auth is not None or code is not None:
                raise MalformedDocument("AUTHENTICATION must come first, once")
            auth = _decode_auth(child)
        elif child.tag == "CODE":
            if code is not None:
                raise MalformedDocument("a bundle has exactly one CODE section")
            code = _decode_code(child)
        elif child.tag == "DATA":
            if seen_data:
                raise MalformedDocument("a bundle has at most one DATA section")
            seen_data = True
            xmldoc.check_no_stray_text(child)
            for d in child:
                if d.tag != "DATUM":
                    raise MalformedDocument(f"unexpected <{d.tag}> inside DATA")
                data.append(_decode_datum(d))
        else:
            raise MalformedDocument(f"unexpected <{child.tag}> inside BUNDLE")
    if code is None:
        raise MalformedDocument("bundle has no CODE section")
    return Bundle(code, tuple(data), auth)


def decode(doc: bytes | str) -> Bundle:
    return _decode(xmldoc.parse(doc))


def decode_element(node: ET.Element) -> Bundle:
    return _decode(node)


# -- signatures --------------------------------------------------------------


def generate_keypair() -> tuple[Ed25519PrivateKey, bytes]:
    """Return a fresh signing key and its certificate (raw public key bytes)."""
    key = Ed25519PrivateKey.generate()
    return key, certificate_of(key)


def certificate_of(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )


def entity_id(certificate: bytes) -> str:
    return compute_guid(certificate).hex


def sign_bundle(
    private_key: Ed25519PrivateKey,
    bundle: Bundle,
    entity: str | None = None,
    overwrite: bool = False,
) -> Bundle:
    if not isinstance(private_key, Ed25519PrivateKey):
        raise InvalidKey(f"expected an {SIGNATURE_SCHEME} private key")
    if bundle.auth is not None and not overwrite:
        raise ValueError("bundle is already signed")
    if entity is None:
        entity = entity_id(certificate_of(private_key))
    signature = private_key.sign(code_section_bytes(bundle))
    return replace(bundle, auth=AuthSection(entity, signature))


def _public_key(certificate) -> Ed25519PublicKey:
    if isinstance(certificate, Ed25519PublicKey):
        return certificate
    try:
        return Ed25519PublicKey.from_public_bytes(bytes(certificate))
    except (ValueError, TypeError):
        raise InvalidKey("certificate is not a raw Ed25519 public key") from None


def verify_signature(bundle: Bundle, certificate) -> bool:
    if bundle.auth is None:
        raise MissingAuthSection("bundle carries no AUTHENTICATION section")
    try:
        _public_key(certificate).verify(bundle.auth.signature, code_section_bytes(bundle))
    except (InvalidSignature, InvalidKey):
        return False
    return True


def save_private_key(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def load_private_key(pem: bytes) -> Ed25519PrivateKey:
    try:
        key = serialization.load_pem_private_key(pem, password=None)
    except ValueError as exc:
        raise InvalidKey(str(exc)) from None
    if not isinstance(key, Ed25519PrivateKey):
        raise InvalidKey(f"expected an {SIGNATURE_SCHEME} private key")
    return key
