"""Deterministic tag-length-value codec for all wire structures.

Every structure is a frozen dataclass registered here with a schema id and an
ordered field list.  The encoding of a structure is one outer TLV whose tag is
the schema id and whose value is the concatenation of its field TLVs in schema
order, field tags numbered 1..n.  All integers are fixed-width big-endian,
strings are UTF-8, nested structures embed their own complete encoding.  There
are no defaults and no skipped fields, so equal values encode to identical
bytes and decode(encode(x)) == x.

Field header layout: tag (u8) then length (u32, big-endian), then the value.
"""

from __future__ import annotations

import struct
from enum import IntEnum
from typing import Any, Optional

from .errors import (
    FieldTooLarge,
    MalformedValue,
    SchemaMismatch,
    TrailingGarbage,
    Truncated,
    UnknownTag,
)

_HEADER = struct.Struct(">BI")
_MAX_FIELD = 0xFFFFFFFF


class SchemaId(IntEnum):
    AS_REQUEST = 0x01
    AS_REPLY = 0x02
    TGS_REQUEST = 0x03
    TGS_REPLY = 0x04
    AP_REQUEST = 0x05
    AP_REPLY = 0x06
    TICKET_SEALED = 0x07
    AUTHENTICATOR = 0x08
    CONTEXT_TOKEN = 0x09
    WRAP_TOKEN = 0x0A
    ENC_PART_AS = 0x0B
    ENC_PART_TGS = 0x0C
    ENC_PART_AP = 0x0D

    PRINCIPAL = 0x10
    CERTIFICATE = 0x11
    VALIDITY = 0x12
    TICKET_BODY = 0x13
    SEALED_BOX = 0x14
    SYMMETRIC_KEY = 0x15
    KEY_PAIR = 0x16
    CONTEXT_AUTHENTICATOR = 0x17
    WRAP_BODY = 0x18
    AP_REQ_BODY = 0x19
    TGS_REQ_BODY = 0x1A
    TGS_AUTHENTICATOR = 0x1B
    AS_REQ_BODY = 0x1C

    PRINCIPAL_RECORD = 0x20
    CREDENTIAL_CACHE = 0x21
    CRED_ENTRY = 0x22
    SERVICE_KEY_FILE = 0x23
    IDENTITY_FILE = 0x24
    SERVICE_CRED = 0x25

    APP_REQUEST = 0x30
    APP_RESPONSE = 0x31
    ERROR_REPLY = 0x3F


_INT_WIDTH = {"u8": 1, "u16": 2, "u32": 4, "u64": 8}


class _Schema:
    __slots__ = ("schema_id", "cls", "fields")

    def __init__(self, schema_id: int, cls: type, fields: tuple):
        self.schema_id = schema_id
        self.cls = cls
        self.fields = fields


_by_type: dict[type, _Schema] = {}
_by_id: dict[int, _Schema] = {}


def register(cls: type, schema_id: SchemaId, fields: list[tuple]) -> None:
    """Register ``cls`` under ``schema_id`` with an ordered field list.

    Each field is (name, kind) or (name, kind, nested_cls) where kind is one
    of u8/u16/u32/u64/bytes/str/struct/opt/list.  Registration order of the
    field list is the wire order and must never change once published.
    """
    norm = []
    for spec in fields:
        name, kind = spec[0], spec[1]
        arg = spec[2] if len(spec) > 2 else None
        if kind in ("struct", "opt", "list") and arg is None:
            raise ValueError(f"field {name}: kind {kind} needs a nested class")
        if kind not in _INT_WIDTH and kind not in ("bytes", "str", "struct", "opt", "list"):
            raise ValueError(f"field {name}: unknown kind {kind}")
        norm.append((name, kind, arg))
    schema = _Schema(int(schema_id), cls, tuple(norm))
    if int(schema_id) in _by_id:
        raise ValueError(f"schema id {schema_id:#x} registered twice")
    _by_type[cls] = schema
    _by_id[int(schema_id)] = schema


def schema_id_of(payload: bytes) -> Optional[int]:
    """Peek the leading schema id of an encoded structure, if recognizable."""
    if not payload:
        return None
    tag = payload[0]
    return tag if tag in _by_id else None


def _field(tag: int, value: bytes) -> bytes:
    if len(value) > _MAX_FIELD:
        raise FieldTooLarge(f"field value of {len(value)} bytes exceeds u32 length")
    return _HEADER.pack(tag, len(value)) + bytes(value)


def _encode_value(kind: str, arg, value: Any) -> bytes:
    width = _INT_WIDTH.get(kind)
    if width is not None:
        if not isinstance(value, int) or isinstance(value, bool):
            raise MalformedValue(f"expected int for {kind}, got {type(value).__name__}")
        if value < 0 or value >= 1 << (8 * width):
            raise FieldTooLarge(f"{value} does not fit in {kind}")
        return value.to_bytes(width, "big")
    if kind == "bytes":
        if not isinstance(value, (bytes, bytearray)):
            raise MalformedValue(f"expected bytes, got {type(value).__name__}")
        return bytes(value)
    if kind == "str":
        if not isinstance(value, str):
            raise MalformedValue(f"expected str, got {type(value).__name__}")
        return value.encode("utf-8")
    if kind == "struct":
        return encode(value)
    if kind == "opt":
        return b"" if value is None else encode(value)
    # list
    return b"".join(encode(item) for item in value)


def encode(obj: Any) -> bytes:
    """Encode a registered structure to its canonical bytes."""
    schema = _by_type.get(type(obj))
    if schema is None:
        raise TypeError(f"no schema registered for {type(obj).__name__}")
    parts = []
    for index, (name, kind, arg) in enumerate(schema.fields, start=1):
        parts.append(_field(index, _encode_value(kind, arg, getattr(obj, name))))
    return _field(schema.schema_id, b"".join(parts))


def _read_tlv(data: bytes, off: int) -> tuple[int, bytes, int]:
    """Return (tag, value, next_offset); raises Truncated on short input."""
    if off + _HEADER.size > len(data):
        raise Truncated(f"need {_HEADER.size} header bytes at offset {off}, have {len(data) - off}")
    tag, length = _HEADER.unpack_from(data, off)
    end = off + _HEADER.size + length
    if end > len(data):
        raise Truncated(f"field at offset {off} declares {length} bytes, {len(data) - off - _HEADER.size} remain")
    return tag, data[off + _HEADER.size:end], end


def _decode_value(kind: str, arg, value: bytes):
    width = _INT_WIDTH.get(kind)
    if width is not None:
        if len(value) != width:
            raise MalformedValue(f"{kind} field has {len(value)} bytes")
        return int.from_bytes(value, "big")
    if kind == "bytes":
        return value
    if kind == "str":
        try:
            return value.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedValue(f"invalid UTF-8 in string field: {exc}") from None
    if kind == "struct":
        return _decode_exact(value, _require_schema(arg))
    if kind == "opt":
        if not value:
            return None
        return _decode_exact(value, _require_schema(arg))
    items = []
    pos = 0
    schema = _require_schema(arg)
    while pos < len(value):
        item, pos = _decode_at(value, pos, schema)
        items.append(item)
    return items


def _require_schema(cls: type) -> _Schema:
    schema = _by_type.get(cls)
    if schema is None:
        raise TypeError(f"no schema registered for {cls.__name__}")
    return schema


def _decode_at(data: bytes, off: int, schema: _Schema) -> tuple[Any, int]:
    tag, value, end = _read_tlv(data, off)
    if tag != schema.schema_id:
        if tag in _by_id:
            raise SchemaMismatch(f"expected schema {schema.schema_id:#x}, found {tag:#x}")
        raise UnknownTag(f"unknown schema tag {tag:#x}")
    kwargs = {}
    pos = 0
    for index, (name, kind, arg) in enumerate(schema.fields, start=1):
        if pos >= len(value):
            raise Truncated(f"missing field {index} ({name}) of {schema.cls.__name__}")
        ftag, fval, pos = _read_tlv(value, pos)
        if ftag != index:
            raise UnknownTag(f"expected field tag {index} in {schema.cls.__name__}, found {ftag}")
        kwargs[name] = _decode_value(kind, arg, fval)
    if pos != len(value):
        raise TrailingGarbage(f"{len(value) - pos} unread bytes inside {schema.cls.__name__}")
    return schema.cls(**kwargs), end


def _decode_exact(data: bytes, schema: _Schema) -> Any:
    obj, end = _decode_at(data, 0, schema)
    if end != len(data):
        raise TrailingGarbage(f"{len(data) - end} bytes after {schema.cls.__name__}")
    return obj


def decode(data: bytes, expected: SchemaId) -> Any:
    """Decode one structure; the leading tag must equal ``expected``."""
    schema = _by_id.get(int(expected))
    if schema is None:
        raise TypeError(f"no schema registered for id {int(expected):#x}")
    return _decode_exact(bytes(data), schema)
