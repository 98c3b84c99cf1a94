"""Trace data model and canonical value representation.

Every parameter list and return value that passes through the recorder is
reduced to a :class:`CanonicalValue`: a deterministic text rendering of the
value's structure that does not depend on object identity or memory layout.
Two structurally equal values always render to the same text, which is what
lets the miner compare inputs and outputs across calls, threads and process
restarts.

Grammar of the rendering::

    n                    null
    b:true | b:false     boolean
    i:42                 integer
    f:1.5                float (repr form; -0.0 folds to 0.0)
    s:"text"             string, JSON-quoted
    y:0a1b               bytes, hex
    l:[v,v]              list or tuple
    e:[v,v]              set or frozenset, elements sorted by rendering
    m:{k=v,k=v}          mapping, entries sorted by rendered key
    r:Name{f=v,f=v}      record (dataclass, namedtuple, plain object)
    k:Name.MEMBER        enum member
    ^2                   back-reference to the container two levels up

Mapping keys that are simple strings render bare (``a``); other string keys
are JSON-quoted and non-string keys use their full rendering.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import io
import json
import math
import re
import socket
import types
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

__all__ = [
    "BackRef",
    "CallKey",
    "CallRecord",
    "CanonicalValue",
    "MalformedRecord",
    "MethodId",
    "Record",
    "Symbol",
    "UnsupportedValue",
    "call_key",
    "canonicalize",
    "parse_record",
    "parse_repr",
    "serialize_record",
]

_BARE_KEY = re.compile(r"[A-Za-z0-9_.\-]+")
_DIGEST_BYTES = 16


class UnsupportedValue(TypeError):
    """A value outside the representable universe (file handles, callables...)."""


class MalformedRecord(ValueError):
    """A trace-log line that does not decode into a :class:`CallRecord`."""


@dataclass(frozen=True, order=True)
class MethodId:
    signature: str

    def __post_init__(self) -> None:
        if not isinstance(self.signature, str) or not self.signature:
            raise ValueError("method signature must be a non-empty string")

    @classmethod
    def of(cls, func: Any, arity: Optional[int] = None) -> "MethodId":
        """Build an id from a function's qualified name and positional arity."""
        if arity is None:
            code = getattr(func, "__code__", None)
            arity = code.co_argcount if code is not None else 0
        module = getattr(func, "__module__", None) or "<unknown>"
        qualname = getattr(func, "__qualname__", None) or repr(func)
        return cls(f"{module}.{qualname}/{arity}")

    def __str__(self) -> str:
        return self.signature


@dataclass(frozen=True)
class CanonicalValue:
    repr: str
    size_estimate: int

    @classmethod
    def from_repr(cls, text: str) -> "CanonicalValue":
        return cls(text, len(text.encode("utf-8")))

    def __str__(self) -> str:
        return self.repr


@dataclass(frozen=True)
class Record:
    """Parsed form of a rendered record; renders back to the same text."""

    name: str
    fields: tuple  # tuple of (field name, value) pairs


@dataclass(frozen=True)
class Symbol:
    """Parsed form of a rendered enum member."""

    name: str


@dataclass(frozen=True)
class BackRef:
    """Parsed form of a cycle marker."""

    depth: int


# -- rendering ---------------------------------------------------------------

def _is_unsupported(value: Any) -> bool:
    return (
        callable(value)
        or isinstance(value, (types.ModuleType, io.IOBase, socket.socket, types.GeneratorType))
    )


def _render_key(key: Any, path: list) -> str:
    if isinstance(key, str):
        if key != "n" and _BARE_KEY.fullmatch(key):
            return key
        return json.dumps(key, ensure_ascii=False)
    return _render(key, path)


def _render_float(x: float) -> str:
    if math.isnan(x):
        return "f:nan"
    if x == 0.0:
        return "f:0.0"
    return "f:" + repr(x)


def _render_fields(name: str, items: Iterable[tuple[str, Any]], path: list) -> str:
    body = ",".join(sorted(f"{_render_key(k, path)}={_render(v, path)}" for k, v in items))
    return f"r:{name}{{{body}}}"


def _render(value: Any, path: list) -> str:
    # scalars first; bool before int because bool is an int subclass
    if value is None:
        return "n"
    if isinstance(value, bool):
        return "b:true" if value else "b:false"
    if isinstance(value, enum.Enum):
        return f"k:{type(value).__qualname__}.{value.name}"
    if isinstance(value, int):
        return f"i:{int(value)}"
    if isinstance(value, float):
        return _render_float(value)
    if isinstance(value, str):
        return "s:" + json.dumps(value, ensure_ascii=False)
    if isinstance(value, (bytes, bytearray, memoryview)):
        return "y:" + bytes(value).hex()
    if isinstance(value, Symbol):
        return f"k:{value.name}"
    if isinstance(value, BackRef):
        return f"^{value.depth}"

    ident = id(value)
    for depth, ancestor in enumerate(reversed(path), start=1):
        if ancestor == ident:
            return f"^{depth}"
    path.append(ident)
    try:
        return _render_composite(value, path)
    finally:
        path.pop()


def _render_composite(value: Any, path: list) -> str:
    if isinstance(value, Record):
        return _render_fields(value.name, value.fields, path)
    if isinstance(value, tuple) and hasattr(value, "_fields"):
        return _render_fields(type(value).__qualname__, zip(value._fields, value), path)
    if isinstance(value, (list, tuple)):
        return "l:[" + ",".join(_render(v, path) for v in value) + "]"
    if isinstance(value, (set, frozenset)):
        return "e:[" + ",".join(sorted(_render(v, path) for v in value)) + "]"
    if isinstance(value, dict):
        body = ",".join(
            sorted(f"{_render_key(k, path)}={_render(v, path)}" for k, v in value.items())
        )
        return "m:{" + body + "}"
    if _is_unsupported(value):
        raise UnsupportedValue(f"cannot canonicalize {type(value).__name__}")
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        items = ((f.name, getattr(value, f.name)) for f in dataclasses.fields(value))
        return _render_fields(type(value).__qualname__, items, path)
    attrs = getattr(value, "__dict__", None)
    if isinstance(attrs, dict):
        return _render_fields(type(value).__qualname__, attrs.items(), path)
    raise UnsupportedValue(f"cannot canonicalize {type(value).__name__}")


def canonicalize(value: Any) -> CanonicalValue:
    """Render *value* into its canonical, location-independent form.

    Raises :class:`UnsupportedValue` for anything outside the closed universe
    of scalars, text, bytes, sequences, sets, maps, records and null.
    """
    return CanonicalValue.from_repr(_render(value, []))


# -- parsing -----------------------------------------------------------------

class _Parser:
    _decoder = json.JSONDecoder()

    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def fail(self, msg: str) -> ValueError:
        return ValueError(f"{msg} at offset {self.pos} in {self.text[:80]!r}")

    def expect(self, token: str) -> None:
        if not self.text.startswith(token, self.pos):
            raise self.fail(f"expected {token!r}")
        self.pos += len(token)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def json_string(self) -> str:
        try:
            value, end = self._decoder.raw_decode(self.text, self.pos)
        except json.JSONDecodeError as exc:
            raise self.fail("bad string literal") from exc
        if not isinstance(value, str):
            raise self.fail("expected string literal")
        self.pos = end
        return value

    def until(self, stops: str) -> str:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in stops:
            self.pos += 1
        return self.text[start:self.pos]

    def items(self, close: str, hashable: bool) -> list:
        out = []
        if self.peek() == close:
            self.pos += 1
            return out
        while True:
            out.append(self.value(hashable))
            c = self.peek()
            self.pos += 1
            if c == close:
                return out
            if c != ",":
                raise self.fail(f"expected ',' or {close!r}")

    def key(self) -> Any:
        c = self.peek()
        if c == '"':
            return self.json_string()
        start = self.pos
        bare = self.until("=")
        if _BARE_KEY.fullmatch(bare) and bare != "n":
            return bare
        self.pos = start
        return self.value(hashable=True)

    def entries(self, hashable: bool = False) -> list:
        self.expect("{")
        out = []
        if self.peek() == "}":
            self.pos += 1
            return out
        while True:
            k = self.key()
            self.expect("=")
            out.append((k, self.value(hashable)))
            c = self.peek()
            self.pos += 1
            if c == "}":
                return out
            if c != ",":
                raise self.fail("expected ',' or '}'")

    def value(self, hashable: bool = False) -> Any:
        c = self.peek()
        if c == "n":
            self.pos += 1
            return None
        if c == "^":
            self.pos += 1
            digits = self.until(",]}=")
            if not digits.isdigit():
                raise self.fail("bad back-reference")
            return BackRef(int(digits))
        tag = self.text[self.pos:self.pos + 2]
        self.pos += 2
        if tag == "b:":
            word = self.until(",]}=")
            if word not in ("true", "false"):
                raise self.fail("bad boolean")
            return word == "true"
        if tag == "i:":
            try:
                return int(self.until(",]}="))
            except ValueError as exc:
                raise self.fail("bad integer") from exc
        if tag == "f:":
            try:
                return float(self.until(",]}="))
            except ValueError as exc:
                raise self.fail("bad float") from exc
        if tag == "s:":
            return self.json_string()
        if tag == "y:":
            try:
                return bytes.fromhex(self.until(",]}="))
            except ValueError as exc:
                raise self.fail("bad bytes") from exc
        if tag == "k:":
            return Symbol(self.until(",]}="))
        if tag == "l:":
            self.expect("[")
            seq = self.items("]", hashable)
            return tuple(seq) if hashable else seq
        if tag == "e:":
            self.expect("[")
            return frozenset(self.items("]", hashable=True))
        if tag == "m:":
            entries = self.entries()
            if hashable:
                raise self.fail("mapping used in hashable position")
            return dict(entries)
        if tag == "r:":
            name = self.until("{")
            return Record(name, tuple(self.entries(hashable)))
        raise self.fail(f"unknown tag {tag!r}")


def parse_repr(text: str) -> Any:
    """Rebuild a value from its rendering so that ``canonicalize`` maps it back
    to the identical text. Records come back as :class:`Record`, enum members as
    :class:`Symbol` and cycle markers as :class:`BackRef`."""
    parser = _Parser(text)
    value = parser.value()
    if parser.pos != len(text):
        raise parser.fail("trailing data")
    return value


# -- keys and records --------------------------------------------------------

@dataclass(frozen=True)
class CallKey:
    method: MethodId
    params_digest: str


def params_digest(params: Sequence[CanonicalValue]) -> str:
    # renderings never contain a raw newline (strings are JSON-escaped)
    h = hashlib.blake2b(digest_size=_DIGEST_BYTES)
    h.update("\n".join(p.repr for p in params).encode("utf-8"))
    h.update(b"\x00%d" % len(params))
    return h.hexdigest()


def call_key(method: MethodId, params: Sequence[CanonicalValue]) -> CallKey:
    return CallKey(method, params_digest(params))


@dataclass(frozen=True)
class CallRecord:
    method: MethodId
    params: tuple
    result: CanonicalValue
    cost_us: int
    session: Optional[str] = None
    at_us: int = 0

    def __post_init__(self) -> None:
        if self.cost_us < 0:
            raise ValueError("cost must be non-negative")
        if not isinstance(self.params, tuple):
            object.__setattr__(self, "params", tuple(self.params))

    @property
    def param_reprs(self) -> tuple:
        return tuple(p.repr for p in self.params)


def serialize_record(rec: CallRecord) -> str:
    """One JSON Lines entry for *rec* (no trailing newline)."""
    doc: dict[str, Any] = {
        "method": rec.method.signature,
        "params": [p.repr for p in rec.params],
        "result": rec.result.repr,
        "cost_us": rec.cost_us,
    }
    if rec.session is not None:
        doc["session"] = rec.session
    doc["at_us"] = rec.at_us
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":"))


def _nonempty_str(v: Any) -> bool:
    return isinstance(v, str) and bool(v)


def _nonneg_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def parse_record(line: str) -> CallRecord:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(f"not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedRecord("record must be a JSON object")
    method, params, result = doc.get("method"), doc.get("params"), doc.get("result")
    cost, at, session = doc.get("cost_us"), doc.get("at_us", 0), doc.get("session")
    if not _nonempty_str(method):
        raise MalformedRecord("missing or empty 'method'")
    if not isinstance(params, list) or not all(_nonempty_str(p) for p in params):
        raise MalformedRecord("'params' must be a list of non-empty strings")
    if not _nonempty_str(result):
        raise MalformedRecord("missing or empty 'result'")
    if not _nonneg_int(cost):
        raise MalformedRecord("'cost_us' must be a non-negative integer")
    if not _nonneg_int(at):
        raise MalformedRecord("'at_us' must be a non-negative integer")
    if session is not None and not isinstance(session, str):
        raise MalformedRecord("'session' must be a string")
    return CallRecord(
        MethodId(method),
        tuple(CanonicalValue.from_repr(p) for p in params),
        CanonicalValue.from_repr(result),
        cost,
        session,
        at,
    )
