"""Shared domain types and canonical little-endian binary encodings."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

MAX_KEY = 1024
MAX_VALUE = 1 << 20
MAX_BATCH = 1 << 20
RESERVED_BYTE = 0x00


class KeyspaceError(Exception):
    """Base class for all errors raised by this package."""


class Malformed(KeyspaceError):
    pass


class BatchTooLarge(KeyspaceError):
    pass


class InvalidArgument(KeyspaceError):
    pass


# --- field encoding ---------------------------------------------------------

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")


class Writer:
    __slots__ = ("parts",)

    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self.parts.append(_U8.pack(v))
        return self

    def u32(self, v: int) -> "Writer":
        self.parts.append(_U32.pack(v))
        return self

    def u64(self, v: int) -> "Writer":
        self.parts.append(_U64.pack(v))
        return self

    def i64(self, v: int) -> "Writer":
        self.parts.append(_I64.pack(v))
        return self

    def blob(self, b: bytes) -> "Writer":
        self.parts.append(_U32.pack(len(b)))
        self.parts.append(b)
        return self

    def raw(self, b: bytes) -> "Writer":
        self.parts.append(b)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0) -> None:
        self.buf = buf
        self.pos = pos

    def _take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise Malformed("truncated input")
        out = self.buf[self.pos:end]
        self.pos = end
        return bytes(out)

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def blob(self, limit: int | None = None) -> bytes:
        n = self.u32()
        if limit is not None and n > limit:
            raise Malformed(f"field length {n} exceeds bound {limit}")
        return self._take(n)

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise Malformed(f"{len(self.buf) - self.pos} trailing bytes")


# --- keys and values --------------------------------------------------------

def check_key(key: bytes) -> bytes:
    if not isinstance(key, bytes):
        raise InvalidArgument("key must be bytes")
    if not 1 <= len(key) <= MAX_KEY:
        raise InvalidArgument(f"key length {len(key)} outside 1..{MAX_KEY}")
    if RESERVED_BYTE in key:
        raise InvalidArgument("key contains reserved byte 0x00")
    return key


def check_prefix(prefix: bytes) -> bytes:
    if len(prefix) > MAX_KEY or RESERVED_BYTE in prefix:
        raise InvalidArgument("invalid prefix")
    return prefix


def check_value(value: bytes) -> bytes:
    if not isinstance(value, bytes):
        raise InvalidArgument("value must be bytes")
    if len(value) > MAX_VALUE:
        raise InvalidArgument(f"value length {len(value)} exceeds {MAX_VALUE}")
    return value


# --- ballots ----------------------------------------------------------------

class Ballot(NamedTuple):
    """Paxos round identifier, ordered by (counter, proposer)."""

    counter: int
    proposer: int

    def is_null(self) -> bool:
        return self.counter == 0


NULL_BALLOT = Ballot(0, 0)


class Ordering(enum.IntEnum):
    LT = -1
    EQ = 0
    GT = 1


def compare_ballots(a: Ballot, b: Ballot) -> Ordering:
    if a == b:
        return Ordering.EQ
    return Ordering.LT if a < b else Ordering.GT


def write_ballot(w: Writer, b: Ballot) -> None:
    w.u64(b.counter).u32(b.proposer)


def read_ballot(r: Reader) -> Ballot:
    return Ballot(r.u64(), r.u32())


# --- commands ---------------------------------------------------------------

class Kind(enum.IntEnum):
    SET = 1
    TEST_AND_SET = 2
    ADD = 3
    RENAME = 4
    DELETE = 5
    REMOVE = 6
    PRUNE = 7


@dataclass(frozen=True, slots=True)
class Command:
    kind: Kind
    key: bytes = b""
    value: bytes = b""
    test: bytes = b""
    delta: int = 0
    new_key: bytes = b""
    client_id: int = 0
    request_seq: int = 0

    def __post_init__(self) -> None:
        validate_command(self)

    # the prefix of a PRUNE lives in ``key``
    @property
    def prefix(self) -> bytes:
        return self.key


def validate_command(c: Command) -> None:
    k = c.kind
    if k == Kind.PRUNE:
        check_prefix(c.key)
    else:
        check_key(c.key)
    if k in (Kind.SET, Kind.TEST_AND_SET):
        check_value(c.value)
    if k == Kind.TEST_AND_SET:
        check_value(c.test)
    if k == Kind.RENAME:
        check_key(c.new_key)
    if k == Kind.ADD and not -(1 << 63) <= c.delta < (1 << 63):
        raise InvalidArgument("delta outside signed 64-bit range")
    # fields a kind does not carry must stay at their defaults for canonical form
    if k not in (Kind.SET, Kind.TEST_AND_SET) and c.value:
        raise InvalidArgument(f"{k.name} carries no value")
    if k != Kind.TEST_AND_SET and c.test:
        raise InvalidArgument(f"{k.name} carries no test value")
    if k != Kind.ADD and c.delta:
        raise InvalidArgument(f"{k.name} carries no delta")
    if k != Kind.RENAME and c.new_key:
        raise InvalidArgument(f"{k.name} carries no new key")
    if not (0 <= c.client_id < 1 << 64 and 0 <= c.request_seq < 1 << 64):
        raise InvalidArgument("client id / request seq out of range")


def set_(key: bytes, value: bytes, **ids: int) -> Command:
    return Command(Kind.SET, key=key, value=value, **ids)


def test_and_set(key: bytes, test: bytes, value: bytes, **ids: int) -> Command:
    return Command(Kind.TEST_AND_SET, key=key, test=test, value=value, **ids)


def add(key: bytes, delta: int, **ids: int) -> Command:
    return Command(Kind.ADD, key=key, delta=delta, **ids)


def rename(key: bytes, new_key: bytes, **ids: int) -> Command:
    return Command(Kind.RENAME, key=key, new_key=new_key, **ids)


def delete(key: bytes, **ids: int) -> Command:
    return Command(Kind.DELETE, key=key, **ids)


def remove(key: bytes, **ids: int) -> Command:
    return Command(Kind.REMOVE, key=key, **ids)


def prune(prefix: bytes, **ids: int) -> Command:
    return Command(Kind.PRUNE, key=prefix, **ids)


def _write_command(w: Writer, c: Command) -> None:
    w.u8(c.kind).u64(c.client_id).u64(c.request_seq)
    k = c.kind
    if k == Kind.SET:
        w.blob(c.key).blob(c.value)
    elif k == Kind.TEST_AND_SET:
        w.blob(c.key).blob(c.test).blob(c.value)
    elif k == Kind.ADD:
        w.blob(c.key).i64(c.delta)
    elif k == Kind.RENAME:
        w.blob(c.key).blob(c.new_key)
    else:
        w.blob(c.key)


def encode_command(c: Command) -> bytes:
    w = Writer()
    _write_command(w, c)
    return w.getvalue()


def _read_command(r: Reader) -> Command:
    tag = r.u8()
    try:
        kind = Kind(tag)
    except ValueError:
        raise Malformed(f"unknown command kind {tag}") from None
    cid, seq = r.u64(), r.u64()
    key = r.blob(MAX_KEY)
    fields: dict = {}
    if kind == Kind.SET:
        fields["value"] = r.blob(MAX_VALUE)
    elif kind == Kind.TEST_AND_SET:
        fields["test"] = r.blob(MAX_VALUE)
        fields["value"] = r.blob(MAX_VALUE)
    elif kind == Kind.ADD:
        fields["delta"] = r.i64()
    elif kind == Kind.RENAME:
        fields["new_key"] = r.blob(MAX_KEY)
    try:
        return Command(kind, key=key, client_id=cid, request_seq=seq, **fields)
    except InvalidArgument as e:
        raise Malformed(str(e)) from None


def decode_command(b: bytes) -> Command:
    r = Reader(b)
    c = _read_command(r)
    r.done()
    return c


# --- batches ----------------------------------------------------------------

def command_frame_size(c: Command) -> int:
    """Bytes a command adds to a batch encoding (length prefix included)."""
    return 4 + len(encode_command(c))


BATCH_HEADER = 4


def encode_batch(commands: Sequence[Command]) -> bytes:
    """Pack commands into one replicated value.

    An empty batch is allowed; it carries no commands and is used by the
    replicated log only as a no-op.
    """
    w = Writer().u32(len(commands))
    for c in commands:
        w.blob(encode_command(c))
    out = w.getvalue()
    if len(out) > MAX_BATCH:
        raise BatchTooLarge(f"batch encodes to {len(out)} bytes (max {MAX_BATCH})")
    return out


def decode_batch(b: bytes) -> list[Command]:
    if len(b) > MAX_BATCH:
        raise Malformed("batch exceeds size bound")
    r = Reader(b)
    n = r.u32()
    out = []
    for _ in range(n):
        out.append(decode_command(r.blob()))
    r.done()
    return out


# --- results ----------------------------------------------------------------

class Status(enum.IntEnum):
    OK = 0
    NOT_FOUND = 1
    CONDITION_FAILED = 2
    TYPE_ERROR = 3
    NOT_MASTER = 4
    UNAVAILABLE = 5
    UNKNOWN_OUTCOME = 6
    MALFORMED = 7


@dataclass(frozen=True, slots=True)
class CommandResult:
    status: Status
    value: bytes | None = None
    duplicate: bool = False

    @property
    def ok(self) -> bool:
        return self.status == Status.OK


def encode_result(res: CommandResult) -> bytes:
    w = Writer().u8(res.status)
    if res.value is None:
        w.u8(0)
    else:
        w.u8(1).blob(res.value)
    return w.getvalue()


def decode_result(b: bytes) -> CommandResult:
    r = Reader(b)
    status = Status(r.u8())
    value = r.blob() if r.u8() else None
    r.done()
    return CommandResult(status, value)
