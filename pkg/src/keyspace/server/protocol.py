"""Client wire protocol.

Request frame: u32 length, u8 opcode, then for write opcodes u64 clientId and
u64 requestSeq, then the operation's arguments as u32-length-prefixed blobs.
Integer arguments are fixed-width little endian inside their blob (ADD's
delta and the listing count are 8 bytes, next/forward flags 1 byte).

Response frame: u32 length, u8 status, u32 payload count, payload blobs.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from ..core import (
    InvalidArgument, MAX_KEY, MAX_VALUE, Command, CommandResult, Kind, Malformed, Reader, Status, Writer, check_key,
    check_prefix, check_value,
)
from ..kvdb import ListQuery

DIRTY = 0x80
MAX_FRAME = MAX_VALUE + 3 * MAX_KEY + 64
_U32 = struct.Struct("<I")


class Op(enum.IntEnum):
    GET = 0x01
    SET = 0x02
    TESTANDSET = 0x03
    ADD = 0x04
    RENAME = 0x05
    DELETE = 0x06
    REMOVE = 0x07
    PRUNE = 0x08
    LISTKEYS = 0x09
    LISTKEYVALUES = 0x0A
    COUNT = 0x0B


WRITE_OPS = {Op.SET, Op.TESTANDSET, Op.ADD, Op.RENAME, Op.DELETE, Op.REMOVE, Op.PRUNE}
READ_OPS = {Op.GET, Op.LISTKEYS, Op.LISTKEYVALUES, Op.COUNT}
LIST_OPS = {Op.LISTKEYS, Op.LISTKEYVALUES, Op.COUNT}

# argument count per opcode
ARITY = {
    Op.GET: 1, Op.SET: 2, Op.TESTANDSET: 3, Op.ADD: 2, Op.RENAME: 2, Op.DELETE: 1, Op.REMOVE: 1,
    Op.PRUNE: 1, Op.LISTKEYS: 5, Op.LISTKEYVALUES: 5, Op.COUNT: 5,
}

_KINDS = {
    Op.SET: Kind.SET, Op.TESTANDSET: Kind.TEST_AND_SET, Op.ADD: Kind.ADD, Op.RENAME: Kind.RENAME,
    Op.DELETE: Kind.DELETE, Op.REMOVE: Kind.REMOVE, Op.PRUNE: Kind.PRUNE,
}


@dataclass(frozen=True)
class Request:
    op: int
    args: tuple[bytes, ...]
    client_id: int = 0
    request_seq: int = 0

    @property
    def base(self) -> Op:
        return Op(self.op & ~DIRTY)

    @property
    def dirty(self) -> bool:
        return bool(self.op & DIRTY)


@dataclass(frozen=True)
class Response:
    status: Status
    values: tuple[bytes, ...] = ()


# --- argument helpers

def i64_arg(v: int) -> bytes:
    return struct.pack("<q", v)


def u64_arg(v: int) -> bytes:
    return struct.pack("<Q", v)


def flag_arg(v: bool) -> bytes:
    return bytes([int(v)])


def _int_arg(b: bytes, fmt: str) -> int:
    if len(b) != struct.calcsize(fmt):
        raise Malformed(f"integer argument of {len(b)} bytes")
    return struct.unpack(fmt, b)[0]


def _flag(b: bytes) -> bool:
    if b not in (b"\x00", b"\x01"):
        raise Malformed("flag argument must be one byte 0 or 1")
    return b == b"\x01"


# --- request constructors

def get(key: bytes, dirty: bool = False) -> Request:
    return Request(Op.GET | (DIRTY if dirty else 0), (key,))


def write(op: Op, *args: bytes, client_id: int = 0, request_seq: int = 0) -> Request:
    return Request(op, tuple(args), client_id, request_seq)


def listing(op: Op, prefix: bytes = b"", start_key: bytes = b"", count: int = 0, next: bool = False,
            forward: bool = True, dirty: bool = False) -> Request:
    return Request(op | (DIRTY if dirty else 0),
                   (prefix, start_key, u64_arg(count), flag_arg(next), flag_arg(forward)))


# --- encoding

def encode_request(r: Request) -> bytes:
    w = Writer().u8(r.op)
    if r.base in WRITE_OPS:
        w.u64(r.client_id).u64(r.request_seq)
    for a in r.args:
        w.blob(a)
    body = w.getvalue()
    return _U32.pack(len(body)) + body


def decode_request_body(body: bytes) -> Request:
    """Decode one frame body (without the length prefix) and validate it."""
    r = Reader(body)
    op = r.u8()
    try:
        base = Op(op & ~DIRTY)
    except ValueError:
        raise Malformed(f"unknown opcode {op:#x}") from None
    if op & DIRTY and base not in READ_OPS:
        raise Malformed(f"no dirty variant of {base.name}")
    cid = seq = 0
    if base in WRITE_OPS:
        cid, seq = r.u64(), r.u64()
    args = tuple(r.blob(MAX_FRAME) for _ in range(ARITY[base]))
    r.done()
    req = Request(op, args, cid, seq)
    try:
        validate(req)
    except InvalidArgument as exc:
        raise Malformed(str(exc)) from None
    return req


def validate(req: Request) -> None:
    base, a = req.base, req.args
    if base in LIST_OPS:
        check_prefix(a[0])
        if a[1]:
            check_key(a[1])
        _int_arg(a[2], "<Q")
        _flag(a[3])
        _flag(a[4])
    elif base == Op.PRUNE:
        check_prefix(a[0])
    else:
        check_key(a[0])
        if base == Op.SET:
            check_value(a[1])
        elif base == Op.TESTANDSET:
            check_value(a[1])
            check_value(a[2])
        elif base == Op.ADD:
            _int_arg(a[1], "<q")
        elif base == Op.RENAME:
            check_key(a[1])


def to_command(req: Request) -> Command:
    base, a = req.base, req.args
    ids = {"client_id": req.client_id, "request_seq": req.request_seq}
    kind = _KINDS[base]
    if base == Op.SET:
        return Command(kind, a[0], value=a[1], **ids)
    if base == Op.TESTANDSET:
        return Command(kind, a[0], test=a[1], value=a[2], **ids)
    if base == Op.ADD:
        return Command(kind, a[0], delta=_int_arg(a[1], "<q"), **ids)
    if base == Op.RENAME:
        return Command(kind, a[0], new_key=a[1], **ids)
    return Command(kind, a[0], **ids)


def to_query(req: Request) -> ListQuery:
    a = req.args
    return ListQuery(a[0], a[1], _int_arg(a[2], "<Q"), _flag(a[3]), _flag(a[4]))


def encode_response(resp: Response) -> bytes:
    w = Writer().u8(int(resp.status)).u32(len(resp.values))
    for v in resp.values:
        w.blob(v)
    body = w.getvalue()
    return _U32.pack(len(body)) + body


def decode_response_body(body: bytes) -> Response:
    r = Reader(body)
    try:
        status = Status(r.u8())
    except ValueError:
        raise Malformed("unknown status") from None
    values = tuple(r.blob(MAX_FRAME) for _ in range(r.u32()))
    r.done()
    return Response(status, values)


def from_result(res: CommandResult) -> Response:
    return Response(res.status, () if res.value is None else (res.value,))


def not_master(hint: int | None) -> Response:
    return Response(Status.NOT_MASTER, () if hint is None else (str(hint).encode(),))


class FrameDecoder:
    """Incremental splitter for u32-length-prefixed frames."""

    def __init__(self, limit: int = MAX_FRAME) -> None:
        self.buf = bytearray()
        self.limit = limit

    def feed(self, data: bytes) -> list[bytes]:
        self.buf += data
        out = []
        while len(self.buf) >= 4:
            (n,) = _U32.unpack_from(self.buf)
            if n == 0 or n > self.limit:
                raise Malformed(f"bad frame length {n}")
            if len(self.buf) < 4 + n:
                break
            out.append(bytes(self.buf[4:4 + n]))
            del self.buf[:4 + n]
        return out
