"""Command execution and read/list semantics over a ``Store``."""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from typing import Iterator

from .core import Command, CommandResult, Kind, Status, check_prefix, decode_result, encode_result
from .storage import BACKWARD, FORWARD, Store, prefix_successor

# system keyspace; user keys never contain 0x00 so these sort first and never collide
SYS = b"\x00"
SYS_APPLIED = b"\x00applied"
SYS_DEDUP = b"\x00dedup/"
USER_MIN = b"\x01"

_INT = re.compile(rb"-?[0-9]+\Z")
_I64_MIN, _I64_MAX = -(1 << 63), (1 << 63) - 1


def is_system_key(key: bytes) -> bool:
    return key[:1] == SYS


def parse_int(value: bytes) -> int | None:
    if not _INT.match(value):
        return None
    n = int(value)
    return n if _I64_MIN <= n <= _I64_MAX else None


@dataclass(frozen=True)
class ListQuery:
    prefix: bytes = b""
    start_key: bytes = b""
    count: int = 0
    next: bool = False
    forward: bool = True

    def __post_init__(self) -> None:
        check_prefix(self.prefix)


def list_items(source, q: ListQuery) -> Iterator[tuple[bytes, bytes]]:
    """Evaluate a listing against anything exposing ``iterate(start, direction)``.

    ``source`` is a Store (synced view), a Snapshot, or a ``PendingView``.
    """
    p, s = q.prefix, q.start_key
    produced = 0
    first = True
    if q.forward:
        lo = max(p, s) if s else p
        lo = max(lo, USER_MIN)
        for k, v in source.iterate(lo, FORWARD):
            if not k.startswith(p):
                break
            if first and q.next and k == s:
                first = False
                continue
            first = False
            yield k, v
            produced += 1
            if q.count and produced >= q.count:
                break
    else:
        succ = prefix_successor(p)
        if s and (succ is None or s < succ):
            hi = s
        else:
            hi = succ if succ is not None else b""
        for k, v in source.iterate(hi, BACKWARD):
            if k < USER_MIN:
                break
            if succ is not None and k >= succ:
                continue
            if not k.startswith(p):
                break
            if first and q.next and k == s:
                first = False
                continue
            first = False
            yield k, v
            produced += 1
            if q.count and produced >= q.count:
                break


class PendingView:
    """The apply path's view: synced state plus unsynced transactions."""

    def __init__(self, store: Store) -> None:
        self.store = store

    def get(self, key: bytes) -> bytes | None:
        return self.store.get(key, pending=True)

    def iterate(self, start: bytes, direction: bool):
        return self.store.iterate(start, direction, pending=True)


class KeyspaceDB:
    def __init__(self, store: Store) -> None:
        self.store = store
        self.pending = PendingView(store)

    # replicated apply path

    def execute(self, c: Command) -> CommandResult:
        if c.client_id:
            dkey = SYS_DEDUP + struct.pack(">Q", c.client_id)
            prior = self.store.get(dkey, pending=True)
            if prior is not None:
                seq = struct.unpack(">Q", prior[:8])[0]
                if c.request_seq <= seq:
                    old = decode_result(prior[8:]) if c.request_seq == seq else CommandResult(Status.OK)
                    return CommandResult(old.status, old.value, duplicate=True)
            res = self._execute(c)
            self.store.current().put(dkey, struct.pack(">Q", c.request_seq) + encode_result(res))
            return res
        return self._execute(c)

    def _execute(self, c: Command) -> CommandResult:
        txn = self.store.current()
        get = self.pending.get
        k = c.kind
        if k == Kind.SET:
            txn.put(c.key, c.value)
            return CommandResult(Status.OK)
        if k == Kind.PRUNE:
            doomed = [key for key, _ in list_items(self.pending, ListQuery(prefix=c.key))]
            for key in doomed:
                txn.delete(key)
            return CommandResult(Status.OK, str(len(doomed)).encode())
        cur = get(c.key)
        if cur is None:
            return CommandResult(Status.NOT_FOUND)
        if k == Kind.TEST_AND_SET:
            if cur != c.test:
                return CommandResult(Status.CONDITION_FAILED, cur)
            txn.put(c.key, c.value)
            return CommandResult(Status.OK, c.value)
        if k == Kind.ADD:
            n = parse_int(cur)
            if n is None:
                return CommandResult(Status.TYPE_ERROR)
            n += c.delta
            if not _I64_MIN <= n <= _I64_MAX:
                return CommandResult(Status.TYPE_ERROR)
            out = str(n).encode()
            txn.put(c.key, out)
            return CommandResult(Status.OK, out)
        if k == Kind.RENAME:
            if c.new_key != c.key:
                txn.put(c.new_key, cur)
                txn.delete(c.key)
            return CommandResult(Status.OK)
        if k == Kind.DELETE:
            txn.delete(c.key)
            return CommandResult(Status.OK)
        if k == Kind.REMOVE:
            txn.delete(c.key)
            return CommandResult(Status.OK, cur)
        raise AssertionError(k)

    # reads; ``pending`` selects the apply-path view instead of the synced one

    def _src(self, pending: bool):
        return self.pending if pending else self.store

    def get(self, key: bytes, pending: bool = False) -> bytes | None:
        return self._src(pending).get(key)

    def list_keys(self, q: ListQuery, pending: bool = False) -> list[bytes]:
        return [k for k, _ in list_items(self._src(pending), q)]

    def list_keyvalues(self, q: ListQuery, pending: bool = False) -> list[tuple[bytes, bytes]]:
        return list(list_items(self._src(pending), q))

    def count(self, q: ListQuery, pending: bool = False) -> int:
        return sum(1 for _ in list_items(self._src(pending), q))

    def user_items(self, pending: bool = False) -> list[tuple[bytes, bytes]]:
        return self.list_keyvalues(ListQuery(), pending)
