"""Ordered key-value store with a write-ahead log and sync-on-commit transactions.

Layout under a data directory (or an in-memory ``MemDisk``):

``wal``
    8-byte magic, then records ``u32 length | u32 crc32 | body`` where body is
    ``u64 txn_seq | u32 n_ops | ops``; an op is ``u8 tag | blob key [| blob value]``.
    A torn or corrupt trailing record is discarded at recovery.
``checkpoint``
    8-byte magic, ``u64 last_txn_seq | u32 count``, entries, overflow area,
    trailing ``u32 crc32``. Values larger than ``page_size // 4`` are stored
    out of line in the overflow area.
"""

from __future__ import annotations

import os
import random
import threading
import zlib
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterator

from sortedcontainers import SortedDict

from .core import KeyspaceError, Malformed, Reader, Writer

WAL = "wal"
CHECKPOINT = "checkpoint"
WAL_MAGIC = b"KSWAL\x00\x01\x00"
CKP_MAGIC = b"KSCKP\x00\x01\x00"

OP_PUT = 1
OP_DELETE = 2

FORWARD = True
BACKWARD = False


class StoreFailed(KeyspaceError):
    """The store hit an I/O failure and is fail-stopped."""


@dataclass
class StoreConfig:
    page_size: int = 4096
    cache_size: int = 200 << 20
    log_buffer_size: int = 10 << 20


# --- disks ------------------------------------------------------------------

class MemDisk:
    """Simulated disk. Bytes are volatile until a flush completes.

    With ``schedule`` set, flushes complete asynchronously after ``latency``
    (microseconds) in FIFO order; otherwise they complete inline.
    """

    def __init__(self, schedule: Callable[[int, Callable[[], None]], None] | None = None,
                 latency: int = 0) -> None:
        self.files: dict[str, bytearray] = {}
        self.durable: dict[str, int] = {}
        self.schedule = schedule
        self.latency = latency
        self.syncs = 0
        self.fail_next_flush = False
        self._epoch = 0

    def exists(self, name: str) -> bool:
        return name in self.files

    def read(self, name: str) -> bytes:
        return bytes(self.files.get(name, b""))

    def size(self, name: str) -> int:
        return len(self.files.get(name, b""))

    def append(self, name: str, data: bytes) -> None:
        self.files.setdefault(name, bytearray()).extend(data)
        self.durable.setdefault(name, 0)

    def truncate(self, name: str, length: int) -> None:
        del self.files[name][length:]
        self.durable[name] = min(self.durable[name], length)

    def replace(self, name: str, data: bytes) -> None:
        self.files[name] = bytearray(data)
        self.durable[name] = len(data)
        self.syncs += 1

    def flush(self, name: str, callback: Callable[[], None]) -> None:
        if self.fail_next_flush:
            self.fail_next_flush = False
            raise OSError("injected flush failure")
        upto = len(self.files.get(name, b""))
        epoch = self._epoch

        def done() -> None:
            if epoch != self._epoch:
                return
            self.durable[name] = max(self.durable.get(name, 0), upto)
            self.syncs += 1
            callback()

        if self.schedule is None:
            done()
        else:
            self.schedule(self.latency, done)

    def crash(self, rng: random.Random | None = None, any_prefix: bool = False) -> None:
        """Drop everything not yet flushed.

        With ``rng`` a short torn tail of the unsynced bytes survives; with
        ``any_prefix`` as well, any prefix of them may survive, whole records
        included, as when the OS wrote back part of its cache on its own.
        """
        self._epoch += 1
        for name, data in self.files.items():
            keep = self.durable.get(name, 0)
            extra = 0
            if rng is not None and len(data) > keep:
                if any_prefix:
                    extra = rng.randint(0, len(data) - keep)
                else:
                    extra = rng.randrange(0, min(len(data) - keep, 12))
            del data[keep + extra:]
            self.durable[name] = len(data)


class FileDisk:
    """Files under a directory; flush means fsync."""

    def __init__(self, directory: str,
                 run_blocking: Callable[[Callable[[], None], Callable[[], None]], None] | None = None) -> None:
        self.dir = directory
        os.makedirs(directory, exist_ok=True)
        self.syncs = 0
        self.run_blocking = run_blocking
        self._handles: dict[str, object] = {}
        self._lock = threading.Lock()

    def _path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def exists(self, name: str) -> bool:
        return os.path.exists(self._path(name))

    def read(self, name: str) -> bytes:
        try:
            with open(self._path(name), "rb") as f:
                return f.read()
        except FileNotFoundError:
            return b""

    def size(self, name: str) -> int:
        try:
            return os.path.getsize(self._path(name))
        except FileNotFoundError:
            return 0

    def _handle(self, name: str):
        f = self._handles.get(name)
        if f is None:
            f = open(self._path(name), "ab")
            self._handles[name] = f
        return f

    def append(self, name: str, data: bytes) -> None:
        with self._lock:
            self._handle(name).write(data)

    def truncate(self, name: str, length: int) -> None:
        self._close(name)
        with open(self._path(name), "r+b") as f:
            f.truncate(length)
            os.fsync(f.fileno())

    def _close(self, name: str) -> None:
        f = self._handles.pop(name, None)
        if f is not None:
            f.close()

    def replace(self, name: str, data: bytes) -> None:
        self._close(name)
        tmp = self._path(name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self._path(name))
        fd = os.open(self.dir, os.O_RDONLY)
        try:
            os.fsync(fd)
        finally:
            os.close(fd)
        self.syncs += 1

    def flush(self, name: str, callback: Callable[[], None]) -> None:
        with self._lock:
            f = self._handle(name)
            f.flush()
        fileno = f.fileno()

        def work() -> None:
            os.fsync(fileno)

        def done() -> None:
            self.syncs += 1
            callback()

        if self.run_blocking is None:
            work()
            done()
        else:
            self.run_blocking(work, done)

    def close(self) -> None:
        for name in list(self._handles):
            self._close(name)


# --- records ----------------------------------------------------------------

def encode_wal_record(seq: int, ops: dict[bytes, bytes | None]) -> bytes:
    w = Writer().u64(seq).u32(len(ops))
    for k, v in ops.items():
        if v is None:
            w.u8(OP_DELETE).blob(k)
        else:
            w.u8(OP_PUT).blob(k).blob(v)
    body = w.getvalue()
    return Writer().u32(len(body)).u32(zlib.crc32(body)).raw(body).getvalue()


def decode_wal(data: bytes) -> tuple[list[tuple[int, dict[bytes, bytes | None]]], int]:
    """Return (records, length of the valid prefix)."""
    if not data:
        return [], 0
    if not data.startswith(WAL_MAGIC):
        raise Malformed("bad WAL magic")
    pos = len(WAL_MAGIC)
    out = []
    while pos + 8 <= len(data):
        r = Reader(data, pos)
        n, crc = r.u32(), r.u32()
        body = data[pos + 8:pos + 8 + n]
        if len(body) < n or zlib.crc32(body) != crc:
            break
        br = Reader(body)
        seq, count = br.u64(), br.u32()
        ops: dict[bytes, bytes | None] = {}
        for _ in range(count):
            tag = br.u8()
            k = br.blob()
            ops[k] = br.blob() if tag == OP_PUT else None
        out.append((seq, ops))
        pos += 8 + n
    return out, pos


def encode_checkpoint(seq: int, items, page_size: int) -> bytes:
    threshold = page_size // 4
    head = Writer().raw(CKP_MAGIC).u64(seq)
    entries = Writer()
    overflow = bytearray()
    count = 0
    for k, v in items:
        count += 1
        if len(v) > threshold:
            entries.u8(1).blob(k).u64(len(overflow)).u32(len(v))
            overflow += v
        else:
            entries.u8(0).blob(k).blob(v)
    ebytes = entries.getvalue()
    body = head.u32(count).u64(len(ebytes)).raw(ebytes).raw(bytes(overflow)).getvalue()
    return body + Writer().u32(zlib.crc32(body)).getvalue()


def decode_checkpoint(data: bytes) -> tuple[int, list[tuple[bytes, bytes]]]:
    if len(data) < len(CKP_MAGIC) + 4 or not data.startswith(CKP_MAGIC):
        raise Malformed("bad checkpoint")
    body, crc = data[:-4], Reader(data[-4:]).u32()
    if zlib.crc32(body) != crc:
        raise Malformed("checkpoint checksum mismatch")
    r = Reader(body, len(CKP_MAGIC))
    seq, count, elen = r.u64(), r.u32(), r.u64()
    ostart = r.pos + elen
    items = []
    for _ in range(count):
        flag = r.u8()
        k = r.blob()
        if flag:
            off, n = r.u64(), r.u32()
            items.append((k, bytes(body[ostart + off:ostart + off + n])))
        else:
            items.append((k, r.blob()))
    return seq, items


def prefix_successor(prefix: bytes) -> bytes | None:
    """Smallest byte string greater than every string starting with ``prefix``."""
    p = prefix.rstrip(b"\xff")
    if not p:
        return None
    return p[:-1] + bytes([p[-1] + 1])


# --- store ------------------------------------------------------------------

class Txn:
    OPEN, SYNCED, ABORTED = "OPEN", "SYNCED", "ABORTED"

    def __init__(self, store: "Store", seq: int) -> None:
        self.store = store
        self.seq = seq
        self.ops: dict[bytes, bytes | None] = {}
        self.state = Txn.OPEN
        self.sealed = False

    def put(self, key: bytes, value: bytes) -> None:
        self._check()
        self.ops[key] = value

    def delete(self, key: bytes) -> None:
        self._check()
        self.ops[key] = None

    def _check(self) -> None:
        if self.sealed or self.state != Txn.OPEN:
            raise KeyspaceError("transaction is not open")

    def sync(self, callback: Callable[[], None] | None = None) -> None:
        self.store._seal(self, callback)

    def abort(self) -> None:
        self._check()
        self.state = Txn.ABORTED
        self.store._drop(self)


class Snapshot:
    """Immutable point-in-time view at a transaction boundary."""

    def __init__(self, items: SortedDict) -> None:
        self._items = items

    def get(self, key: bytes) -> bytes | None:
        return self._items.get(key)

    def iterate(self, start: bytes = b"", direction: bool = FORWARD) -> Iterator[tuple[bytes, bytes]]:
        return _iter_sorted(self._items, start, direction)

    def __len__(self) -> int:
        return len(self._items)


def _iter_sorted(d: SortedDict, start: bytes, direction: bool):
    if direction == FORWARD:
        for k in d.irange(minimum=start):
            yield k, d[k]
    else:
        keys = d.irange(maximum=start, reverse=True) if start else reversed(d.keys())
        for k in keys:
            yield k, d[k]


class Store:
    def __init__(self, disk, config: StoreConfig | None = None) -> None:
        self.disk = disk
        self.config = config or StoreConfig()
        self.committed: SortedDict = SortedDict()
        self.sealed: deque[Txn] = deque()
        self.txn: Txn | None = None
        self.failed = False
        self._next_seq = 1
        self._flushed_seq = 0
        self._waiters: list[tuple[int, Callable[[], None]]] = []
        self.checkpoints = 0
        self._recover()

    # recovery

    def _recover(self) -> None:
        base = 0
        if self.disk.exists(CHECKPOINT):
            base, items = decode_checkpoint(self.disk.read(CHECKPOINT))
            self.committed.update(items)
        data = self.disk.read(WAL)
        records, valid = decode_wal(data)
        if not data:
            self.disk.replace(WAL, WAL_MAGIC)
        elif valid < len(data):
            self.disk.truncate(WAL, valid)
        last = base
        for seq, ops in records:
            if seq <= base:
                continue
            self._apply(ops)
            last = seq
        self._next_seq = last + 1
        self._flushed_seq = last

    def _apply(self, ops: dict[bytes, bytes | None]) -> None:
        c = self.committed
        for k, v in ops.items():
            if v is None:
                c.pop(k, None)
            else:
                c[k] = v

    # transactions

    def begin(self) -> Txn:
        self._alive()
        if self.txn is not None:
            raise KeyspaceError("a transaction is already open")
        self.txn = Txn(self, self._next_seq)
        self._next_seq += 1
        return self.txn

    def current(self) -> Txn:
        """The open transaction, starting one if needed."""
        return self.txn if self.txn is not None else self.begin()

    def dirty(self) -> bool:
        return self.txn is not None and bool(self.txn.ops)

    def _drop(self, txn: Txn) -> None:
        if self.txn is txn:
            self.txn = None

    def _seal(self, txn: Txn, callback: Callable[[], None] | None) -> None:
        txn._check()
        self._alive()
        txn.sealed = True
        if self.txn is txn:
            self.txn = None
        self.sealed.append(txn)
        self.disk.append(WAL, encode_wal_record(txn.seq, txn.ops))
        if callback is not None:
            self._waiters.append((txn.seq, callback))
        try:
            self.disk.flush(WAL, lambda: self._flushed(txn.seq))
        except OSError:
            self.failed = True
            raise StoreFailed("sync failed; store is fail-stopped") from None

    def _flushed(self, seq: int) -> None:
        while self.sealed and self.sealed[0].seq <= seq:
            t = self.sealed.popleft()
            self._apply(t.ops)
            t.state = Txn.SYNCED
        self._flushed_seq = max(self._flushed_seq, seq)
        ready = [cb for s, cb in self._waiters if s <= self._flushed_seq]
        self._waiters = [(s, cb) for s, cb in self._waiters if s > self._flushed_seq]
        if not self.sealed and self.disk.size(WAL) > self.config.log_buffer_size:
            self.checkpoint()
        for cb in ready:
            cb()

    def on_durable(self, callback: Callable[[], None]) -> None:
        """Call back once every write made so far is durable."""
        if self.txn is not None and self.txn.ops:
            self._waiters.append((self.txn.seq, callback))
        elif self.sealed:
            self._waiters.append((self.sealed[-1].seq, callback))
        else:
            callback()

    def _alive(self) -> None:
        if self.failed:
            raise StoreFailed("store is fail-stopped")

    def checkpoint(self) -> None:
        """Fold the WAL into a checkpoint file. Requires no sealed txns in flight."""
        assert not self.sealed
        self.disk.replace(CHECKPOINT, encode_checkpoint(
            self._flushed_seq, self.committed.items(), self.config.page_size))
        self.disk.replace(WAL, WAL_MAGIC)
        self.checkpoints += 1

    def install(self, items, keep: Callable[[bytes], bool], callback: Callable[[], None] | None = None) -> None:
        """Atomically replace contents with ``items``, preserving keys for which ``keep`` is true.

        Any open transaction is discarded. In-flight sealed transactions are
        waited for by the caller; this asserts there are none.
        """
        assert not self.sealed
        self.txn = None
        fresh = SortedDict((k, v) for k, v in self.committed.items() if keep(k))
        fresh.update(items)
        self.committed = fresh
        self.checkpoint()
        if callback is not None:
            callback()

    # reads

    def _overlays(self) -> list[dict[bytes, bytes | None]]:
        out = [t.ops for t in self.sealed]
        if self.txn is not None and self.txn.ops:
            out.append(self.txn.ops)
        return out

    def get(self, key: bytes, pending: bool = False) -> bytes | None:
        """Latest synced value, or with ``pending`` the apply path's own view."""
        if pending:
            for ops in reversed(self._overlays()):
                if key in ops:
                    return ops[key]
        return self.committed.get(key)

    def iterate(self, start: bytes = b"", direction: bool = FORWARD,
                pending: bool = False) -> Iterator[tuple[bytes, bytes]]:
        """Yield (key, value) in key order from ``start`` inclusive.

        An empty ``start`` going BACKWARD begins at the largest key.
        """
        overlays = self._overlays() if pending else []
        base = _iter_sorted(self.committed, start, direction)
        if not overlays:
            yield from base
            return
        merged: dict[bytes, bytes | None] = {}
        for ops in overlays:
            merged.update(ops)
        if direction == FORWARD:
            okeys = sorted(k for k in merged if k >= start)
        else:
            okeys = sorted((k for k in merged if not start or k <= start), reverse=True)
        yield from _merge(base, okeys, merged, direction)

    def snapshot(self) -> Snapshot:
        return Snapshot(self.committed.copy())

    @property
    def syncs(self) -> int:
        return self.disk.syncs


def _merge(base, okeys: list[bytes], merged: dict, direction: bool):
    before = (lambda a, b: a < b) if direction == FORWARD else (lambda a, b: a > b)
    i = 0
    for k, v in base:
        while i < len(okeys) and before(okeys[i], k):
            ov = merged[okeys[i]]
            if ov is not None:
                yield okeys[i], ov
            i += 1
        if i < len(okeys) and okeys[i] == k:
            ov = merged[k]
            i += 1
            if ov is not None:
                yield k, ov
            continue
        yield k, v
    while i < len(okeys):
        ov = merged[okeys[i]]
        if ov is not None:
            yield okeys[i], ov
        i += 1
