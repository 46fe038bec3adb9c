"""A gap-free log of decided batches, one Paxos instance per slot.

Only the lease holder proposes. Client commands queue up while an instance is
in flight and are packed into the next one (up to 1 MiB). After one
successful prepare the master keeps its ballot and goes straight to phase 2
for following instances. Executed commands are left in the store's open
transaction and become durable together with the acceptor write of the next
instance; an idle timer flushes them when no next instance comes.

Lagging replicas fetch missing instances from a peer's in-memory tail cache,
or copy a whole snapshot when the cache no longer reaches back far enough.
"""

from __future__ import annotations

import hashlib
import struct
from collections import deque
from dataclasses import dataclass
from typing import Callable

from . import paxos
from .core import (
    BATCH_HEADER, MAX_BATCH, Command, CommandResult, KeyspaceError, Malformed, Reader, Status, Writer,
    command_frame_size, decode_batch, encode_batch,
)
from .kvdb import SYS_APPLIED, KeyspaceDB, is_system_key
from .paxos import (
    SYS_ACCEPTED, SYS_PROMISED, Acceptor, ConflictingDecision, Learn, Phase, PrepareRequest, PrepareResponse,
    Proposer, ProposeRequest, ProposeResponse, Outcome,
)
from .storage import Store
from .transport import Channel

FAMILY = 0x03
TAIL_REQ, TAIL_RESP, TAIL_UNAVAILABLE, SNAP_REQ, SNAP_CHUNK = 1, 2, 3, 4, 5
SNAPSHOT_CHUNK = 64 * 1024
TAIL_RESPONSE_BYTES = 1 << 20

T_FLUSH = "log.flush"
T_PAXOS = "log.paxos"
T_RETRY = "log.retry"
T_STATUS = "log.status"
T_CATCHUP = "log.catchup"


class TailUnavailable(KeyspaceError):
    pass


@dataclass
class LogConfig:
    batching: bool = True
    chaining: bool = True
    multipaxos: bool = True
    tail_entries: int = 10_000
    tail_bytes: int = 64 << 20
    idle_flush: int = 100_000
    paxos_timeout: int = 1_000_000
    backoff_min: int = 50_000
    backoff_max: int = 200_000
    status_period: int = 1_000_000
    catchup_timeout: int = 5_000_000


@dataclass
class LogMetrics:
    rounds: int = 0          # instances this node proposed a value for
    roundtrips: int = 0      # prepare/propose broadcasts, retransmissions excluded
    retransmits: int = 0
    decided: int = 0         # instances decided by this node's proposer
    tail_catchups: int = 0
    full_copies: int = 0


# --- catchup messages -------------------------------------------------------

@dataclass(frozen=True, slots=True)
class TailRequest:
    sender: int
    start: int


@dataclass(frozen=True, slots=True)
class TailResponse:
    sender: int
    start: int
    entries: tuple[tuple[int, bytes], ...]
    more: bool


@dataclass(frozen=True, slots=True)
class TailMissing:
    sender: int
    start: int
    oldest: int


@dataclass(frozen=True, slots=True)
class SnapshotRequest:
    sender: int
    snap_id: int


@dataclass(frozen=True, slots=True)
class SnapshotChunk:
    sender: int
    snap_id: int
    seq: int
    marker: int
    last: bool
    data: bytes


def encode(m) -> bytes:
    w = Writer().u8(FAMILY)
    if isinstance(m, TailRequest):
        w.u8(TAIL_REQ).u32(m.sender).u64(m.start)
    elif isinstance(m, TailResponse):
        w.u8(TAIL_RESP).u32(m.sender).u64(m.start).u32(len(m.entries))
        for inst, batch in m.entries:
            w.u64(inst).blob(batch)
        w.u8(int(m.more))
    elif isinstance(m, TailMissing):
        w.u8(TAIL_UNAVAILABLE).u32(m.sender).u64(m.start).u64(m.oldest)
    elif isinstance(m, SnapshotRequest):
        w.u8(SNAP_REQ).u32(m.sender).u64(m.snap_id)
    elif isinstance(m, SnapshotChunk):
        w.u8(SNAP_CHUNK).u32(m.sender).u64(m.snap_id).u32(m.seq).u64(m.marker).u8(int(m.last)).blob(m.data)
    else:
        raise TypeError(m)
    return w.getvalue()


def decode(b: bytes):
    r = Reader(b)
    if r.u8() != FAMILY:
        raise Malformed("not a catchup message")
    t, sender = r.u8(), r.u32()
    if t == TAIL_REQ:
        m = TailRequest(sender, r.u64())
    elif t == TAIL_RESP:
        start = r.u64()
        entries = tuple((r.u64(), r.blob()) for _ in range(r.u32()))
        m = TailResponse(sender, start, entries, bool(r.u8()))
    elif t == TAIL_UNAVAILABLE:
        m = TailMissing(sender, r.u64(), r.u64())
    elif t == SNAP_REQ:
        m = SnapshotRequest(sender, r.u64())
    elif t == SNAP_CHUNK:
        m = SnapshotChunk(sender, r.u64(), r.u32(), r.u64(), bool(r.u8()), r.blob())
    else:
        raise Malformed(f"unknown catchup message type {t}")
    r.done()
    return m


def encode_items(items) -> bytes:
    w = Writer()
    n = 0
    body = Writer()
    for k, v in items:
        body.blob(k).blob(v)
        n += 1
    return w.u32(n).raw(body.getvalue()).getvalue()


def decode_items(data: bytes) -> list[tuple[bytes, bytes]]:
    r = Reader(data)
    out = [(r.blob(), r.blob()) for _ in range(r.u32())]
    r.done()
    return out


def digest(value: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(value, digest_size=8).digest(), "little")


_U64 = struct.Struct("<Q")


def _snapshot_key(k: bytes) -> bool:
    """Keys that travel in a full copy: user data and the duplicate table."""
    return not is_system_key(k) or k.startswith(b"\x00dedup/")


# --- the log ----------------------------------------------------------------

Completion = Callable[[CommandResult], None]


class ReplicatedLog:
    """Per-node replicated log driver.

    ``host`` supplies ``node_id``, ``cluster_size``, ``now()``,
    ``send(dst, channel, payload)``, ``set_timer``, ``cancel_timer``,
    ``random_delay``, ``record(kind, *fields)``, ``is_master()``,
    ``master_hint()`` and ``on_ready()``.
    """

    def __init__(self, host, store: Store, db: KeyspaceDB, config: LogConfig | None = None) -> None:
        self.host = host
        self.id = host.node_id
        self.n = host.cluster_size
        self.store = store
        self.db = db
        self.cfg = config or LogConfig()
        self.acceptor = Acceptor(self.id, store)
        raw = store.get(SYS_APPLIED)
        self.applied = _U64.unpack(raw)[0] if raw else 0
        self.highest_known = self.applied
        self.learned: dict[int, bytes] = {}
        self.cache: deque[tuple[int, bytes]] = deque()
        self.cache_bytes = 0
        self.proposer = Proposer(self.id, self.n)
        self.leading = False
        self.ready = False
        self.queue: deque[tuple[Command, Completion]] = deque()
        self.inflight: list[tuple[Command, Completion]] | None = None
        self.inflight_value: bytes | None = None
        self.retry_pending = False
        self.flush_armed = False
        self.catchup: dict | None = None
        self._snap_seq = 0
        self.metrics = LogMetrics()

    def start(self) -> None:
        self.host.set_timer(T_STATUS, self.host.random_delay(0, self.cfg.status_period))

    def up_to_date(self) -> bool:
        return self.applied >= self.highest_known

    # --- transport plumbing

    def _send(self, dst: int, msg, channel: Channel) -> None:
        payload = paxos.encode(msg) if msg.__class__.__module__ == paxos.__name__ else encode(msg)
        self.host.send(dst, channel, payload)

    def _broadcast(self, msg, channel: Channel) -> None:
        payload = paxos.encode(msg)
        for dst in range(self.n):
            if dst != self.id:
                self.host.send(dst, channel, payload)

    def on_message(self, payload: bytes) -> None:
        if payload[0] == paxos.FAMILY:
            m = paxos.decode(payload)
            if isinstance(m, PrepareRequest):
                self.handle_prepare(m, lambda r, s=m.sender: self._send(s, r, Channel.LOSSY))
            elif isinstance(m, ProposeRequest):
                self.handle_propose(m, lambda r, s=m.sender: self._send(s, r, Channel.LOSSY))
            elif isinstance(m, PrepareResponse):
                self._on_prepare_response(m)
            elif isinstance(m, ProposeResponse):
                self._on_propose_response(m)
            elif isinstance(m, Learn):
                self.learn(m.instance, m.value, m.sender)
            elif isinstance(m, paxos.Status):
                self._on_status(m)
        else:
            m = decode(payload)
            if isinstance(m, TailRequest):
                self._serve_tail(m)
            elif isinstance(m, TailResponse):
                self._on_tail(m)
            elif isinstance(m, TailMissing):
                self._on_tail_missing(m)
            elif isinstance(m, SnapshotRequest):
                self._serve_snapshot(m)
            elif isinstance(m, SnapshotChunk):
                self._on_chunk(m)

    def on_connection_lost(self, peer: int) -> None:
        if self.catchup is not None and self.catchup["peer"] == peer:
            self._abort_catchup()

    def on_timer(self, key: str) -> None:
        if key == T_FLUSH:
            self.flush_armed = False
            if self.store.dirty():
                self.store.current().sync()
        elif key == T_PAXOS:
            self._retransmit()
        elif key == T_RETRY:
            self.retry_pending = False
            self._start_prepare()
        elif key == T_STATUS:
            self.host.set_timer(T_STATUS, self.cfg.status_period)
            self._broadcast(paxos.Status(self.id, self.applied, self.leading), Channel.LOSSY)
            if not self.up_to_date():
                self._maybe_catchup(self._catchup_source())
        elif key == T_CATCHUP:
            self._abort_catchup()
            self._maybe_catchup(self._catchup_source())

    # --- acceptor side

    def _respond(self, resp, changed: bool, reply) -> None:
        if changed:
            self.store.current().sync(lambda: reply(resp))
        elif resp.outcome == Outcome.REJECTED:
            reply(resp)
        else:
            self.store.on_durable(lambda: reply(resp))

    def handle_prepare(self, m: PrepareRequest, reply) -> None:
        self._note_known(m.instance - 1)
        if m.instance <= self.applied:
            self._tell_decided(m.sender, m.instance)
            return
        resp, changed = self.acceptor.on_prepare(m)
        self._respond(resp, changed, reply)
        if not self.up_to_date():
            self._maybe_catchup(m.sender)

    def handle_propose(self, m: ProposeRequest, reply) -> None:
        self._note_known(m.instance - 1)
        if m.instance <= self.applied:
            self._tell_decided(m.sender, m.instance)
            return
        resp, changed = self.acceptor.on_propose(m)
        self._respond(resp, changed, reply)
        if not self.up_to_date():
            self._maybe_catchup(m.sender)

    def _tell_decided(self, dst: int, instance: int) -> None:
        if dst == self.id:
            return
        value = self.cached(instance)
        if value is not None:
            self._send(dst, Learn(self.id, instance, value), Channel.RELIABLE)
        else:
            self._send(dst, paxos.Status(self.id, self.applied, self.leading), Channel.LOSSY)

    # --- learning and applying

    def _note_known(self, instance: int) -> None:
        if instance > self.highest_known:
            self.highest_known = instance

    def cached(self, instance: int) -> bytes | None:
        if not self.cache:
            return None
        i = instance - self.cache[0][0]
        if 0 <= i < len(self.cache):
            return self.cache[i][1]
        return None

    def learn(self, instance: int, value: bytes, src: int | None = None) -> None:
        """Record a decision. Conflicting values for one instance are fatal."""
        if instance <= self.applied:
            prior = self.cached(instance)
            if prior is not None and prior != value:
                raise ConflictingDecision(f"node {self.id} instance {instance}")
            return
        prior = self.learned.get(instance)
        if prior is not None:
            if prior != value:
                raise ConflictingDecision(f"node {self.id} instance {instance}")
            return
        self.learned[instance] = value
        self.host.record("decide", instance, digest(value))
        self._note_known(instance)
        while self.applied + 1 in self.learned:
            self._apply(self.applied + 1, self.learned.pop(self.applied + 1))
        if not self.up_to_date() and src is not None:
            self._maybe_catchup(src)
        self._after_progress()

    def _apply(self, k: int, value: bytes) -> None:
        cmds = decode_batch(value)
        results = []
        for idx, c in enumerate(cmds):
            res = self.db.execute(c)
            results.append(res)
            if c.client_id and not res.duplicate:
                self.host.record("effect", c.client_id, c.request_seq, k, idx)
        self.store.current().put(SYS_APPLIED, _U64.pack(k))
        self.acceptor.forget(k)
        self.applied = k
        self._cache_put(k, value)
        self.host.record("apply", k, digest(value))
        if self.inflight is not None and value == self.inflight_value:
            pairs = list(zip(self.inflight, results))
            self.inflight = self.inflight_value = None
            self.store.on_durable(lambda: self._complete(pairs))
        if not self.cfg.chaining:
            self.store.current().sync()
        else:
            # re-armed on every apply so it only fires when the log goes quiet
            self.flush_armed = True
            self.host.set_timer(T_FLUSH, self.cfg.idle_flush)

    @staticmethod
    def _complete(pairs) -> None:
        for (_, cb), res in pairs:
            cb(res)

    def _cache_put(self, k: int, value: bytes) -> None:
        self.cache.append((k, value))
        self.cache_bytes += len(value)
        while self.cache and (len(self.cache) > self.cfg.tail_entries or self.cache_bytes > self.cfg.tail_bytes):
            _, v = self.cache.popleft()
            self.cache_bytes -= len(v)

    # --- proposer side (master only)

    def become_master(self) -> None:
        if self.leading:
            return
        self.leading = True
        self.ready = False
        self.retry_pending = False
        self._start_prepare()

    def step_down(self) -> None:
        if not self.leading:
            return
        self.leading = False
        self.ready = False
        self.proposer.phase = Phase.IDLE
        self.host.cancel_timer(T_PAXOS)
        self.host.cancel_timer(T_RETRY)
        self.retry_pending = False
        inflight, self.inflight, self.inflight_value = self.inflight or [], None, None
        queued, self.queue = list(self.queue), deque()
        for _, cb in inflight:
            cb(CommandResult(Status.UNKNOWN_OUTCOME))
        for _, cb in queued:
            cb(CommandResult(Status.UNAVAILABLE))

    def submit(self, cmd: Command, cb: Completion) -> None:
        if not self.leading:
            cb(CommandResult(Status.NOT_MASTER))
            return
        if BATCH_HEADER + command_frame_size(cmd) > MAX_BATCH:
            cb(CommandResult(Status.MALFORMED))
            return
        self.queue.append((cmd, cb))
        self._maybe_propose()

    def _start_prepare(self) -> None:
        if not self.leading or self.retry_pending:
            return
        req = self.proposer.prepare(self.applied + 1)
        self.metrics.roundtrips += 1
        self._broadcast(req, Channel.LOSSY)
        self.host.set_timer(T_PAXOS, self.cfg.paxos_timeout)
        self.handle_prepare(req, self._on_prepare_response)

    def _retry_later(self) -> None:
        self.host.cancel_timer(T_PAXOS)
        if self.leading and not self.retry_pending:
            self.retry_pending = True
            self.host.set_timer(T_RETRY, self.host.random_delay(self.cfg.backoff_min, self.cfg.backoff_max))

    def _on_prepare_response(self, m: PrepareResponse) -> None:
        if not self.leading:
            return
        r = self.proposer.on_prepare_response(m)
        if r == "prepared":
            self.host.cancel_timer(T_PAXOS)
            self._maybe_propose()
        elif r == "rejected":
            self._retry_later()

    def _pack(self) -> None:
        cmds: list[tuple[Command, Completion]] = []
        size = BATCH_HEADER
        while self.queue:
            c, cb = self.queue[0]
            fs = command_frame_size(c)
            if cmds and (not self.cfg.batching or size + fs > MAX_BATCH):
                break
            self.queue.popleft()
            cmds.append((c, cb))
            size += fs
        self.inflight = cmds
        self.inflight_value = encode_batch([c for c, _ in cmds])

    def _maybe_propose(self) -> None:
        p = self.proposer
        if not self.leading or self.retry_pending:
            return
        if p.phase == Phase.IDLE:
            if self.queue or self.inflight:
                self._start_prepare()
            return
        if p.phase != Phase.PREPARED:
            return
        if p.instance != self.applied + 1:
            self._start_prepare()
            return
        if not self.host.is_master():
            return
        if p.instance in p.recovered:
            value = p.recovered[p.instance][1]
        else:
            if not self.ready and not p.pending_recovery():
                self.ready = True
                self.host.on_ready()
            if self.inflight is None:
                if not self.queue:
                    return
                self._pack()
            value = self.inflight_value
        req = p.propose(value)
        self.metrics.rounds += 1
        self.metrics.roundtrips += 1
        self.host.record("propose", req.instance, int(self.host.is_master()))
        self._broadcast(req, Channel.RELIABLE)
        self.host.set_timer(T_PAXOS, self.cfg.paxos_timeout)
        self.handle_propose(req, self._on_propose_response)

    def _on_propose_response(self, m: ProposeResponse) -> None:
        if not self.leading:
            return
        p = self.proposer
        r = p.on_propose_response(m)
        if r == "decided":
            self.host.cancel_timer(T_PAXOS)
            inst, value = p.instance, p.value
            self.metrics.decided += 1
            self._broadcast(Learn(self.id, inst, value), Channel.RELIABLE)
            p.advance(self.cfg.multipaxos)
            self.learn(inst, value)
            self._maybe_propose()
        elif r == "rejected":
            self._retry_later()

    def _after_progress(self) -> None:
        p = self.proposer
        if self.leading and p.phase in (Phase.PREPARING, Phase.PREPARED, Phase.PROPOSING) \
                and p.instance <= self.applied:
            # someone else's decision overtook the round in flight
            self.host.cancel_timer(T_PAXOS)
            p.phase = Phase.IDLE
            self._start_prepare()

    def _retransmit(self) -> None:
        p = self.proposer
        if not self.leading:
            return
        if p.phase == Phase.PREPARING:
            msg, done, ch = PrepareRequest(self.id, p.instance, p.ballot), p.promises, Channel.LOSSY
        elif p.phase == Phase.PROPOSING:
            msg, done, ch = ProposeRequest(self.id, p.instance, p.ballot, p.value), p.accepts, Channel.RELIABLE
        else:
            return
        payload = paxos.encode(msg)
        for dst in range(self.n):
            if dst != self.id and dst not in done:
                self.host.send(dst, ch, payload)
        self.metrics.retransmits += 1
        self.host.set_timer(T_PAXOS, self.cfg.paxos_timeout)

    # --- catchup

    def _on_status(self, m: paxos.Status) -> None:
        self._note_known(m.applied)
        if self.applied < m.applied:
            self._maybe_catchup(m.sender)

    def _catchup_source(self) -> int | None:
        hint = self.host.master_hint()
        if hint is not None and hint != self.id:
            return hint
        others = [i for i in range(self.n) if i != self.id]
        return others[self.host.random_delay(0, len(others) - 1)] if others else None

    def _maybe_catchup(self, peer: int | None) -> None:
        if peer is None or peer == self.id or self.catchup is not None or self.up_to_date():
            return
        self.catchup = {"kind": "tail", "peer": peer}
        self.metrics.tail_catchups += 1
        self._send(peer, TailRequest(self.id, self.applied + 1), Channel.RELIABLE)
        self.host.set_timer(T_CATCHUP, self.cfg.catchup_timeout)

    def _abort_catchup(self) -> None:
        self.catchup = None
        self.host.cancel_timer(T_CATCHUP)

    def catchup_from_tail(self, start: int) -> list[tuple[int, bytes]]:
        """Contiguous decided instances from ``start`` that this node can serve."""
        if start > self.applied:
            return []
        if not self.cache or start < self.cache[0][0]:
            raise TailUnavailable(start)
        i = start - self.cache[0][0]
        return [self.cache[j] for j in range(i, len(self.cache))]

    def _serve_tail(self, m: TailRequest) -> None:
        try:
            entries = self.catchup_from_tail(m.start)
        except TailUnavailable:
            oldest = self.cache[0][0] if self.cache else self.applied + 1
            self._send(m.sender, TailMissing(self.id, m.start, oldest), Channel.RELIABLE)
            return
        out, size = [], 0
        for inst, batch in entries:
            if out and size + len(batch) > TAIL_RESPONSE_BYTES:
                break
            out.append((inst, batch))
            size += len(batch)
        more = len(out) < len(entries)
        self._send(m.sender, TailResponse(self.id, m.start, tuple(out), more), Channel.RELIABLE)

    def _on_tail(self, m: TailResponse) -> None:
        for inst, batch in m.entries:
            self.learn(inst, batch)
        c = self.catchup
        if c is None or c["kind"] != "tail" or c["peer"] != m.sender:
            return
        if m.more:
            self._send(m.sender, TailRequest(self.id, self.applied + 1), Channel.RELIABLE)
            self.host.set_timer(T_CATCHUP, self.cfg.catchup_timeout)
            return
        self._abort_catchup()
        if m.entries and not self.up_to_date():
            self._maybe_catchup(m.sender)

    def _on_tail_missing(self, m: TailMissing) -> None:
        c = self.catchup
        if c is None or c["kind"] != "tail" or c["peer"] != m.sender:
            return
        self.catchup_full_copy(self._catchup_source() if self.host.master_hint() is not None else m.sender)

    def catchup_full_copy(self, source: int) -> None:
        self._snap_seq += 1
        snap_id = (self.id << 32) | self._snap_seq
        self.catchup = {"kind": "snap", "peer": source, "id": snap_id, "chunks": [], "next": 0}
        self.metrics.full_copies += 1
        self._send(source, SnapshotRequest(self.id, snap_id), Channel.RELIABLE)
        self.host.set_timer(T_CATCHUP, self.cfg.catchup_timeout)

    def _serve_snapshot(self, m: SnapshotRequest) -> None:
        snap = self.store.snapshot()
        raw = snap.get(SYS_APPLIED)
        marker = _U64.unpack(raw)[0] if raw else 0
        data = encode_items((k, v) for k, v in snap.iterate() if _snapshot_key(k))
        chunks = [data[i:i + SNAPSHOT_CHUNK] for i in range(0, len(data), SNAPSHOT_CHUNK)] or [b""]
        for seq, chunk in enumerate(chunks):
            msg = SnapshotChunk(self.id, m.snap_id, seq, marker, seq == len(chunks) - 1, chunk)
            self._send(m.sender, msg, Channel.RELIABLE)

    def _on_chunk(self, m: SnapshotChunk) -> None:
        c = self.catchup
        if c is None or c["kind"] != "snap" or c["id"] != m.snap_id or c["peer"] != m.sender:
            return
        if m.seq != c["next"]:
            self._abort_catchup()
            return
        c["chunks"].append(m.data)
        c["next"] += 1
        self.host.set_timer(T_CATCHUP, self.cfg.catchup_timeout)
        if m.last:
            self._install(m.marker, b"".join(c["chunks"]), m.sender)

    def _install(self, marker: int, data: bytes, source: int) -> None:
        if marker <= self.applied:
            self._abort_catchup()
            self._maybe_catchup(source)
            return
        if self.store.sealed:
            self.store.on_durable(lambda: self._install(marker, data, source))
            return
        items = decode_items(data)
        items.append((SYS_APPLIED, _U64.pack(marker)))

        def keep(k: bytes) -> bool:
            if k == SYS_PROMISED:
                return True
            if k.startswith(SYS_ACCEPTED):
                return struct.unpack(">Q", k[len(SYS_ACCEPTED):])[0] > marker
            return False

        self.store.install(items, keep)
        self.acceptor.accepted = {i: v for i, v in self.acceptor.accepted.items() if i > marker}
        self.applied = marker
        self.learned = {i: v for i, v in self.learned.items() if i > marker}
        self.cache.clear()
        self.cache_bytes = 0
        self.flush_armed = False
        self.host.cancel_timer(T_FLUSH)
        self.host.record("snapshot", marker)
        self._abort_catchup()
        while self.applied + 1 in self.learned:
            self._apply(self.applied + 1, self.learned.pop(self.applied + 1))
        if not self.up_to_date():
            self._maybe_catchup(source)
        self._after_progress()
