"""Message transport: a LOSSY datagram class and a RELIABLE ordered-stream class.

``SimTransport`` is the deterministic fault-injecting implementation driven by
virtual time (integer microseconds). ``NetworkTransport`` carries the same
envelopes over UDP and TCP with 4-byte little-endian length framing.
"""

from __future__ import annotations

import asyncio
import enum
import heapq
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .confparse import ParseError, parse_duration, parse_sections
from .core import KeyspaceError

log = logging.getLogger(__name__)

LOSSY_MAX = 64 * 1024
RELIABLE_MAX = (1 << 20) + 64 * 1024
# payloads above this go over the stream channel
LOSSY_THRESHOLD = 60 * 1024


class Channel(enum.IntEnum):
    LOSSY = 0
    RELIABLE = 1


class PayloadTooLarge(KeyspaceError):
    pass


@dataclass(frozen=True, slots=True)
class Envelope:
    src: int
    dst: int
    channel: Channel
    payload: bytes
    send_time: int = 0


@dataclass(frozen=True, slots=True)
class Delivered:
    envelope: Envelope
    time: int


@dataclass(frozen=True, slots=True)
class ConnectionLost:
    node: int  # who is told
    peer: int
    time: int


TransportEvent = Delivered | ConnectionLost


def route(payload: bytes, pinned_reliable: bool = False) -> Channel:
    if pinned_reliable or len(payload) > LOSSY_THRESHOLD:
        return Channel.RELIABLE
    return Channel.LOSSY


def check_size(env: Envelope) -> None:
    limit = LOSSY_MAX if env.channel == Channel.LOSSY else RELIABLE_MAX
    if len(env.payload) > limit:
        raise PayloadTooLarge(f"{len(env.payload)} bytes on {env.channel.name}")


# --- fault schedules --------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    start: int
    end: int
    group_a: frozenset[int]
    group_b: frozenset[int]

    def cuts(self, a: int, b: int, t: int) -> bool:
        if not self.start <= t < self.end:
            return False
        return (a in self.group_a and b in self.group_b) or (a in self.group_b and b in self.group_a)


@dataclass(frozen=True)
class Crash:
    node: int
    at: int
    restart: int | None = None


@dataclass
class FaultSchedule:
    seed: int = 0
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    reorder_prob: float = 0.0
    delay_min: int = 1_000
    delay_max: int = 1_000
    max_dup: int = 2
    partitions: list[Partition] = field(default_factory=list)
    crashes: list[Crash] = field(default_factory=list)

    def __post_init__(self) -> None:
        for p in (self.loss_prob, self.dup_prob, self.reorder_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if not 0 <= self.delay_min <= self.delay_max:
            raise ValueError("delay range must satisfy 0 <= min <= max")
        if self.max_dup < 1:
            raise ValueError("max_dup must be >= 1")
        for p in self.partitions:
            if p.start > p.end or p.group_a & p.group_b:
                raise ValueError(f"ill-formed partition {p}")
        for c in self.crashes:
            if c.restart is not None and c.restart < c.at:
                raise ValueError(f"crash restarts before it happens: {c}")


_TOP_KEYS = {
    "seed": ("seed", int),
    "lossProb": ("loss_prob", float),
    "dupProb": ("dup_prob", float),
    "reorderProb": ("reorder_prob", float),
    "delay.min": ("delay_min", parse_duration),
    "delay.max": ("delay_max", parse_duration),
    "maxDup": ("max_dup", int),
}


def _nodes(text: str) -> frozenset[int]:
    return frozenset(int(x) for x in text.split(",") if x.strip())


def parse_schedule(text: str, extra_sections: Iterable[str] = (),
                   extra_top: Iterable[str] = ()) -> tuple[FaultSchedule, dict]:
    """Parse a schedule file. Returns the schedule and any allowed extra entries.

    Extra top-level keys and whole extra sections are passed through
    uninterpreted (the simulator uses them for workload settings).
    """
    kwargs: dict = {}
    partitions, crashes = [], []
    extras: dict = {}
    extra_top = set(extra_top)
    extra_sections = set(extra_sections)
    for name, body in parse_sections(text):
        try:
            if name == "":
                for key, (value, line) in body.items():
                    if key in _TOP_KEYS:
                        attr, conv = _TOP_KEYS[key]
                        kwargs[attr] = conv(value)
                    elif key in extra_top:
                        extras[key] = value
                    else:
                        raise ParseError(f"unknown key {key!r}", line)
            elif name == "partition":
                _require(body, {"start", "end", "groupA", "groupB"})
                partitions.append(Partition(
                    parse_duration(body["start"][0]), parse_duration(body["end"][0]),
                    _nodes(body["groupA"][0]), _nodes(body["groupB"][0])))
            elif name == "crash":
                _require(body, {"node", "at"}, {"restart"})
                restart = body.get("restart")
                crashes.append(Crash(int(body["node"][0]), parse_duration(body["at"][0]),
                                     parse_duration(restart[0]) if restart else None))
            elif name in extra_sections:
                extras[name] = {k: v for k, (v, _) in body.items()}
            else:
                raise ParseError(f"unknown section [{name}]")
        except ValueError as e:
            raise ParseError(str(e)) from None
    try:
        sched = FaultSchedule(partitions=partitions, crashes=crashes, **kwargs)
    except ValueError as e:
        raise ParseError(str(e)) from None
    return sched, extras


def _require(body: dict, required: set[str], optional: set[str] = frozenset()) -> None:
    missing = required - body.keys()
    if missing:
        raise ParseError(f"missing keys {sorted(missing)}")
    for key, (_, line) in body.items():
        if key not in required and key not in optional:
            raise ParseError(f"unknown key {key!r}", line)


# --- simulated transport ----------------------------------------------------

class _Conn:
    __slots__ = ("epoch", "last", "active")

    def __init__(self) -> None:
        self.epoch = 0
        self.last = 0
        self.active = False


class SimTransport:
    """Deterministic simulated network.

    Events come out of ``poll`` in (time, src, dst, seq) order. RELIABLE
    messages keep per-connection FIFO order; a drop ends the connection epoch,
    discarding everything still in flight on it and signalling ConnectionLost
    to both ends.
    """

    def __init__(self, n: int, schedule: FaultSchedule | None = None,
                 rng: random.Random | None = None) -> None:
        self.n = n
        self.schedule = schedule or FaultSchedule()
        self.rng = rng or random.Random(self.schedule.seed)
        self.partitions: list[Partition] = list(self.schedule.partitions)
        self.down: set[int] = set()
        self._heap: list = []
        self._seq = 0
        self._conns: dict[tuple[int, int], _Conn] = {}
        self.sent = 0
        self.bytes_sent = 0
        self.delivered = 0
        self.dropped = 0

    # control

    def partition(self, interval: tuple[int, int], group_a: Iterable[int], group_b: Iterable[int]) -> None:
        a, b = frozenset(group_a), frozenset(group_b)
        if a & b:
            raise ValueError("partition groups overlap")
        if a | b != frozenset(range(self.n)):
            raise ValueError("partition groups must cover the cluster")
        self.partitions.append(Partition(interval[0], interval[1], a, b))

    def cut(self, a: int, b: int, t: int) -> bool:
        for p in self.partitions:
            if p.cuts(a, b, t):
                return True
        return False

    def set_down(self, node: int, down: bool, now: int) -> None:
        if down:
            self.down.add(node)
        else:
            self.down.discard(node)
        for (s, d), c in self._conns.items():
            if node in (s, d) and c.active:
                c.epoch += 1
                c.active = False
                other = d if s == node else s
                if other not in self.down:
                    self._push(now, node, other, ConnectionLost(other, node, now))

    # data path

    def _push(self, t: int, src: int, dst: int, item) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, src, dst, self._seq, item))

    def _delay(self) -> int:
        s = self.schedule
        d = self.rng.randint(s.delay_min, s.delay_max) if s.delay_max > s.delay_min else s.delay_min
        if s.reorder_prob and self.rng.random() < s.reorder_prob:
            d += self.rng.randint(0, max(s.delay_max, 1))
        return d

    def _blocked(self, a: int, b: int, t: int) -> bool:
        return a in self.down or b in self.down or self.cut(a, b, t)

    def send(self, env: Envelope) -> None:
        check_size(env)
        self.sent += 1
        self.bytes_sent += len(env.payload)
        now = env.send_time
        if env.channel == Channel.RELIABLE:
            key = (env.src, env.dst)
            conn = self._conns.get(key)
            if conn is None:
                conn = self._conns[key] = _Conn()
            if self._blocked(env.src, env.dst, now):
                self.dropped += 1
                self._break(conn, env.src, env.dst, now)
                return
            t = max(now + self._delay(), conn.last)
            conn.last = t
            conn.active = True
            self._push(t, env.src, env.dst, (env, conn.epoch))
            return
        if self._blocked(env.src, env.dst, now):
            self.dropped += 1
            return
        s = self.schedule
        if s.loss_prob and self.rng.random() < s.loss_prob:
            self.dropped += 1
            return
        copies = 1
        for _ in range(s.max_dup - 1):
            if s.dup_prob and self.rng.random() < s.dup_prob:
                copies += 1
        for _ in range(copies):
            self._push(now + self._delay(), env.src, env.dst, (env, None))

    def _break(self, conn: _Conn, src: int, dst: int, now: int) -> None:
        was_active = conn.active
        conn.epoch += 1
        conn.active = False
        if src not in self.down:
            self._push(now, dst, src, ConnectionLost(src, dst, now))
        if was_active and dst not in self.down:
            self._push(now, src, dst, ConnectionLost(dst, src, now))

    def next_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def poll(self, now: int) -> list[TransportEvent]:
        out: list[TransportEvent] = []
        heap = self._heap
        while heap and heap[0][0] <= now:
            t, src, dst, _, item = heapq.heappop(heap)
            if isinstance(item, ConnectionLost):
                if item.node not in self.down:
                    out.append(item)
                continue
            env, epoch = item
            if epoch is not None:
                conn = self._conns[(src, dst)]
                if epoch != conn.epoch:
                    self.dropped += 1
                    continue
                if self._blocked(src, dst, t):
                    self.dropped += 1
                    self._break(conn, src, dst, t)
                    continue
            elif self._blocked(src, dst, t):
                self.dropped += 1
                continue
            self.delivered += 1
            out.append(Delivered(env, t))
        return out


# --- real network -----------------------------------------------------------

_FRAME = struct.Struct("<I")
_SENDER = struct.Struct("<I")


def frame(payload: bytes) -> bytes:
    return _FRAME.pack(len(payload)) + payload


async def read_frame(reader: asyncio.StreamReader, limit: int = RELIABLE_MAX) -> bytes:
    header = await reader.readexactly(4)
    (n,) = _FRAME.unpack(header)
    if n > limit:
        raise PayloadTooLarge(f"frame of {n} bytes")
    return await reader.readexactly(n)


class _Datagram(asyncio.DatagramProtocol):
    def __init__(self, owner: "NetworkTransport") -> None:
        self.owner = owner

    def datagram_received(self, data: bytes, addr) -> None:
        if len(data) < 4:
            return
        (src,) = _SENDER.unpack(data[:4])
        self.owner._deliver(src, Channel.LOSSY, data[4:])


class NetworkTransport:
    """UDP for LOSSY, TCP for RELIABLE. Incoming events go to ``on_event``.

    Each outgoing TCP connection starts with a 4-byte sender id, then frames.
    """

    def __init__(self, node_id: int, addresses: list[tuple[str, int]],
                 on_event: Callable[[TransportEvent], None],
                 clock: Callable[[], int]) -> None:
        self.node_id = node_id
        self.addresses = addresses
        self.on_event = on_event
        self.clock = clock
        self._udp: asyncio.DatagramTransport | None = None
        self._server: asyncio.base_events.Server | None = None
        self._out: dict[int, asyncio.Queue] = {}
        self._tasks: set[asyncio.Task] = set()

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        host, port = self.addresses[self.node_id]
        self._udp, _ = await loop.create_datagram_endpoint(
            lambda: _Datagram(self), local_addr=(host, port))
        self._server = await asyncio.start_server(self._accept, host, port)

    async def stop(self) -> None:
        tasks = list(self._tasks)
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        if self._udp is not None:
            self._udp.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    def _spawn(self, coro) -> None:
        t = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(t)
        t.add_done_callback(self._tasks.discard)

    def _deliver(self, src: int, channel: Channel, payload: bytes) -> None:
        env = Envelope(src, self.node_id, channel, payload, 0)
        self.on_event(Delivered(env, self.clock()))

    def send(self, env: Envelope) -> None:
        check_size(env)
        if env.channel == Channel.LOSSY:
            if self._udp is not None:
                self._udp.sendto(_SENDER.pack(self.node_id) + env.payload, self.addresses[env.dst])
            return
        q = self._out.get(env.dst)
        if q is None:
            q = self._out[env.dst] = asyncio.Queue()
            self._spawn(self._writer(env.dst, q))
        q.put_nowait(env.payload)

    async def _writer(self, dst: int, q: asyncio.Queue) -> None:
        host, port = self.addresses[dst]
        writer = None
        try:
            _, writer = await asyncio.open_connection(host, port)
            writer.write(_SENDER.pack(self.node_id))
            while True:
                payload = await q.get()
                writer.write(frame(payload))
                await writer.drain()
        except (OSError, asyncio.IncompleteReadError):
            self.on_event(ConnectionLost(self.node_id, dst, self.clock()))
        finally:
            if self._out.get(dst) is q:
                del self._out[dst]
            if writer is not None:
                writer.close()

    async def _accept(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        self._tasks.add(task)
        src = None
        try:
            (src,) = _SENDER.unpack(await reader.readexactly(4))
            while True:
                payload = await read_frame(reader)
                self._deliver(src, Channel.RELIABLE, payload)
        except (OSError, asyncio.IncompleteReadError, PayloadTooLarge):
            if src is not None:
                self.on_event(ConnectionLost(self.node_id, src, self.clock()))
        except asyncio.CancelledError:
            pass
        finally:
            self._tasks.discard(task)
            writer.close()
