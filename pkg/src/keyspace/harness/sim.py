"""Deterministic whole-cluster simulator.

Everything runs on one thread against a global virtual clock in integer
microseconds. Each node sees a local clock ``global * (1e6 + ppm) // 1e6``.
Messages go through ``SimTransport``; disks are ``MemDisk`` instances whose
flushes complete after a fixed latency. Every interesting step is appended to
``world.events`` as ``(time, node, kind, *fields)``; the checkers read only
that log.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable

from ..core import Status
from ..paxos import ConflictingDecision
from ..server.node import Node, NodeSettings
from ..server.protocol import Op, Request, Response, WRITE_OPS
from ..storage import MemDisk, Store, StoreConfig
from ..transport import ConnectionLost, Envelope, FaultSchedule, SimTransport

CLIENT = -1
_PPM = 1_000_000


@dataclass
class SimConfig:
    n: int = 3
    seed: int = 0
    schedule: FaultSchedule = field(default_factory=FaultSchedule)
    settings: NodeSettings = field(default_factory=NodeSettings)
    store: StoreConfig = field(default_factory=lambda: StoreConfig(log_buffer_size=4 << 20))
    sync_latency: int = 10_000
    max_skew_ppm: int = 0
    skews: tuple[int, ...] | None = None
    record_traffic: bool = True


def fnv1a64(data: bytes, h: int = 0xCBF29CE484222325) -> int:
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def event_digest(events) -> int:
    """64-bit FNV-1a over the canonical text form of the event log."""
    h = 0xCBF29CE484222325
    for ev in events:
        h = fnv1a64(repr(ev).encode() + b"\n", h)
    return h


class SimEnv:
    """What one node incarnation sees of the world."""

    def __init__(self, world: "SimWorld", node: int, incarnation: int) -> None:
        self.world = world
        self.node = node
        self.incarnation = incarnation
        self.epoch = incarnation
        self.rng = random.Random(world.rng.getrandbits(64))

    def alive(self) -> bool:
        return self.world.incarnation[self.node] == self.incarnation and self.world.nodes[self.node] is not None

    def now(self) -> int:
        return self.world.local(self.node)

    def send(self, dst: int, channel, payload: bytes) -> None:
        w = self.world
        if not self.alive():
            return
        if w.cfg.record_traffic:
            w.events.append((w.time, self.node, "send", dst, int(channel), len(payload)))
        w.transport.send(Envelope(self.node, dst, channel, payload, w.time))

    def set_timer(self, key: str, delay: int) -> None:
        self.world.set_timer(self.node, self.incarnation, key, delay)

    def cancel_timer(self, key: str) -> None:
        self.world.timers.pop((self.node, key), None)

    def record(self, kind: str, *fields) -> None:
        w = self.world
        if kind == "lease":
            fields = (w.to_global(self.node, fields[0]),)
        w.events.append((w.time, self.node, kind) + fields)


def node_factory(world: "SimWorld", env: SimEnv, i: int, restarted: bool):
    store = Store(world.disks[i], world.cfg.store)
    return Node(env, i, world.cfg.n, store, world.cfg.settings, restarted)


class SimWorld:
    def __init__(self, cfg: SimConfig, factory: Callable | None = None) -> None:
        self.cfg = cfg
        self.factory = factory or node_factory
        self.rng = random.Random(cfg.seed)
        n = cfg.n
        self.time = 0
        self._heap: list = []
        self._seq = 0
        self.timers: dict[tuple[int, str], int] = {}
        self.events: list[tuple] = []
        self.violation: tuple[str, str] | None = None
        self.transport = SimTransport(n, cfg.schedule, random.Random(self.rng.getrandbits(64)))
        if cfg.skews is not None:
            self.skews = list(cfg.skews)
        else:
            m = cfg.max_skew_ppm
            self.skews = [self.rng.randint(-m, m) if m else 0 for _ in range(n)]
        self.disks = [MemDisk(schedule=self._disk_scheduler(), latency=cfg.sync_latency) for _ in range(n)]
        self.incarnation = [0] * n
        self.nodes: list = [None] * n
        self.envs: list[SimEnv | None] = [None] * n
        self.crash_rng = random.Random(self.rng.getrandbits(64))
        for c in cfg.schedule.crashes:
            self.at(c.at, lambda i=c.node: self.crash(i))
            if c.restart is not None:
                self.at(c.restart, lambda i=c.node: self.restart(i))
        for i in range(n):
            self._boot(i, restarted=False)

    # --- clocks

    def local(self, i: int, t: int | None = None) -> int:
        return (self.time if t is None else t) * (_PPM + self.skews[i]) // _PPM

    def to_global(self, i: int, local: int) -> int:
        """Earliest global instant at which node ``i``'s clock reads ``local``."""
        m = _PPM + self.skews[i]
        return -(-local * _PPM // m)

    # --- scheduling

    def at(self, t: int, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (max(t, self.time), self._seq, fn))

    def _disk_scheduler(self):
        return lambda delay, cb: self.at(self.time + delay, cb)

    def set_timer(self, i: int, inc: int, key: str, delay: int) -> None:
        target = self.to_global(i, self.local(i) + delay)
        self._seq += 1
        token = self._seq
        self.timers[(i, key)] = token
        heapq.heappush(self._heap, (max(target, self.time), token, ("timer", i, inc, key, token)))

    # --- node lifecycle

    def _boot(self, i: int, restarted: bool) -> None:
        env = SimEnv(self, i, self.incarnation[i])
        self.envs[i] = env
        node = self.factory(self, env, i, restarted)
        self.nodes[i] = node
        node.start()

    def crash(self, i: int) -> None:
        node = self.nodes[i]
        if node is None:
            return
        node.crash()
        self.nodes[i] = None
        self.incarnation[i] += 1
        self.transport.set_down(i, True, self.time)
        self.disks[i].crash(self.crash_rng)
        self.events.append((self.time, i, "crash"))

    def restart(self, i: int) -> None:
        if self.nodes[i] is not None:
            return
        self.incarnation[i] += 1
        self.transport.set_down(i, False, self.time)
        self._boot(i, restarted=True)
        applied = getattr(getattr(self.nodes[i], "log", None), "applied", 0)
        self.events.append((self.time, i, "restart", applied))

    # --- main loop

    def step(self) -> bool:
        """Process everything due at the next instant; False when idle."""
        th = self._heap[0][0] if self._heap else None
        tt = self.transport.next_time()
        if th is None and tt is None:
            return False
        if tt is not None and (th is None or tt < th):
            self.time = tt
            for ev in self.transport.poll(tt):
                self._deliver(ev)
            return True
        t, _, item = heapq.heappop(self._heap)
        self.time = t
        if type(item) is tuple:
            _, i, inc, key, token = item
            if self.timers.get((i, key)) != token or self.incarnation[i] != inc:
                return True
            del self.timers[(i, key)]
            node = self.nodes[i]
            if node is not None:
                node.on_timer(key)
        else:
            item()
        return True

    def _deliver(self, ev) -> None:
        if isinstance(ev, ConnectionLost):
            node = self.nodes[ev.node]
            if node is not None:
                node.on_connection_lost(ev.peer)
            return
        e = ev.envelope
        node = self.nodes[e.dst]
        if node is None:
            return
        if self.cfg.record_traffic:
            self.events.append((self.time, e.dst, "recv", e.src, int(e.channel), len(e.payload)))
        node.on_message(e.src, e.payload)

    def run(self, until: int) -> bool:
        """Advance to ``until``. Returns False if a fatal invariant tripped."""
        try:
            while self.violation is None:
                th = self._heap[0][0] if self._heap else None
                tt = self.transport.next_time()
                nxt = th if tt is None else (tt if th is None else min(th, tt))
                if nxt is None or nxt > until:
                    break
                self.step()
        except ConflictingDecision as exc:
            self.violation = ("agreement", str(exc))
            self.events.append((self.time, CLIENT, "violation", "agreement", str(exc)))
        self.time = max(self.time, until)
        return self.violation is None

    def run_until(self, pred: Callable[[], bool], limit: int, step: int = 100_000) -> bool:
        t = self.time
        while not pred():
            if self.time >= limit or self.violation is not None:
                return False
            t = min(limit, self.time + step)
            self.run(t)
        return True

    # --- inspection

    def master(self) -> int | None:
        ms = [i for i, nd in enumerate(self.nodes) if nd is not None and nd.lease.is_master()]
        return ms[0] if len(ms) == 1 else None

    def stable_master(self) -> int | None:
        m = self.master()
        if m is not None and self.nodes[m].log.ready:
            return m
        return None

    def store_image(self, i: int) -> list[tuple[bytes, bytes]]:
        """Full scan of everything except per-node consensus bookkeeping."""
        node = self.nodes[i]
        return [(k, v) for k, v in node.store.iterate(pending=True) if not k.startswith(b"\x00paxos/")]

    def digest(self) -> int:
        return event_digest(self.events)

    def client_request(self, i: int, req: Request, reply: Callable[[Response], None], delay: int = 500) -> None:
        """Hand a request to node ``i`` after a one-way client latency."""
        def arrive() -> None:
            node = self.nodes[i]
            if node is None:
                return
            node.handle(req, lambda resp: self.at(self.time + delay, lambda: reply(resp)))
        self.at(self.time + delay, arrive)


# --- clients ----------------------------------------------------------------

class SimClient:
    """A closed-loop client that runs a list of requests one at a time.

    Writes get a fresh ``request_seq`` and keep it across retries, so the
    duplicate table can recognise a retry whose first attempt did commit.
    """

    RETRY = {Status.NOT_MASTER, Status.UNAVAILABLE, Status.UNKNOWN_OUTCOME}

    def __init__(self, world: SimWorld, client_id: int, ops: list[Request], target: int = 0,
                 timeout: int = 3_000_000, think: int = 0, start: int = 0) -> None:
        self.world = world
        self.cid = client_id
        self.ops = list(ops)
        self.target = target
        self.timeout = timeout
        self.think = think
        self.idx = -1
        self.seq = 0
        self.attempt = 0
        self.done = False
        self.results: list[Response] = []
        self.rng = random.Random(world.rng.getrandbits(64))
        world.at(start, self._next)

    def _next(self) -> None:
        self.idx += 1
        if self.idx >= len(self.ops):
            self.done = True
            return
        req = self.ops[self.idx]
        if req.base in WRITE_OPS:
            self.seq += 1
            req = Request(req.op, req.args, self.cid, self.seq)
            self.ops[self.idx] = req
        w = self.world
        w.events.append((w.time, CLIENT, "invoke", self.cid, self.idx, req.op, req.args, req.request_seq))
        self._send()

    def _send(self) -> None:
        self.attempt += 1
        attempt = self.attempt
        w = self.world
        w.client_request(self.target, self.ops[self.idx], lambda r: self._reply(attempt, r))
        w.at(w.time + self.timeout, lambda: self._timeout(attempt))

    def _timeout(self, attempt: int) -> None:
        if attempt == self.attempt and not self.done:
            self.target = self.rng.randrange(self.world.cfg.n)
            self._send()

    def _reply(self, attempt: int, resp: Response) -> None:
        if attempt != self.attempt or self.done:
            return
        w = self.world
        if resp.status in self.RETRY:
            if resp.status == Status.NOT_MASTER and resp.values:
                self.target = int(resp.values[0])
                delay = 1_000
            else:
                self.target = self.rng.randrange(w.cfg.n)
                delay = 100_000
            self.attempt += 1
            nxt = self.attempt
            w.at(w.time + delay, lambda: self._resend(nxt))
            return
        self.attempt += 1
        self.results.append(resp)
        w.events.append((w.time, CLIENT, "complete", self.cid, self.idx, int(resp.status), resp.values))
        w.at(w.time + self.think, self._next)

    def _resend(self, attempt: int) -> None:
        if attempt == self.attempt and not self.done:
            self._send()


def spread_ops(world: SimWorld, clients: int, ops_per_client: Callable[[int], list[Request]],
               start: int = 0, **kw) -> list[SimClient]:
    return [SimClient(world, 1000 + c, ops_per_client(c), target=c % world.cfg.n, start=start, **kw)
            for c in range(clients)]


def is_write(op: int) -> bool:
    return Op(op & 0x7F) in WRITE_OPS
