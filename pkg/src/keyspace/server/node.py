"""One Keyspace node: lease, replicated log and database behind one event queue.

The node is driven entirely by its environment, which delivers messages,
fires timers and completes disk flushes. The same class runs inside the
simulator and inside the asyncio server.

Environment interface: ``now()`` (local microseconds), ``send(dst, channel,
payload)``, ``set_timer(key, delay)``, ``cancel_timer(key)``, ``rng``
(a ``random.Random``) and ``record(kind, *fields)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .. import paxoslease
from ..core import Status
from ..kvdb import KeyspaceDB
from ..paxoslease import LeaseConfig, PaxosLease
from ..replicated_log import LogConfig, ReplicatedLog
from ..storage import Store
from ..transport import Channel
from . import protocol
from .protocol import Op, Request, Response

Reply = Callable[[Response], None]


@dataclass
class NodeSettings:
    lease: LeaseConfig = field(default_factory=LeaseConfig)
    log: LogConfig = field(default_factory=LogConfig)
    # test hook: every node proposes as if it held the lease, so Paxos alone
    # has to keep the log consistent between dueling proposers
    force_master: bool = False


class Node:
    def __init__(self, env, node_id: int, cluster_size: int, store: Store,
                 settings: NodeSettings | None = None, restarted: bool = False) -> None:
        self.env = env
        self.node_id = node_id
        self.cluster_size = cluster_size
        self.settings = settings or NodeSettings()
        self.store = store
        self.db = KeyspaceDB(store)
        self.lease = PaxosLease(self, self.settings.lease, restarted, getattr(env, "epoch", 0))
        self.log = ReplicatedLog(self, store, self.db, self.settings.log)
        self.deferred: list[tuple[Request, Reply]] = []
        self.peer_messages = 0  # inter-node messages sent

    def start(self) -> None:
        self.lease.start()
        self.log.start()
        if self.settings.force_master:
            self.log.become_master()

    # --- host services shared by lease and log

    def now(self) -> int:
        return self.env.now()

    def send(self, dst: int, channel: Channel, payload: bytes) -> None:
        self.peer_messages += 1
        self.env.send(dst, channel, payload)

    def send_lease(self, dst: int, payload: bytes) -> None:
        self.send(dst, Channel.LOSSY, payload)

    def set_timer(self, key: str, delay: int) -> None:
        self.env.set_timer(key, max(0, delay))

    def cancel_timer(self, key: str) -> None:
        self.env.cancel_timer(key)

    def random_delay(self, lo: int, hi: int) -> int:
        return self.env.rng.randint(lo, hi) if hi > lo else lo

    def record(self, kind: str, *fields) -> None:
        self.env.record(kind, *fields)

    # lease host

    def lease_eligible(self) -> bool:
        return self.log.up_to_date() and self.log.catchup is None

    def lease_acquired(self, expiry: int, extended: bool) -> None:
        self.record("lease", expiry)
        if not extended:
            self.log.become_master()

    def lease_lost(self) -> None:
        self.record("lease_lost")
        if self.settings.force_master:
            return
        self.log.step_down()
        self._fail_deferred()

    # log host

    def is_master(self) -> bool:
        return self.settings.force_master or self.lease.is_master()

    def master_hint(self) -> int | None:
        return self.lease.current_master()

    def on_ready(self) -> None:
        pending, self.deferred = self.deferred, []
        for req, reply in pending:
            self.handle(req, reply)

    # --- environment callbacks

    def on_message(self, src: int, payload: bytes) -> None:
        if not payload:
            return
        if payload[0] == paxoslease.FAMILY:
            self.lease.on_message(payload)
        else:
            self.log.on_message(payload)

    def on_connection_lost(self, peer: int) -> None:
        self.log.on_connection_lost(peer)

    def on_timer(self, key: str) -> None:
        if key.startswith("lease."):
            self.lease.on_timer(key)
        else:
            self.log.on_timer(key)

    # --- client requests

    def handle(self, req: Request, reply: Reply) -> None:
        """Answer one decoded request; the reply may come later."""
        base = req.base
        if base in protocol.WRITE_OPS:
            if not self.is_master() or not self.log.leading:
                reply(protocol.not_master(self.master_hint()))
                return
            self.log.submit(protocol.to_command(req), lambda res: reply(protocol.from_result(res)))
            return
        if req.dirty:
            reply(self.read(req))
            return
        if not self.is_master() or not self.log.leading:
            reply(protocol.not_master(self.master_hint()))
        elif not self.log.ready:
            self.deferred.append((req, reply))
        else:
            reply(self.read(req))

    def read(self, req: Request) -> Response:
        """Evaluate a read against this node's applied state."""
        base = req.base
        if base == Op.GET:
            v = self.db.get(req.args[0], pending=True)
            return Response(Status.NOT_FOUND) if v is None else Response(Status.OK, (v,))
        q = protocol.to_query(req)
        if base == Op.LISTKEYS:
            return Response(Status.OK, tuple(self.db.list_keys(q, pending=True)))
        if base == Op.LISTKEYVALUES:
            out: list[bytes] = []
            for k, v in self.db.list_keyvalues(q, pending=True):
                out += (k, v)
            return Response(Status.OK, tuple(out))
        return Response(Status.OK, (protocol.u64_arg(self.db.count(q, pending=True)),))

    def _fail_deferred(self) -> None:
        pending, self.deferred = self.deferred, []
        for _, reply in pending:
            reply(Response(Status.UNAVAILABLE))

    def crash(self) -> None:
        """Stop believing anything; used by the simulator before discarding the node."""
        self.lease.crash_stop()
