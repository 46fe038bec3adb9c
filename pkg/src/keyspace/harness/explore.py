"""Exhaustive exploration of lease interleavings on a small cluster.

The model keeps every in-flight lease message and every armed timer. From a
state, the explorer may deliver any in-flight message (at the current time),
fire the earliest pending timer (advancing global time to it), or crash and
restart a node while the crash budget lasts. Never delivering a message covers
loss and arbitrary delay. Local clocks run at fixed skews.

The initial state has every node started with its first acquisition attempt
already sent, so depth counts only protocol steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

from ..paxoslease import LeaseConfig, LeasePrepareResponse, LeaseProposeResponse, PaxosLease, State, decode

_PPM = 1_000_000


@dataclass
class ExploreConfig:
    n: int = 3
    max_depth: int = 12
    crashes: int = 0
    quarantine: bool = True
    skews: tuple[int, ...] = (0, 10_000, -10_000)
    lease: LeaseConfig = field(default_factory=LeaseConfig)


@dataclass
class ExploreResult:
    safe: bool
    states: int
    transitions: int
    counterexample: list[str] = field(default_factory=list)


class _Ctx:
    """Points at the model being stepped; hosts are shared between model copies."""
    __slots__ = ("m",)


class _Host:
    __slots__ = ("ctx", "node_id", "cluster_size")

    def __init__(self, ctx: _Ctx, node_id: int, n: int) -> None:
        self.ctx = ctx
        self.node_id = node_id
        self.cluster_size = n

    @property
    def m(self) -> "_Model":
        return self.ctx.m

    def now(self) -> int:
        return self.m.local(self.node_id)

    def send_lease(self, dst: int, payload: bytes) -> None:
        self.m.inflight.append((self.node_id, dst, payload))

    def set_timer(self, key: str, delay: int) -> None:
        m = self.m
        i = self.node_id
        target = m.to_global(i, m.local(i) + max(0, delay))
        m.timers[(i, key)] = max(target, m.time)

    def cancel_timer(self, key: str) -> None:
        self.m.timers.pop((self.node_id, key), None)

    def random_delay(self, lo: int, hi: int) -> int:
        return lo

    def lease_eligible(self) -> bool:
        return True

    def lease_acquired(self, expiry: int, extended: bool) -> None:
        pass

    def lease_lost(self) -> None:
        pass


class _Model:
    def __init__(self, cfg: ExploreConfig) -> None:
        self.ctx = _Ctx()
        self.ctx.m = self
        self.cfg = cfg
        self.n = cfg.n
        self.time = 0
        self.inflight: list[tuple[int, int, bytes]] = []
        self.timers: dict[tuple[int, str], int] = {}
        self.crashes_left = cfg.crashes
        self.boots = [0] * cfg.n
        self.nodes = [PaxosLease(_Host(self.ctx, i, cfg.n), cfg.lease) for i in range(cfg.n)]
        for nd in self.nodes:
            nd.start()
        # fire the zero-delay start timers as part of the initial state
        for key, t in sorted(self.timers.items(), key=lambda kv: (kv[1], kv[0])):
            if t == self.time and self.timers.get(key) == t:
                del self.timers[key]
                self.nodes[key[0]].on_timer(key[1])

    def local(self, i: int) -> int:
        return self.time * (_PPM + self.cfg.skews[i]) // _PPM

    def to_global(self, i: int, local: int) -> int:
        m = _PPM + self.cfg.skews[i]
        return -(-local * _PPM // m)

    def copy(self) -> "_Model":
        c = object.__new__(_Model)
        c.ctx, c.cfg, c.n, c.time = self.ctx, self.cfg, self.n, self.time
        c.inflight = list(self.inflight)
        c.timers = dict(self.timers)
        c.crashes_left = self.crashes_left
        c.boots = list(self.boots)
        c.nodes = list(self.nodes)  # copied on write in apply
        return c

    def key(self) -> tuple:
        return (self.time, tuple(sorted(self.inflight)), tuple(sorted(self.timers.items())),
                self.crashes_left, tuple(self.boots), tuple(nd.state_key() for nd in self.nodes))

    def masters(self) -> list[int]:
        self.ctx.m = self
        return [i for i, nd in enumerate(self.nodes) if nd.is_master()]

    # actions

    def actions(self) -> list[tuple]:
        acts: list[tuple] = [("deliver", m) for m in sorted(set(self.inflight))]
        if self.timers:
            (i, key), t = min(self.timers.items(), key=lambda kv: (kv[1], kv[0]))
            acts.append(("timer", i, key, t))
        if self.crashes_left:
            acts.extend(("crash", i) for i in range(self.n))
        return acts

    def _own(self, i: int) -> PaxosLease:
        nd = self.nodes[i] = self.nodes[i].clone(self.nodes[i].host)
        return nd

    def apply(self, act: tuple) -> None:
        self.ctx.m = self
        old = len(self.inflight)
        if act[0] == "deliver":
            old -= 1
            src, changed, payload = act[1]
            self.inflight.remove(act[1])
            self._own(changed).dispatch(_decode(payload))
        elif act[0] == "timer":
            _, changed, key, t = act
            self.time = t
            del self.timers[(changed, key)]
            self._own(changed).on_timer(key)
        else:
            i = changed = act[1]
            self.crashes_left -= 1
            for k in [k for k in self.timers if k[0] == i]:
                del self.timers[k]
            lease_cfg = self.cfg.lease if self.cfg.quarantine else replace(self.cfg.lease, quarantine=0)
            self.boots[i] += 1
            nd = PaxosLease(self.nodes[i].host, lease_cfg, restarted=True, epoch=self.boots[i])
            self.nodes[i] = nd
            nd.start()
        # only the node that just moved can have turned old responses stale
        self.inflight = [m for j, m in enumerate(self.inflight)
                         if (j < old and m[1] != changed) or self._live(m)]

    def _live(self, msg: tuple[int, int, bytes]) -> bool:
        """False for responses the destination will ignore from now on.

        Request ids only grow and an attempt never returns to an earlier
        phase, so such a message is as good as lost.
        """
        m = _decode(msg[2])
        if isinstance(m, LeasePrepareResponse):
            phase, seen = State.PREPARING, "promises"
        elif isinstance(m, LeaseProposeResponse):
            phase, seen = State.PROPOSING, "accepts"
        else:
            return True
        nd = self.nodes[msg[1]]
        return (nd.state == phase and nd.request == m.request and nd.ballot == m.ballot
                and m.sender not in getattr(nd, seen))


@lru_cache(maxsize=None)
def _decode(payload: bytes):
    return decode(payload)


def _describe(act: tuple) -> str:
    if act[0] == "deliver":
        src, dst, payload = act[1]
        return f"deliver {src}->{dst} {decode(payload)!r}"
    if act[0] == "timer":
        return f"t={act[3]} node {act[1]} timer {act[2]}"
    return f"crash-restart node {act[1]}"


def _independent(a: tuple, b: tuple) -> bool:
    """Deliveries to different nodes commute; timers and crashes commute with nothing."""
    return a[0] == "deliver" and b[0] == "deliver" and a[1][1] != b[1][1]


def explore(cfg: ExploreConfig) -> ExploreResult:
    """Depth-first search over all interleavings up to ``cfg.max_depth`` steps.

    Sleep sets skip the second order of every pair of commuting deliveries.
    A revisited state is pruned when an earlier visit had at least as much
    depth left and a sleep set no larger than the current one.
    """
    root = _Model(cfg)
    seen: dict[tuple, list[tuple[int, frozenset]]] = {}
    stats = {"states": 0, "transitions": 0}
    trace: list[tuple] = []

    def dfs(m: _Model, depth: int, sleep: frozenset) -> list[tuple] | None:
        if len(m.masters()) > 1:
            return list(trace)
        if depth == cfg.max_depth:
            return None
        k = m.key()
        left = cfg.max_depth - depth
        visits = seen.setdefault(k, [])
        for r, slp in visits:
            if r >= left and slp <= sleep:
                return None
        visits.append((left, sleep))
        stats["states"] += 1
        done: list[tuple] = []
        for act in m.actions():
            if act in sleep:
                continue
            child = m.copy()
            child.apply(act)
            stats["transitions"] += 1
            trace.append(act)
            child_sleep = frozenset(b for b in (*sleep, *done) if _independent(act, b))
            bad = dfs(child, depth + 1, child_sleep)
            trace.pop()
            if bad is not None:
                return bad
            done.append(act)
        return None

    bad = dfs(root, 0, frozenset())
    return ExploreResult(bad is None, stats["states"], stats["transitions"],
                         [_describe(a) for a in bad] if bad else [])
