"""Targeted simulator scenarios: master failover, catchup paths, dirty reads."""

from __future__ import annotations

import random
from dataclasses import dataclass, replace

from ..core import Status
from ..server import protocol as P
from ..server.node import NodeSettings
from ..server.protocol import Op, Request, Response
from ..replicated_log import LogConfig
from ..transport import FaultSchedule
from . import checkers
from .runner import converged
from .sim import SimClient, SimConfig, SimWorld

SECOND = 1_000_000


def _settle(world: SimWorld, limit: int = 60 * SECOND) -> int:
    if not world.run_until(lambda: world.stable_master() is not None, world.time + limit):
        raise RuntimeError("cluster never elected a master")
    return world.stable_master()


# --- failover ---------------------------------------------------------------

@dataclass
class FailoverRun:
    seed: int
    old_master: int
    new_master: int | None
    takeover: int | None   # microseconds of global time from the kill to the next lease
    verdicts: list

    @property
    def ok(self) -> bool:
        return all(self.verdicts)


def failover_run(seed: int, n: int = 3, max_skew_ppm: int = 10_000, loss: float = 0.05) -> FailoverRun:
    """Kill the master of a stable cluster and time the next lease acquisition."""
    rng = random.Random(seed)
    schedule = FaultSchedule(seed=rng.getrandbits(32), loss_prob=rng.uniform(0, loss),
                             delay_min=100, delay_max=rng.randint(1_000, 20_000))
    world = SimWorld(SimConfig(n=n, seed=seed, schedule=schedule, max_skew_ppm=max_skew_ppm, record_traffic=False))
    old = _settle(world)
    # keep it in steady state for a random while, renewals included
    world.run(world.time + rng.randint(0, 10 * SECOND))
    old = world.master() if world.master() is not None else old
    killed = world.time
    world.crash(old)
    new = None
    for _ in range(400):
        world.run(world.time + 50_000)
        m = world.master()
        if m is not None and m != old:
            new = m
            break
    takeover = None
    if new is not None:
        starts = [ev[0] for ev in world.events if ev[2] == "lease" and ev[1] == new and ev[0] >= killed]
        takeover = starts[0] - killed if starts else None
    return FailoverRun(seed, old, new, takeover, [checkers.single_master(world.events)])


# --- catchup ------------------------------------------------------------------

@dataclass
class CatchupRun:
    seed: int
    lagging: int
    behind: int
    tail_catchups: int
    full_copies: int
    equal: bool
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.equal


def _random_write(rng: random.Random, i: int) -> Request:
    key = b"k%03d" % rng.randrange(60)
    r = rng.random()
    if r < 0.6:
        return P.write(Op.SET, key, b"v%d-%d" % (i, rng.randrange(1000)))
    if r < 0.7:
        return P.write(Op.ADD, b"ctr%d" % rng.randrange(3), P.i64_arg(rng.randint(-5, 5)))
    if r < 0.8:
        return P.write(Op.DELETE, key)
    if r < 0.9:
        return P.write(Op.RENAME, key, b"k%03d" % rng.randrange(60))
    if r < 0.95:
        return P.write(Op.TESTANDSET, key, b"v", b"w%d" % i)
    return P.write(Op.PRUNE, b"k0%d" % rng.randrange(10))


def catchup_run(seed: int, behind: int, tail_entries: int = 10_000, n: int = 3) -> CatchupRun:
    """Keep one follower down while ``behind`` instances are decided, then bring it back.

    Writes are sent one at a time so each decides its own instance. The
    recovered follower's full store must equal an always-up replica's.
    """
    rng = random.Random(seed)
    log = replace(LogConfig(), tail_entries=tail_entries)
    world = SimWorld(SimConfig(n=n, seed=seed, settings=NodeSettings(log=log), max_skew_ppm=10_000,
                               record_traffic=False))
    m = _settle(world)
    lagging = rng.choice([i for i in range(n) if i != m])
    witness = next(i for i in range(n) if i not in (m, lagging))
    # some shared history first
    ops = [P.write(Op.SET, b"k%03d" % i, b"init") for i in range(20)]
    first = SimClient(world, 1, ops, target=m)
    world.run_until(lambda: first.done, world.time + 60 * SECOND)
    world.crash(lagging)
    start = world.nodes[m].log.applied
    ops = [_random_write(rng, i) for i in range(behind)]
    client = SimClient(world, 2, ops, target=m)
    world.run_until(lambda: client.done, world.time + 600 * SECOND)
    behind_by = world.nodes[m].log.applied - start
    world.restart(lagging)
    if not world.run_until(lambda: converged(world), world.time + 120 * SECOND):
        return CatchupRun(seed, lagging, behind_by, 0, 0, False, "did not converge")
    world.run(world.time + SECOND)
    mt = world.nodes[lagging].log.metrics
    eq = world.store_image(lagging) == world.store_image(witness)
    return CatchupRun(seed, lagging, behind_by, mt.tail_catchups, mt.full_copies, eq,
                      "" if eq else "store images differ")


# --- reads ------------------------------------------------------------------

@dataclass
class DirtyReadWitness:
    old_value_seen: bool
    safe_read_value: bytes | None
    dirty_value: bytes | None


def dirty_read_on_lagging_node(seed: int = 0) -> DirtyReadWitness:
    """Partition one follower away, overwrite a key at the master, read both ways.

    The safe GET at the master must return the new value. A dirty GET at the
    cut-off follower answers from its stale local state, so it returns the
    old one.
    """
    world = SimWorld(SimConfig(n=3, seed=seed, record_traffic=False))
    m = _settle(world)
    lag = (m + 1) % 3
    results: dict[str, Response] = {}

    def call(i: int, req: Request, tag: str) -> None:
        world.client_request(i, req, lambda r: results.__setitem__(tag, r))

    call(m, P.write(Op.SET, b"x", b"old", client_id=1, request_seq=1), "set1")
    world.run_until(lambda: "set1" in results, world.time + 10 * SECOND)
    # let the follower apply the first write
    world.run_until(lambda: world.nodes[lag].log.applied == world.nodes[m].log.applied, world.time + 10 * SECOND)
    t = world.time
    others = frozenset(i for i in range(3) if i != lag)
    world.transport.partition((t, t + 60 * SECOND), {lag}, others)
    call(m, P.write(Op.SET, b"x", b"new", client_id=1, request_seq=2), "set2")
    world.run_until(lambda: "set2" in results, world.time + 10 * SECOND)
    if results["set2"].status != Status.OK:
        raise RuntimeError(f"second write failed: {results['set2'].status.name}")
    call(m, P.get(b"x"), "safe")
    call(lag, P.get(b"x", dirty=True), "dirty")
    world.run_until(lambda: "safe" in results and "dirty" in results, world.time + 10 * SECOND)
    safe, dirty = results["safe"], results["dirty"]
    sv = safe.values[0] if safe.status == Status.OK else None
    dv = dirty.values[0] if dirty.status == Status.OK else None
    return DirtyReadWitness(dv == b"old", sv, dv)
