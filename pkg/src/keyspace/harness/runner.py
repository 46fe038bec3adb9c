"""Randomized fault schedules and workloads, run end to end with every checker."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..core import Status
from ..server import protocol as P
from ..server.node import NodeSettings
from ..server.protocol import Op, Request
from ..transport import Crash, FaultSchedule, Partition
from . import checkers
from .sim import SimClient, SimConfig, SimWorld

SECOND = 1_000_000


def random_schedule(seed: int, n: int = 3, horizon: int = 20 * SECOND, max_loss: float = 0.2,
                    max_dup: float = 0.1, max_delay: int = 2 * SECOND, crashes: int = 2,
                    partitions: int = 2) -> FaultSchedule:
    """A fault plan whose partitions heal and crashed nodes restart before ``horizon``."""
    rng = random.Random(seed)
    # most schedules use short delays; a quarter get the long tail up to max_delay
    if rng.random() < 0.25:
        dmax = rng.randint(50_000, max_delay)
    else:
        dmax = rng.randint(1_000, 50_000)
    dmin = rng.randint(100, min(dmax, 5_000))
    parts = []
    for _ in range(rng.randint(0, partitions)):
        start = rng.randint(0, horizon // 2)
        end = start + rng.randint(SECOND, 20 * SECOND)
        side = frozenset(rng.sample(range(n), rng.randint(1, n - 1)))
        parts.append(Partition(start, min(end, horizon), side, frozenset(range(n)) - side))
    crash_list = []
    for _ in range(rng.randint(0, crashes)):
        at = rng.randint(SECOND, horizon // 2)
        crash_list.append(Crash(rng.randrange(n), at, at + rng.randint(SECOND // 2, 15 * SECOND)))
    return FaultSchedule(
        seed=rng.getrandbits(32),
        loss_prob=rng.uniform(0, max_loss),
        dup_prob=rng.uniform(0, max_dup),
        reorder_prob=rng.uniform(0, 0.3),
        delay_min=dmin,
        delay_max=dmax,
        max_dup=2,
        partitions=parts,
        crashes=crash_list,
    )


def random_workload(rng: random.Random, client: int, writes: int, keys: int = 20,
                    read_ratio: float = 0.3) -> list[Request]:
    """SETs with values unique to (client, index), interleaved with safe and dirty GETs."""
    ops: list[Request] = []
    w = 0
    while w < writes:
        key = b"key%d" % rng.randrange(keys)
        r = rng.random()
        if r < read_ratio * 0.7:
            ops.append(P.get(key))
        elif r < read_ratio:
            ops.append(P.get(key, dirty=True))
        elif r < read_ratio + 0.05:
            ops.append(P.write(Op.ADD, b"counter", P.i64_arg(1)))
            w += 1
        else:
            ops.append(P.write(Op.SET, key, b"c%d-%d" % (client, w)))
            w += 1
    return [P.write(Op.SET, b"counter", b"0")] + ops if client == 0 else ops


@dataclass
class RunReport:
    seed: int
    verdicts: list[checkers.Verdict]
    digest: int
    ops_total: int
    ops_completed: int
    writes_ok: int
    virtual_time: int
    converged: bool
    events: list = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return all(self.verdicts)

    def failures(self) -> list[checkers.Verdict]:
        return [v for v in self.verdicts if not v]


def converged(world: SimWorld) -> bool:
    nodes = world.nodes
    if any(nd is None for nd in nodes):
        return False
    applied = {nd.log.applied for nd in nodes}
    return len(applied) == 1 and all(nd.log.up_to_date() and not nd.log.learned for nd in nodes)


def run_schedule(seed: int, schedule: FaultSchedule | None = None, n: int = 3, clients: int = 3,
                 writes: int = 100, horizon: int = 20 * SECOND, settle: int = 120 * SECOND,
                 think: int = 300_000,
                 settings: NodeSettings | None = None, max_skew_ppm: int = 10_000,
                 keep_events: bool = False, record_traffic: bool = False) -> RunReport:
    """Run one randomized schedule, heal the network, wait for quiescence, check everything."""
    if schedule is None:
        schedule = random_schedule(seed, n, horizon)
    cfg = SimConfig(n=n, seed=seed, schedule=schedule, settings=settings or NodeSettings(),
                    max_skew_ppm=max_skew_ppm, record_traffic=record_traffic)
    world = SimWorld(cfg)
    rng = random.Random(seed ^ 0x5EED)
    per_client = -(-writes // clients)
    # think time spreads the workload across the fault window
    cs = [SimClient(world, 1 + c, random_workload(rng, c, per_client), target=c % n, think=think)
          for c in range(clients)]
    world.run(horizon)
    # heal: no more message faults; every node is up
    world.transport.schedule = FaultSchedule()
    for i in range(n):
        world.restart(i)
    world.run_until(lambda: all(c.done for c in cs), world.time + settle)
    ok = world.run_until(lambda: converged(world), world.time + settle)
    world.run(world.time + SECOND)  # idle flush and final gossip
    verdicts = checkers.check_all(world.events)
    stuck = [c.cid for c in cs if not c.done]
    verdicts.append(checkers.Verdict("clients_done", not stuck,
                                     detail=f"clients {stuck} still waiting after healing" if stuck else ""))
    if ok and world.violation is None:
        verdicts.append(checkers.replicas_equal(world))
    else:
        verdicts.append(checkers.Verdict("quiescence", world.violation is None and ok,
                                         detail="cluster did not converge after healing"))
    total = sum(len(c.ops) for c in cs)
    completed = sum(len(c.results) for c in cs)
    writes_ok = _count_ok_writes(world.events)
    return RunReport(seed, verdicts, world.digest() if keep_events else 0, total, completed, writes_ok,
                     world.time, ok, world.events if keep_events else [])


def _count_ok_writes(events) -> int:
    inv = {}
    n = 0
    for ev in events:
        if ev[2] == "invoke":
            inv[(ev[3], ev[4])] = ev[5]
        elif ev[2] == "complete" and ev[5] == Status.OK and P.Op(inv[(ev[3], ev[4])] & 0x7F) in P.WRITE_OPS:
            n += 1
    return n
