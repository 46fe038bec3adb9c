"""Randomized lease-only schedules: PaxosLease on every node, nothing else.

Nodes are always eligible for the lease, so contention is maximal. Each run
uses random clock skews within a bound, lossy and duplicating links, random
partitions and crash-restarts, then checks that no two lease intervals
overlap in global time.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from ..paxoslease import LeaseConfig, PaxosLease
from ..transport import Channel, Crash, FaultSchedule, Partition
from . import checkers
from .sim import SimConfig, SimWorld

SECOND = 1_000_000


class LeaseNode:
    """Adapter giving a bare PaxosLease the node interface SimWorld drives."""

    def __init__(self, env, node_id: int, cluster_size: int, config: LeaseConfig, restarted: bool) -> None:
        self.env = env
        self.node_id = node_id
        self.cluster_size = cluster_size
        self.lease = PaxosLease(self, config, restarted, env.epoch)

    def start(self) -> None:
        self.lease.start()

    def now(self) -> int:
        return self.env.now()

    def send_lease(self, dst: int, payload: bytes) -> None:
        self.env.send(dst, Channel.LOSSY, payload)

    def set_timer(self, key: str, delay: int) -> None:
        self.env.set_timer(key, max(0, delay))

    def cancel_timer(self, key: str) -> None:
        self.env.cancel_timer(key)

    def random_delay(self, lo: int, hi: int) -> int:
        return self.env.rng.randint(lo, hi) if hi > lo else lo

    def lease_eligible(self) -> bool:
        return True

    def lease_acquired(self, expiry: int, extended: bool) -> None:
        self.env.record("lease", expiry)

    def lease_lost(self) -> None:
        self.env.record("lease_lost")

    def on_message(self, src: int, payload: bytes) -> None:
        self.lease.on_message(payload)

    def on_connection_lost(self, peer: int) -> None:
        pass

    def on_timer(self, key: str) -> None:
        self.lease.on_timer(key)

    def crash(self) -> None:
        self.lease.crash_stop()


@dataclass
class LeaseRun:
    seed: int
    verdict: checkers.Verdict
    acquisitions: int
    virtual_time: int
    skews: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.verdict.ok


def lease_schedule(seed: int, n: int, horizon: int, crashes: int = 3, partitions: int = 2) -> FaultSchedule:
    rng = random.Random(seed)
    parts = []
    for _ in range(rng.randint(0, partitions)):
        start = rng.randint(0, horizon - SECOND)
        side = frozenset(rng.sample(range(n), rng.randint(1, n - 1)))
        parts.append(Partition(start, min(horizon, start + rng.randint(SECOND, 15 * SECOND)), side,
                               frozenset(range(n)) - side))
    crash_list = []
    for _ in range(rng.randint(1, crashes)):
        at = rng.randint(0, horizon - SECOND)
        crash_list.append(Crash(rng.randrange(n), at, at + rng.randint(0, 10 * SECOND)))
    dmax = rng.choice((2_000, 50_000, 500_000, 3 * SECOND))
    return FaultSchedule(
        seed=rng.getrandbits(32),
        loss_prob=rng.uniform(0, 0.3),
        dup_prob=rng.uniform(0, 0.2),
        reorder_prob=rng.uniform(0, 0.5),
        delay_min=rng.randint(100, 1_000),
        delay_max=dmax,
        max_dup=2,
        partitions=parts,
        crashes=crash_list,
    )


def run_lease(seed: int, n: int = 3, horizon: int = 40 * SECOND, max_skew_ppm: int = 10_000,
              config: LeaseConfig | None = None, quarantine: bool = True) -> LeaseRun:
    """One randomized lease-only run, checked for overlapping masters."""
    lease_cfg = config or LeaseConfig()
    if not quarantine:
        lease_cfg = replace(lease_cfg, quarantine=0)
    schedule = lease_schedule(seed, n, horizon)
    cfg = SimConfig(n=n, seed=seed, schedule=schedule, max_skew_ppm=max_skew_ppm, record_traffic=False)

    def factory(world, env, i, restarted):
        return LeaseNode(env, i, n, lease_cfg, restarted)

    world = SimWorld(cfg, factory)
    world.run(horizon)
    acquisitions = sum(1 for ev in world.events if ev[2] == "lease")
    return LeaseRun(seed, checkers.single_master(world.events), acquisitions, world.time, list(world.skews))


def run_many(runs: int, seed: int = 0, **kw) -> list[LeaseRun]:
    return [run_lease(seed + k, **kw) for k in range(runs)]
