"""Structural efficiency benchmark in the simulator.

Counts, at a stable master, Paxos rounds, broadcast roundtrips, physical
disk syncs and bytes sent per decided instance for a given workload and set
of optimizations. Absolute throughput is not measured; these ratios are what
batching, commit chaining and MultiPaxos are supposed to change.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, replace

from ..server import protocol as P
from ..server.node import NodeSettings
from ..server.protocol import Op
from ..replicated_log import LogConfig
from .sim import CLIENT, SimConfig, SimWorld

SECOND = 1_000_000


@dataclass
class BenchSpec:
    name: str = "steady"
    ops: int = 500
    mode: str = "stream"        # "stream": one command every `interval`; "burst": all at once
    interval: int = 20_000      # microseconds between stream arrivals
    value_size: int = 100
    batching: bool = True
    chaining: bool = True
    multipaxos: bool = True
    n: int = 3
    seed: int = 1


@dataclass
class BenchResult:
    name: str
    ops: int
    completed: int
    instances: int
    rounds: int
    roundtrips: int
    syncs: int
    bytes_sent: int
    roundtrips_per_instance: float
    syncs_per_instance: float
    rounds_per_op: float
    virtual_ms: float


FIELDS = list(BenchResult.__dataclass_fields__)


def run_bench(spec: BenchSpec) -> BenchResult:
    """Drive ``spec.ops`` writes at the master of a fault-free cluster and count."""
    log = replace(LogConfig(), batching=spec.batching, chaining=spec.chaining, multipaxos=spec.multipaxos)
    cfg = SimConfig(n=spec.n, seed=spec.seed, settings=NodeSettings(log=log), record_traffic=True)
    world = SimWorld(cfg)
    if not world.run_until(lambda: world.stable_master() is not None, 60 * SECOND):
        raise RuntimeError("no stable master")
    m = world.stable_master()
    node = world.nodes[m]
    # settle the takeover round and its idle flush before counting
    world.run(world.time + SECOND)
    base_m = replace(node.log.metrics)
    base_syncs = node.store.syncs
    base_applied = node.log.applied
    t0 = world.time
    start_events = len(world.events)

    done: list[int] = []

    def submit(k: int) -> None:
        req = P.write(Op.SET, b"bench%06d" % k, bytes([65 + k % 26]) * spec.value_size)
        req = P.Request(req.op, req.args, CLIENT + 100, k + 1)

        def reply(resp) -> None:
            done.append(k)
        node.handle(req, reply)

    for k in range(spec.ops):
        at = t0 if spec.mode == "burst" else t0 + k * spec.interval
        world.at(at, lambda k=k: submit(k))
    # sample the counters each time the master applies an instance
    limit = t0 + spec.ops * spec.interval + 60 * SECOND
    applied = node.log.applied
    samples = [(t0, base_syncs, base_m)]
    while len(done) < spec.ops and world.time < limit and world.step():
        if node.log.applied != applied:
            applied = node.log.applied
            samples.append((world.time, node.store.syncs, replace(node.log.metrics)))
    window_end, syncs_end, mt = samples[-1]
    instances = node.log.applied - base_applied
    rounds = mt.rounds - base_m.rounds
    syncs = syncs_end - base_syncs
    sent = sum(ev[5] for ev in world.events[start_events:]
               if ev[2] == "send" and ev[1] == m and ev[0] <= window_end)
    # per-instance rates come from the middle of the stream, away from its start and its closing flush
    cut = len(samples) // 10
    lo, hi = (samples[cut], samples[-1 - cut]) if len(samples) - 2 * cut > 2 else (samples[0], samples[-1])
    span = max(hi[2].decided - lo[2].decided, 1)
    rt_rate = (hi[2].roundtrips - lo[2].roundtrips) / span
    sync_rate = (hi[1] - lo[1]) / span
    return BenchResult(spec.name, spec.ops, len(done), instances, rounds, mt.roundtrips - base_m.roundtrips,
                       syncs, sent, rt_rate, sync_rate, rounds / max(spec.ops, 1), (window_end - t0) / 1000)


def standard_suite(ops: int = 500) -> list[BenchSpec]:
    """The configurations the efficiency criteria compare."""
    return [
        BenchSpec("steady_chaining", ops=ops),
        BenchSpec("steady_no_chaining", ops=ops, chaining=False),
        BenchSpec("burst_batched", ops=ops, mode="burst"),
        BenchSpec("burst_unbatched", ops=ops, mode="burst", batching=False),
        BenchSpec("burst_no_multipaxos", ops=ops, mode="burst", batching=False, multipaxos=False),
    ]


def to_csv(results: list[BenchResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=FIELDS)
    w.writeheader()
    for r in results:
        row = asdict(r)
        for k, v in row.items():
            if isinstance(v, float):
                row[k] = f"{v:.3f}"
        w.writerow(row)
    return buf.getvalue()
