"""Randomized crash-point trials for the local store.

A trial runs random transactions against a ``MemDisk`` whose flushes
complete only when the trial says so, crashes at a random point, recovers,
and compares the recovered contents with an oracle: a plain dict per sealed
transaction. Recovery must land on the state after some transaction between
the last one acknowledged durable and the last one sealed. Several
crash-recover cycles run per trial, with small log buffers so checkpoints
happen often.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..storage import MemDisk, Store, StoreConfig


@dataclass
class TrialResult:
    seed: int
    ok: bool
    crashes: int
    detail: str = ""


class _ManualDisk(MemDisk):
    """Flushes queue up until ``complete`` runs them in order."""

    def __init__(self) -> None:
        self.pending: list = []
        super().__init__(schedule=lambda delay, cb: self.pending.append(cb))

    def complete(self, k: int) -> None:
        for _ in range(min(k, len(self.pending))):
            self.pending.pop(0)()

    def crash(self, rng=None, any_prefix=False) -> None:
        self.pending.clear()
        super().crash(rng, any_prefix)


def run_trial(seed: int, steps: int = 60, keys: int = 12, cycles: int = 3) -> TrialResult:
    rng = random.Random(seed)
    disk = _ManualDisk()
    config = StoreConfig(page_size=64, log_buffer_size=rng.choice((256, 1024, 1 << 20)))
    store = Store(disk, config)
    durable: dict[bytes, bytes] = {}
    for cycle in range(cycles):
        # states[i] is the content after the i-th transaction sealed in this cycle
        states = [dict(durable)]
        acked = [0]
        model = dict(durable)
        for _ in range(rng.randint(1, steps)):
            r = rng.random()
            if r < 0.6:
                txn = store.current()
                for _ in range(rng.randint(1, 4)):
                    k = b"k%02d" % rng.randrange(keys)
                    if rng.random() < 0.25:
                        txn.delete(k)
                        model.pop(k, None)
                    else:
                        v = bytes(rng.randrange(256) for _ in range(rng.choice((1, 8, 40))))
                        txn.put(k, v)
                        model[k] = v
            elif r < 0.8 and store.dirty():
                idx = len(states)
                states.append(dict(model))
                store.current().sync(lambda i=idx: acked.__setitem__(0, max(acked[0], i)))
            elif r < 0.85 and store.dirty():
                store.current().abort()
                model = dict(states[-1])
            else:
                disk.complete(rng.randint(1, 3))
            # the synced view only ever shows acknowledged states
            if dict(store.iterate()) not in states[acked[0]:]:
                return TrialResult(seed, False, cycle, "synced view is not a sealed state")
        any_prefix = rng.random() < 0.5
        disk.crash(rng, any_prefix=any_prefix)
        store = Store(disk, config)
        got = dict(store.iterate())
        allowed = states[acked[0]:]
        if got not in allowed:
            return TrialResult(seed, False, cycle + 1,
                               f"cycle {cycle}: recovered state matches none of states {acked[0]}..{len(states) - 1}")
        durable = got
    return TrialResult(seed, True, cycles)


def run_trials(n: int, seed: int = 0) -> list[TrialResult]:
    return [run_trial(seed + i) for i in range(n)]
