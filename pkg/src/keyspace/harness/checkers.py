"""Post-hoc invariant checkers over a simulator event log.

Each checker is a pure function of the event list and returns a Verdict. A
failing verdict carries the few events that demonstrate the problem.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from ..core import Status
from ..server.protocol import DIRTY, WRITE_OPS, Op

CLIENT = -1


@dataclass
class Verdict:
    name: str
    ok: bool
    counterexample: list = field(default_factory=list)
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


def _fail(name: str, detail: str, *events) -> Verdict:
    return Verdict(name, False, list(events), detail)


def log_agreement(events) -> Verdict:
    """No instance is decided or applied with two different values anywhere."""
    seen: dict[int, tuple] = {}
    for ev in events:
        if ev[2] in ("decide", "apply"):
            inst, dig = ev[3], ev[4]
            prior = seen.get(inst)
            if prior is None:
                seen[inst] = ev
            elif prior[4] != dig:
                return _fail("log_agreement", f"instance {inst} has two values", prior, ev)
        elif ev[2] == "violation":
            return _fail("log_agreement", ev[4], ev)
    return Verdict("log_agreement", True)


def gap_free(events) -> Verdict:
    """Each node applies consecutive instances, resuming from its durable marker after restarts.

    Together with agreement this gives prefix consistency: any two nodes'
    applied sequences are prefixes of one another.
    """
    last: dict[int, int] = defaultdict(int)
    for ev in events:
        kind, node = ev[2], ev[1]
        if kind == "apply":
            if ev[3] != last[node] + 1:
                return _fail("prefix_consistency", f"node {node} applied {ev[3]} after {last[node]}", ev)
            last[node] = ev[3]
        elif kind == "restart":
            if ev[3] > last[node]:
                return _fail("prefix_consistency", f"node {node} recovered past what it applied", ev)
            last[node] = ev[3]
        elif kind == "snapshot":
            last[node] = ev[3]
    return Verdict("prefix_consistency", True)


def master_intervals(events) -> dict[int, list[tuple[int, int]]]:
    """Global-time intervals during which each node believed it held the lease."""
    spans: dict[int, list[list[int]]] = defaultdict(list)
    for ev in events:
        t, node, kind = ev[0], ev[1], ev[2]
        if kind == "lease":
            end = ev[3]
            s = spans[node]
            if s and s[-1][1] >= t:
                s[-1][1] = max(s[-1][1], end)
            else:
                s.append([t, end])
        elif kind == "crash":
            for iv in spans[node]:
                if iv[1] > t:
                    iv[1] = max(iv[0], t)
    return {n: [tuple(iv) for iv in s if iv[1] > iv[0]] for n, s in spans.items()}


def single_master(events) -> Verdict:
    """At no global instant do two nodes both believe they are master."""
    flat = sorted((s, e, n) for n, ivs in master_intervals(events).items() for s, e in ivs)
    reach: tuple[int, int, int] | None = None
    for s, e, n in flat:
        if reach is not None and s < reach[1] and reach[2] != n:
            return _fail("single_master", f"nodes {reach[2]} and {n} overlap at t={s}", reach, (s, e, n))
        if reach is None or e > reach[1]:
            reach = (s, e, n)
    return Verdict("single_master", True)


def master_only_writes(events) -> Verdict:
    for ev in events:
        if ev[2] == "propose" and not ev[4]:
            return _fail("master_only_writes", "proposal from a node without the lease", ev)
    return Verdict("master_only_writes", True)


def exactly_once(events) -> Verdict:
    """Every (client, seq) has its effect at one log position on every replica."""
    pos: dict[tuple[int, int], tuple] = {}
    for ev in events:
        if ev[2] == "effect":
            key, where = (ev[3], ev[4]), (ev[5], ev[6])
            prior = pos.get(key)
            if prior is None:
                pos[key] = ev
            elif (prior[5], prior[6]) != where:
                return _fail("exactly_once", f"request {key} applied at two positions", prior, ev)
    return Verdict("exactly_once", True)


def write_visibility(events) -> Verdict:
    """A safe GET that starts after a SET completed sees that SET or a later write.

    Restricted to keys written only by SET with distinct values, so each
    value identifies its write.
    """
    invokes: dict[tuple[int, int], tuple] = {}
    positions: dict[tuple[int, int], tuple[int, int]] = {}
    sets: dict[bytes, list] = defaultdict(list)  # key -> [(complete_t, value, cid, seq)]
    by_value: dict[tuple[bytes, bytes], tuple[int, int]] = {}
    other_writes: set[bytes] = set()
    gets: list[tuple] = []
    pruned: list[bytes] = []
    for ev in events:
        kind = ev[2]
        if kind == "effect":
            positions.setdefault((ev[3], ev[4]), (ev[5], ev[6]))
        elif kind == "invoke":
            invokes[(ev[3], ev[4])] = ev
            base, args = ev[5] & ~DIRTY, ev[6]
            if base == Op.SET:
                if (args[0], args[1]) in by_value:
                    other_writes.add(args[0])
                by_value[(args[0], args[1])] = (ev[3], ev[7])
            elif base == Op.PRUNE:
                pruned.append(args[0])
            elif base in WRITE_OPS:
                other_writes.add(args[0])
                if base == Op.RENAME:
                    other_writes.add(args[1])
        elif kind == "complete":
            inv = invokes.get((ev[3], ev[4]))
            if inv is None:
                continue
            if inv[5] == Op.SET and ev[5] == Status.OK:
                sets[inv[6][0]].append((ev[0], inv[6][1], inv[3], inv[7]))
            elif inv[5] == Op.GET and ev[5] in (Status.OK, Status.NOT_FOUND):
                gets.append((inv, ev))
    for inv, comp in gets:
        key = inv[6][0]
        if key in other_writes or any(key.startswith(p) for p in pruned):
            continue
        done = [w for w in sets.get(key, ()) if w[0] < inv[0]]
        if not done:
            continue
        latest = max(positions.get((w[2], w[3]), (-1, -1)) for w in done)
        if comp[5] == Status.NOT_FOUND:
            return _fail("write_visibility", f"GET {key!r} missed a completed SET", inv, comp)
        got = by_value.get((key, comp[6][0]))
        if got is None or positions.get(got, (-1, -1)) < latest:
            return _fail("write_visibility", f"GET {key!r} returned a stale value", inv, comp)
    return Verdict("write_visibility", True)


ALL = (log_agreement, gap_free, single_master, master_only_writes, exactly_once, write_visibility)


def check_all(events) -> list[Verdict]:
    return [chk(events) for chk in ALL]


def replicas_equal(world, nodes=None) -> Verdict:
    """Full-store scans of the given live nodes are identical."""
    nodes = [i for i in (nodes if nodes is not None else range(world.cfg.n)) if world.nodes[i] is not None]
    images = {i: world.store_image(i) for i in nodes}
    ref = nodes[0] if nodes else None
    for i in nodes[1:]:
        if images[i] != images[ref]:
            a, b = dict(images[ref]), dict(images[i])
            diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))[:5]
            return _fail("replica_equality", f"nodes {ref} and {i} differ on {diff}")
    return Verdict("replica_equality", True)
