import pytest
from hypothesis import given, strategies as st

from keyspace.core import Ballot
from keyspace.paxos import (
    Acceptor, ConflictingDecision, Learn, Learner, Outcome, Phase, PrepareRequest, PrepareResponse, Proposer,
    ProposeRequest, ProposeResponse, Status, decode, encode,
)
from keyspace.storage import MemDisk, Store


def prep(acc, b, inst=1):
    return acc.on_prepare(PrepareRequest(9, inst, b))[0]


def prop(acc, b, v, inst=1):
    return acc.on_propose(ProposeRequest(9, inst, b, v))[0]


def test_fresh_acceptor_promises():
    r = prep(Acceptor(0), Ballot(1, 0))
    assert r.outcome == Outcome.PROMISED and r.accepted_ballot is None


def test_stale_prepare_rejected():
    a = Acceptor(0)
    prep(a, Ballot(5, 1))
    r = prep(a, Ballot(3, 2))
    assert r.outcome == Outcome.REJECTED and r.promised == Ballot(5, 1)


def test_prepare_reports_accepted_value():
    a = Acceptor(0)
    prep(a, Ballot(4, 0))
    prop(a, Ballot(4, 0), b"v")
    prep(a, Ballot(5, 1))
    r = prep(a, Ballot(6, 2))
    assert r.outcome == Outcome.PROMISED
    assert (r.accepted_ballot, r.accepted_value) == (Ballot(4, 0), b"v")


def test_propose_at_promised_ballot_accepted():
    a = Acceptor(0)
    prep(a, Ballot(2, 0))
    assert prop(a, Ballot(2, 0), b"v").outcome == Outcome.ACCEPTED
    assert a.state(1).accepted_value == b"v"


def test_stale_propose_rejected():
    a = Acceptor(0)
    prep(a, Ballot(5, 1))
    assert prop(a, Ballot(2, 0), b"v").outcome == Outcome.REJECTED


def test_redelivered_propose_after_restart_is_idempotent():
    disk = MemDisk()
    store = Store(disk)
    a = Acceptor(0, store)
    _, changed = a.on_propose(ProposeRequest(1, 1, Ballot(2, 1), b"v"))
    assert changed
    store.current().sync()
    disk.crash()
    b = Acceptor(0, Store(disk))
    resp, changed = b.on_propose(ProposeRequest(1, 1, Ballot(2, 1), b"v"))
    assert resp.outcome == Outcome.ACCEPTED and not changed
    assert b.state(1).accepted_value == b"v"


class Cluster:
    """Three acceptors on stores; every message is delivered in order and counted."""

    def __init__(self, n=3):
        self.disks = [MemDisk() for _ in range(n)]
        self.stores = [Store(d) for d in self.disks]
        self.acceptors = [Acceptor(i, s) for i, s in enumerate(self.stores)]
        self.roundtrips = 0

    def syncs(self):
        return [d.syncs for d in self.disks]

    def _call(self, handler, req, nodes):
        self.roundtrips += 1
        out = []
        for i in nodes:
            resp, changed = getattr(self.acceptors[i], handler)(req)
            if changed:
                self.stores[i].current().sync()
            out.append(resp)
        return out

    def run(self, proposer, value, nodes=(0, 1, 2), skip_prepare=False):
        if not skip_prepare:
            req = proposer.prepare(proposer.instance or 1)
            for r in self._call("on_prepare", req, nodes):
                proposer.on_prepare_response(r)
            assert proposer.phase == Phase.PREPARED
        req = proposer.propose(value)
        for r in self._call("on_propose", req, nodes):
            if proposer.on_propose_response(r) == "decided":
                return proposer.value
        return None


def test_full_round_two_roundtrips_two_syncs():
    c = Cluster()
    before = c.syncs()
    assert c.run(Proposer(0, 3), b"v") == b"v"
    assert c.roundtrips == 2
    assert [a - b for a, b in zip(c.syncs(), before)] == [2, 2, 2]


def test_multipaxos_skips_prepare():
    c = Cluster()
    p = Proposer(0, 3)
    c.run(p, b"v1")
    p.advance(multipaxos=True)
    before, rt = c.syncs(), c.roundtrips
    assert c.run(p, b"v2", skip_prepare=True) == b"v2"
    assert c.roundtrips - rt == 1
    assert [a - b for a, b in zip(c.syncs(), before)] == [1, 1, 1]


def test_new_proposer_recovers_accepted_value():
    c = Cluster()
    # v' is accepted by a majority {0, 1} under a low ballot but its proposer dies before learning it
    old = Proposer(0, 3)
    req = old.prepare(1)
    for r in c._call("on_prepare", req, (0, 1)):
        old.on_prepare_response(r)
    c._call("on_propose", old.propose(b"v'"), (0, 1))
    new = Proposer(2, 3)
    new.instance = 1
    assert c.run(new, b"v", nodes=(1, 2)) == b"v'"


def test_rejection_raises_next_ballot():
    a = Acceptor(0)
    prep(a, Ballot(7, 1))
    p = Proposer(0, 1)
    p.on_prepare_response(a.on_prepare(p.prepare(1))[0])
    assert p.phase == Phase.IDLE
    assert p.prepare(1).ballot > Ballot(7, 1)


def test_learner():
    ln = Learner()
    assert ln.learn(3, b"v")
    assert not ln.learn(3, b"v")
    with pytest.raises(ConflictingDecision):
        ln.learn(3, b"w")


ballots = st.builds(Ballot, st.integers(0, 2 ** 64 - 1), st.integers(0, 2 ** 32 - 1))


@given(st.one_of(
    st.builds(PrepareRequest, st.integers(0, 9), st.integers(0, 2 ** 64 - 1), ballots),
    st.builds(ProposeRequest, st.integers(0, 9), st.integers(0, 2 ** 64 - 1), ballots, st.binary(max_size=64)),
    st.builds(ProposeResponse, st.integers(0, 9), st.integers(0, 99), ballots, st.sampled_from(list(Outcome)),
              ballots),
    st.builds(PrepareResponse, st.integers(0, 9), st.integers(0, 99), ballots, st.sampled_from(list(Outcome)),
              ballots, ballots, st.binary(max_size=8),
              st.lists(st.tuples(st.integers(0, 99), ballots, st.binary(max_size=8)), max_size=3).map(tuple)),
    st.builds(Learn, st.integers(0, 9), st.integers(0, 99), st.binary(max_size=64)),
    st.builds(Status, st.integers(0, 9), st.integers(0, 99), st.booleans()),
))
def test_message_roundtrip(m):
    assert decode(encode(m)) == m
