from hypothesis import given, strategies as st

from keyspace import paxos
from keyspace.core import Ballot
from keyspace.harness import checkers
from keyspace.harness.runner import run_schedule
from keyspace.harness.scenarios import catchup_run
from keyspace.paxos import Acceptor, Outcome, PrepareRequest, ProposeRequest
from keyspace.replicated_log import (
    SnapshotChunk, SnapshotRequest, TailMissing, TailRequest, TailResponse, decode, decode_items, encode,
    encode_items,
)
from keyspace.server.node import NodeSettings
from keyspace.storage import MemDisk, Store

u64 = st.integers(0, 2 ** 64 - 1)


@given(st.one_of(
    st.builds(TailRequest, st.integers(0, 9), u64),
    st.builds(TailResponse, st.integers(0, 9), u64,
              st.lists(st.tuples(u64, st.binary(max_size=20)), max_size=4).map(tuple), st.booleans()),
    st.builds(TailMissing, st.integers(0, 9), u64, u64),
    st.builds(SnapshotRequest, st.integers(0, 9), u64),
    st.builds(SnapshotChunk, st.integers(0, 9), u64, st.integers(0, 2 ** 32 - 1), u64, st.booleans(),
              st.binary(max_size=64)),
))
def test_catchup_codec_roundtrip(m):
    assert decode(encode(m)) == m


@given(st.lists(st.tuples(st.binary(min_size=1, max_size=8), st.binary(max_size=8)), max_size=10))
def test_snapshot_items_roundtrip(items):
    assert decode_items(encode_items(items)) == items


def test_fault_free_run_agrees():
    r = run_schedule(1, writes=60)
    assert r.ok, r.failures()
    assert r.writes_ok >= 60


def test_dueling_proposers_still_agree():
    # every node proposes as if it held the lease; Paxos alone keeps the log consistent
    bad = [s for s in range(30)
           if not run_schedule(s, settings=NodeSettings(force_master=True), writes=60).ok]
    assert not bad


def test_tail_catchup_matches_witness():
    r = catchup_run(3, behind=100)
    assert r.ok and r.tail_catchups > 0 and r.full_copies == 0


def test_full_copy_catchup_matches_witness():
    r = catchup_run(3, behind=200, tail_entries=20)
    assert r.ok and r.full_copies > 0


def test_master_behind_a_snapshot_restarts_its_round():
    # a master that catches up by full copy must not stay preparing a decided instance
    r = run_schedule(191)
    assert r.ok, [v.detail for v in r.failures()]
    assert r.ops_completed == r.ops_total


def test_ignoring_phase_one_reports_is_caught(monkeypatch):
    # negative control: a proposer that forgets values accepted under lower
    # ballots must make the agreement checker fire on some schedule
    monkeypatch.setattr(paxos.Proposer, "_merge", lambda self, *a: None)
    failed = []
    for s in range(40):
        r = run_schedule(s, settings=NodeSettings(force_master=True), writes=60)
        failed += [v.name for v in r.failures()]
    assert "log_agreement" in failed


def _conflict_with(acceptor_cls):
    """Two proposers interleave around a crash of the shared acceptor 1.

    Returns the set of values that reached a majority of accepts.
    """
    disks = [MemDisk() for _ in range(3)]
    accs = [acceptor_cls(i, Store(d)) for i, d in enumerate(disks)]

    def call(i, method, req):
        resp, changed = getattr(accs[i], method)(req)
        if changed:
            accs[i].store.current().sync()
        return resp

    low, high = Ballot(1, 0), Ballot(2, 2)
    assert call(0, "on_prepare", PrepareRequest(0, 1, low)).outcome == Outcome.PROMISED
    assert call(1, "on_prepare", PrepareRequest(0, 1, low)).outcome == Outcome.PROMISED
    assert call(1, "on_prepare", PrepareRequest(2, 1, high)).outcome == Outcome.PROMISED
    assert call(2, "on_prepare", PrepareRequest(2, 1, high)).outcome == Outcome.PROMISED
    disks[1].crash()
    accs[1] = acceptor_cls(1, Store(disks[1]))
    decided = set()
    for value, ballot, group in ((b"v1", low, (0, 1)), (b"v2", high, (1, 2))):
        oks = [call(i, "on_propose", ProposeRequest(0, 1, ballot, value)).outcome for i in group]
        if oks.count(Outcome.ACCEPTED) == 2:
            decided.add(value)
    return decided


def test_promise_survives_restart():
    assert _conflict_with(Acceptor) == {b"v2"}


def test_unpersisted_promise_breaks_agreement():
    class Forgetful(Acceptor):
        def _stage_promise(self):
            pass

    assert _conflict_with(Forgetful) == {b"v1", b"v2"}


def test_checkers_pass_on_a_real_log():
    r = run_schedule(5, writes=40, keep_events=True)
    assert all(checkers.check_all(r.events))
