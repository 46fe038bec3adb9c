import pytest
from hypothesis import given, strategies as st

from keyspace.core import Ballot
from keyspace.harness.explore import ExploreConfig, explore
from keyspace.harness.lease_sim import LeaseNode, run_lease
from keyspace.harness.sim import SimConfig, SimWorld
from keyspace.paxoslease import (
    T_ACQUIRE, LeaseConfig, LeaseLearn, LeasePrepare, LeasePrepareResponse, LeasePropose, LeaseProposeResponse,
    Outcome, PaxosLease, decode, encode,
)

SECOND = 1_000_000


class Host:
    def __init__(self, net, node_id, n):
        self.net, self.node_id, self.cluster_size = net, node_id, n
        self.timers = {}
        self.acquired = []
        self.lost = 0

    def now(self):
        return self.net.clock

    def send_lease(self, dst, payload):
        self.net.queue.append((dst, payload))

    def set_timer(self, key, delay):
        self.timers[key] = self.net.clock + delay

    def cancel_timer(self, key):
        self.timers.pop(key, None)

    def random_delay(self, lo, hi):
        return lo

    def lease_eligible(self):
        return True

    def lease_acquired(self, expiry, extended):
        self.acquired.append(expiry)

    def lease_lost(self):
        self.lost += 1


class Net:
    """Instant, lossless delivery between in-process leases."""

    def __init__(self, n=3, restarted=(), config=None):
        self.clock = 0
        self.queue = []
        self.hosts = [Host(self, i, n) for i in range(n)]
        self.leases = [PaxosLease(h, config, i in restarted) for i, h in enumerate(self.hosts)]
        self.delivered = 0

    def flush(self, drop=lambda dst, m: False):
        while self.queue:
            dst, payload = self.queue.pop(0)
            if not drop(dst, decode(payload)):
                self.delivered += 1
                self.leases[dst].on_message(payload)

    def advance(self, dt):
        self.clock += dt
        for lease, h in zip(self.leases, self.hosts):
            for key, at in sorted(h.timers.items(), key=lambda kv: kv[1]):
                if at <= self.clock and h.timers.get(key) == at:
                    del h.timers[key]
                    lease.on_timer(key)
        self.flush()


def test_uncontended_acquire_one_exchange():
    net = Net()
    net.leases[0].on_timer(T_ACQUIRE)
    net.flush()
    assert net.leases[0].is_master()
    assert [l.current_master() for l in net.leases] == [0, 0, 0]
    # prepare, promise, propose, accept to and from two peers, then two learns
    assert net.delivered == 10


def test_two_racers_one_winner():
    net = Net()
    net.leases[0].on_timer(T_ACQUIRE)
    net.leases[1].on_timer(T_ACQUIRE)
    net.flush()
    for _ in range(20):
        net.advance(100_000)
    masters = [i for i, l in enumerate(net.leases) if l.is_master()]
    assert len(masters) == 1


def test_learned_master_expires():
    net = Net()
    lease = net.leases[1]
    assert lease.current_master() is None
    lease.on_learn(LeaseLearn(2, 2, 7 * SECOND))
    assert lease.current_master() == 2
    net.clock += 8 * SECOND
    assert lease.current_master() is None


def test_quarantined_acceptor_is_silent():
    net = Net(restarted={1})
    a = net.leases[1]
    assert a.quarantined()
    assert a.on_prepare(LeasePrepare(0, 1, Ballot(1, 0))) is None
    assert a.on_propose(LeasePropose(0, 1, Ballot(1, 0), 0, 7 * SECOND)) is None
    net.clock += LeaseConfig().quarantine
    assert not a.quarantined()
    assert a.on_prepare(LeasePrepare(0, 1, Ballot(1, 0))).outcome == Outcome.PROMISED


def test_acceptor_rules():
    net = Net()
    a = net.leases[2]
    a.on_prepare(LeasePrepare(0, 1, Ballot(5, 0)))
    assert a.on_prepare(LeasePrepare(1, 1, Ballot(3, 1))).outcome == Outcome.REJECTED
    a.on_propose(LeasePropose(0, 1, Ballot(5, 0), 0, 7 * SECOND))
    assert a.on_prepare(LeasePrepare(1, 2, Ballot(6, 1))).owner == 0
    net.clock += 7 * SECOND
    # the accepted lease expired locally, so it is no longer reported
    assert a.on_prepare(LeasePrepare(1, 3, Ballot(7, 1))).owner is None


def test_slow_attempt_is_not_claimed():
    net = Net()
    p = net.leases[0]
    p.on_timer(T_ACQUIRE)
    net.flush(drop=lambda dst, m: isinstance(m, LeaseProposeResponse))
    net.clock += 8 * SECOND
    net.flush()
    for resp in [LeaseProposeResponse(i, p.request, p.ballot, Outcome.ACCEPTED, p.ballot) for i in (1, 2)]:
        p.on_propose_response(resp)
    assert not p.is_master()


def test_no_disk_writes():
    net = Net()
    net.leases[0].on_timer(T_ACQUIRE)
    net.flush()
    assert all(l.storage_ops == 0 for l in net.leases)


def test_config_validation():
    with pytest.raises(ValueError):
        LeaseConfig(lease_time=8 * SECOND)
    with pytest.raises(ValueError):
        LeaseConfig(renew_period=7 * SECOND)
    c = LeaseConfig(max_drift=0.01)
    assert c.safe_duration < c.lease_time


ballots = st.builds(Ballot, st.integers(0, 2 ** 64 - 1), st.integers(0, 2 ** 32 - 1))
u64 = st.integers(0, 2 ** 64 - 1)


@given(st.one_of(
    st.builds(LeasePrepare, st.integers(0, 9), u64, ballots),
    st.builds(LeasePrepareResponse, st.integers(0, 9), u64, ballots, st.sampled_from(list(Outcome)), ballots,
              st.one_of(st.none(), st.integers(0, 9))),
    st.builds(LeasePropose, st.integers(0, 9), u64, ballots, st.integers(0, 9), st.integers(0, 7 * SECOND)),
    st.builds(LeaseProposeResponse, st.integers(0, 9), u64, ballots, st.sampled_from(list(Outcome)), ballots),
    st.builds(LeaseLearn, st.integers(0, 9), st.integers(0, 9), st.integers(0, 7 * SECOND)),
))
def test_codec_roundtrip(m):
    assert decode(encode(m)) == m


def test_no_flapping_on_a_stable_network():
    cfg = SimConfig(n=3, seed=1, max_skew_ppm=10_000, record_traffic=False)
    world = SimWorld(cfg, lambda w, env, i, r: LeaseNode(env, i, 3, LeaseConfig(), r))
    world.run(100_000 * SECOND)
    holders = {ev[1] for ev in world.events if ev[2] == "lease"}
    assert len(holders) == 1
    assert not any(ev[2] == "lease_lost" for ev in world.events)


def test_small_exploration_is_safe():
    res = explore(ExploreConfig(max_depth=7))
    assert res.safe and res.states > 100


def test_randomized_lease_runs_sample():
    bad = [r.seed for r in (run_lease(s) for s in range(40)) if not r.ok]
    assert not bad
