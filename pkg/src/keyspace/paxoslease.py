"""Master lease negotiation over in-memory Paxos state.

Nothing here touches stable storage. A node that restarts has lost its
acceptor promises, so it stays silent for ``quarantine`` local time; by then
every lease it could have accepted before the crash has lapsed.

Timing: an acceptor times an accepted lease from when the propose arrived; the
proposer times its own lease from when it *sent* the request, and shortens it
by the clock drift bound, so its belief ends no later (in real time) than any
acceptor's copy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from operator import attrgetter

from .core import NULL_BALLOT, Ballot, Malformed, Reader, Writer, read_ballot, write_ballot

FAMILY = 0x02
PREPARE, PREPARE_RESP, PROPOSE, PROPOSE_RESP, LEARN = 1, 2, 3, 4, 5

NO_OWNER = 0xFFFFFFFF

T_ACQUIRE = "lease.acquire"
T_TIMEOUT = "lease.timeout"
T_RENEW = "lease.renew"
T_EXPIRE = "lease.expire"


@dataclass
class LeaseConfig:
    lease_time: int = 7_000_000
    renew_period: int = 2_000_000
    quarantine: int = 7_000_000
    max_drift: float = 0.01
    attempt_timeout: int = 1_000_000
    backoff_min: int = 50_000
    backoff_max: int = 200_000
    extend_skip_prepare: bool = True

    MAX_LEASE_TIME = 7_000_000

    def __post_init__(self) -> None:
        if not 0 < self.lease_time <= self.MAX_LEASE_TIME:
            raise ValueError(f"lease time must be in (0, {self.MAX_LEASE_TIME}] us")
        if self.renew_period >= self.lease_time:
            raise ValueError("renew period must be shorter than the lease")
        if not 0 <= self.max_drift < 1:
            raise ValueError("drift bound must be in [0, 1)")

    @property
    def safe_duration(self) -> int:
        """Lease length as counted by the proposer's own clock."""
        e = self.max_drift
        return int(self.lease_time * (1 - e) / (1 + e))


class Outcome(enum.IntEnum):
    REJECTED = 0
    PROMISED = 1
    ACCEPTED = 2


# --- messages ---------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class LeasePrepare:
    sender: int
    request: int
    ballot: Ballot


@dataclass(frozen=True, slots=True)
class LeasePrepareResponse:
    sender: int
    request: int
    ballot: Ballot
    outcome: Outcome
    promised: Ballot = NULL_BALLOT
    owner: int | None = None  # holder of an unexpired accepted lease


@dataclass(frozen=True, slots=True)
class LeasePropose:
    sender: int
    request: int
    ballot: Ballot
    owner: int
    duration: int


@dataclass(frozen=True, slots=True)
class LeaseProposeResponse:
    sender: int
    request: int
    ballot: Ballot
    outcome: Outcome
    promised: Ballot = NULL_BALLOT


@dataclass(frozen=True, slots=True)
class LeaseLearn:
    sender: int
    owner: int
    duration: int


def encode(m) -> bytes:
    w = Writer().u8(FAMILY)
    if isinstance(m, LeasePrepare):
        w.u8(PREPARE).u32(m.sender).u64(m.request)
        write_ballot(w, m.ballot)
    elif isinstance(m, LeasePrepareResponse):
        w.u8(PREPARE_RESP).u32(m.sender).u64(m.request)
        write_ballot(w, m.ballot)
        w.u8(m.outcome)
        write_ballot(w, m.promised)
        w.u32(NO_OWNER if m.owner is None else m.owner)
    elif isinstance(m, LeasePropose):
        w.u8(PROPOSE).u32(m.sender).u64(m.request)
        write_ballot(w, m.ballot)
        w.u32(m.owner).u64(m.duration)
    elif isinstance(m, LeaseProposeResponse):
        w.u8(PROPOSE_RESP).u32(m.sender).u64(m.request)
        write_ballot(w, m.ballot)
        w.u8(m.outcome)
        write_ballot(w, m.promised)
    elif isinstance(m, LeaseLearn):
        w.u8(LEARN).u32(m.sender).u32(m.owner).u64(m.duration)
    else:
        raise TypeError(m)
    return w.getvalue()


def decode(b: bytes):
    r = Reader(b)
    if r.u8() != FAMILY:
        raise Malformed("not a lease message")
    t = r.u8()
    sender = r.u32()
    if t == PREPARE:
        m = LeasePrepare(sender, r.u64(), read_ballot(r))
    elif t == PREPARE_RESP:
        req, bal, out, prom, owner = r.u64(), read_ballot(r), Outcome(r.u8()), read_ballot(r), r.u32()
        m = LeasePrepareResponse(sender, req, bal, out, prom, None if owner == NO_OWNER else owner)
    elif t == PROPOSE:
        m = LeasePropose(sender, r.u64(), read_ballot(r), r.u32(), r.u64())
    elif t == PROPOSE_RESP:
        m = LeaseProposeResponse(sender, r.u64(), read_ballot(r), Outcome(r.u8()), read_ballot(r))
    elif t == LEARN:
        m = LeaseLearn(sender, r.u32(), r.u64())
    else:
        raise Malformed(f"unknown lease message type {t}")
    r.done()
    return m


# --- the protocol -----------------------------------------------------------

class State(enum.Enum):
    IDLE = 0
    PREPARING = 1
    PROPOSING = 2


class PaxosLease:
    """Proposer, acceptor and learner for the master lease on one node.

    ``host`` supplies: ``node_id``, ``cluster_size``, ``now()``,
    ``send_lease(dst, payload)``, ``set_timer(key, delay)``,
    ``cancel_timer(key)``, ``random_delay(lo, hi)``, ``lease_eligible()``,
    ``lease_acquired(expiry)``, ``lease_lost()``.
    """

    # fields that make up the protocol state (used for cloning and hashing)
    FIELDS = ("ballot", "highest_seen", "state", "request", "request_time", "promises",
              "accepts", "open_owner", "expiry", "promised", "acc_owner", "acc_expiry",
              "master", "master_expiry", "quarantine_until")

    def __init__(self, host, config: LeaseConfig | None = None, restarted: bool = False,
                 epoch: int = 0) -> None:
        self.host = host
        self.cfg = config or LeaseConfig()
        self.id = host.node_id
        self.n = host.cluster_size
        # proposer
        self.ballot = Ballot(0, self.id)
        self.highest_seen = 0
        self.state = State.IDLE
        # request ids carry the boot epoch so a response delayed across a
        # restart can never be matched to a new attempt
        self.request = (epoch & 0xFFFFFFFF) << 32
        self.request_time = 0
        self.promises: frozenset[int] = frozenset()
        self.accepts: frozenset[int] = frozenset()
        self.open_owner: int | None = None
        self.expiry: int | None = None
        # acceptor
        self.promised = NULL_BALLOT
        self.acc_owner: int | None = None
        self.acc_expiry = 0
        # learner
        self.master: int | None = None
        self.master_expiry = 0
        self.restarted = restarted
        self.quarantine_until = host.now() + self.cfg.quarantine if restarted else 0
        # instrumentation: stable-storage operations issued (must stay zero)
        self.storage_ops = 0

    @property
    def majority(self) -> int:
        return self.n // 2 + 1

    # lifecycle

    def start(self) -> None:
        now = self.host.now()
        if now < self.quarantine_until:
            self.host.set_timer(T_ACQUIRE, self.quarantine_until - now)
        elif self.restarted:
            self._try_acquire()
        else:
            self.host.set_timer(T_ACQUIRE, self.host.random_delay(0, self.cfg.backoff_max))

    def on_timer(self, key: str) -> None:
        if key == T_ACQUIRE:
            self._try_acquire()
        elif key == T_TIMEOUT:
            if self.state != State.IDLE:
                self._fail_attempt()
        elif key == T_RENEW:
            self._renew()
        elif key == T_EXPIRE:
            self._check_expiry()

    # queries

    def is_master(self, now: int | None = None) -> bool:
        if self.expiry is None:
            return False
        return (self.host.now() if now is None else now) < self.expiry

    def current_master(self) -> int | None:
        now = self.host.now()
        if self.is_master(now):
            return self.id
        if self.master is not None and now < self.master_expiry and self.master != self.id:
            return self.master
        return None

    def quarantined(self) -> bool:
        return self.host.now() < self.quarantine_until

    # proposer

    def _try_acquire(self) -> None:
        now = self.host.now()
        if now < self.quarantine_until:
            self.host.set_timer(T_ACQUIRE, self.quarantine_until - now)
            return
        if self.state != State.IDLE:
            return
        other = self.current_master()
        if other is not None and other != self.id:
            self.host.set_timer(T_ACQUIRE, self.master_expiry - now + self._backoff())
            return
        if not self.host.lease_eligible():
            self.host.set_timer(T_ACQUIRE, self.cfg.renew_period)
            return
        self._prepare()

    def _backoff(self) -> int:
        return self.host.random_delay(self.cfg.backoff_min, self.cfg.backoff_max)

    def _new_request(self) -> None:
        self.request += 1
        self.request_time = self.host.now()
        self.host.set_timer(T_TIMEOUT, self.cfg.attempt_timeout)

    def _prepare(self) -> None:
        self.ballot = Ballot(max(self.ballot.counter, self.highest_seen) + 1, self.id)
        self.state = State.PREPARING
        self.promises = frozenset()
        self.open_owner = None
        self._new_request()
        msg = LeasePrepare(self.id, self.request, self.ballot)
        self._broadcast(msg)
        resp = self.on_prepare(msg)
        if resp is not None:
            self.on_prepare_response(resp)

    def _propose(self) -> None:
        if not self.host.lease_eligible():
            self._fail_attempt()
            return
        self.state = State.PROPOSING
        self.accepts = frozenset()
        msg = LeasePropose(self.id, self.request, self.ballot, self.id, self.cfg.lease_time)
        self._broadcast(msg)
        resp = self.on_propose(msg)
        if resp is not None:
            self.on_propose_response(resp)

    def _broadcast(self, msg) -> None:
        payload = encode(msg)
        for dst in range(self.n):
            if dst != self.id:
                self.host.send_lease(dst, payload)

    def _renew(self) -> None:
        if not self.is_master():
            return
        self.host.set_timer(T_RENEW, self.cfg.renew_period)
        if self.state != State.IDLE:
            return
        if self.cfg.extend_skip_prepare:
            self._new_request()
            self._propose()
        else:
            self._prepare()

    def _fail_attempt(self) -> None:
        self.state = State.IDLE
        self.host.cancel_timer(T_TIMEOUT)
        self.host.set_timer(T_ACQUIRE, self._backoff())

    def on_prepare_response(self, m: LeasePrepareResponse) -> None:
        if self.state != State.PREPARING or m.request != self.request or m.ballot != self.ballot:
            return
        if m.outcome == Outcome.REJECTED:
            self.highest_seen = max(self.highest_seen, m.promised.counter)
            self._fail_attempt()
            return
        self.promises = self.promises | {m.sender}
        if m.owner is not None and m.owner != self.id:
            self.open_owner = m.owner
        if len(self.promises) < self.majority:
            return
        if self.open_owner is not None:
            # someone still holds a lease; look again shortly
            self.state = State.IDLE
            self.host.cancel_timer(T_TIMEOUT)
            self.host.set_timer(T_ACQUIRE, self.cfg.attempt_timeout + self._backoff())
            return
        self._propose()

    def on_propose_response(self, m: LeaseProposeResponse) -> None:
        if self.state != State.PROPOSING or m.request != self.request or m.ballot != self.ballot:
            return
        if m.outcome == Outcome.REJECTED:
            self.highest_seen = max(self.highest_seen, m.promised.counter)
            self._fail_attempt()
            return
        self.accepts = self.accepts | {m.sender}
        if len(self.accepts) < self.majority:
            return
        self.state = State.IDLE
        self.host.cancel_timer(T_TIMEOUT)
        now = self.host.now()
        expiry = self.request_time + self.cfg.safe_duration
        if now >= expiry:
            # the attempt took too long to count
            self._fail_attempt()
            return
        extended = self.is_master(now)
        self.expiry = expiry
        self.master, self.master_expiry = self.id, expiry
        self.host.set_timer(T_EXPIRE, expiry - now)
        if not extended:
            self.host.set_timer(T_RENEW, self.cfg.renew_period)
        self._broadcast(LeaseLearn(self.id, self.id, self.cfg.lease_time))
        self.host.lease_acquired(expiry, extended)

    def _check_expiry(self) -> None:
        if self.expiry is None:
            return
        now = self.host.now()
        if now < self.expiry:
            self.host.set_timer(T_EXPIRE, self.expiry - now)
            return
        self.expiry = None
        if self.master == self.id:
            self.master = None
        self.host.cancel_timer(T_RENEW)
        self.host.lease_lost()
        if self.state == State.IDLE:
            self.host.set_timer(T_ACQUIRE, self._backoff())

    def crash_stop(self) -> None:
        """Drop the master belief immediately (node is going down)."""
        self.expiry = None

    # acceptor

    def _expire_accepted(self, now: int) -> None:
        if self.acc_owner is not None and now >= self.acc_expiry:
            self.acc_owner = None

    def on_prepare(self, m: LeasePrepare) -> LeasePrepareResponse | None:
        now = self.host.now()
        if now < self.quarantine_until:
            return None
        self._expire_accepted(now)
        if m.ballot < self.promised:
            return LeasePrepareResponse(self.id, m.request, m.ballot, Outcome.REJECTED, self.promised)
        self.promised = m.ballot
        return LeasePrepareResponse(self.id, m.request, m.ballot, Outcome.PROMISED, self.promised, self.acc_owner)

    def on_propose(self, m: LeasePropose) -> LeaseProposeResponse | None:
        now = self.host.now()
        if now < self.quarantine_until:
            return None
        self._expire_accepted(now)
        if m.ballot < self.promised:
            return LeaseProposeResponse(self.id, m.request, m.ballot, Outcome.REJECTED, self.promised)
        self.promised = m.ballot
        self.acc_owner = m.owner
        self.acc_expiry = now + min(m.duration, LeaseConfig.MAX_LEASE_TIME)
        return LeaseProposeResponse(self.id, m.request, m.ballot, Outcome.ACCEPTED, self.promised)

    # learner

    def on_learn(self, m: LeaseLearn) -> None:
        if m.owner == self.id:
            return
        self.master = m.owner
        self.master_expiry = self.host.now() + min(m.duration, LeaseConfig.MAX_LEASE_TIME)

    # dispatch

    def on_message(self, payload: bytes) -> None:
        self.dispatch(decode(payload))

    def dispatch(self, m) -> None:
        if isinstance(m, LeasePrepare):
            resp = self.on_prepare(m)
            if resp is not None:
                self.host.send_lease(m.sender, encode(resp))
        elif isinstance(m, LeasePropose):
            resp = self.on_propose(m)
            if resp is not None:
                self.host.send_lease(m.sender, encode(resp))
        elif isinstance(m, LeasePrepareResponse):
            self.on_prepare_response(m)
        elif isinstance(m, LeaseProposeResponse):
            self.on_propose_response(m)
        elif isinstance(m, LeaseLearn):
            self.on_learn(m)

    # exploration support

    def state_key(self) -> tuple:
        return _STATE(self)

    def clone(self, host) -> "PaxosLease":
        c = object.__new__(PaxosLease)
        c.__dict__.update(self.__dict__)
        c.host = host
        return c


_STATE = attrgetter(*PaxosLease.FIELDS)
