"""Paxos roles for one log slot at a time.

The acceptor keeps a single durable promise that covers every instance, plus
one accepted record per undecided instance. A proposer whose prepare at
instance ``k`` gathered a majority may therefore propose ``k+1, k+2, ...``
with the same ballot and skip phase 1, provided it carries forward any values
the prepare responses reported for those later instances.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .core import NULL_BALLOT, Ballot, KeyspaceError, Malformed, Reader, Writer, read_ballot, write_ballot

FAMILY = 0x01

PREPARE, PREPARE_RESP, PROPOSE, PROPOSE_RESP, LEARN, STATUS = 1, 2, 3, 4, 5, 6

SYS_PROMISED = b"\x00paxos/promised"
SYS_ACCEPTED = b"\x00paxos/acc/"


class ConflictingDecision(KeyspaceError):
    """Two different values were decided for one instance. Must never happen."""


class Outcome(enum.IntEnum):
    REJECTED = 0
    PROMISED = 1
    ACCEPTED = 2


# --- messages ---------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class PrepareRequest:
    sender: int
    instance: int
    ballot: Ballot


@dataclass(frozen=True, slots=True)
class PrepareResponse:
    sender: int
    instance: int
    ballot: Ballot
    outcome: Outcome
    promised: Ballot = NULL_BALLOT
    accepted_ballot: Ballot | None = None
    accepted_value: bytes | None = None
    # values accepted for instances after ``instance``: (instance, ballot, value)
    later: tuple[tuple[int, Ballot, bytes], ...] = ()


@dataclass(frozen=True, slots=True)
class ProposeRequest:
    sender: int
    instance: int
    ballot: Ballot
    value: bytes


@dataclass(frozen=True, slots=True)
class ProposeResponse:
    sender: int
    instance: int
    ballot: Ballot
    outcome: Outcome
    promised: Ballot = NULL_BALLOT


@dataclass(frozen=True, slots=True)
class Learn:
    sender: int
    instance: int
    value: bytes


@dataclass(frozen=True, slots=True)
class Status:
    """Periodic gossip of a node's applied position."""

    sender: int
    applied: int
    is_master: bool


def encode(m) -> bytes:
    w = Writer().u8(FAMILY)
    if isinstance(m, PrepareRequest):
        w.u8(PREPARE).u32(m.sender).u64(m.instance)
        write_ballot(w, m.ballot)
    elif isinstance(m, PrepareResponse):
        w.u8(PREPARE_RESP).u32(m.sender).u64(m.instance)
        write_ballot(w, m.ballot)
        w.u8(m.outcome)
        write_ballot(w, m.promised)
        if m.accepted_ballot is None:
            w.u8(0)
        else:
            w.u8(1)
            write_ballot(w, m.accepted_ballot)
            w.blob(m.accepted_value)
        w.u32(len(m.later))
        for inst, b, v in m.later:
            w.u64(inst)
            write_ballot(w, b)
            w.blob(v)
    elif isinstance(m, ProposeRequest):
        w.u8(PROPOSE).u32(m.sender).u64(m.instance)
        write_ballot(w, m.ballot)
        w.blob(m.value)
    elif isinstance(m, ProposeResponse):
        w.u8(PROPOSE_RESP).u32(m.sender).u64(m.instance)
        write_ballot(w, m.ballot)
        w.u8(m.outcome)
        write_ballot(w, m.promised)
    elif isinstance(m, Learn):
        w.u8(LEARN).u32(m.sender).u64(m.instance).blob(m.value)
    elif isinstance(m, Status):
        w.u8(STATUS).u32(m.sender).u64(m.applied).u8(int(m.is_master))
    else:
        raise TypeError(m)
    return w.getvalue()


def decode(b: bytes):
    r = Reader(b)
    if r.u8() != FAMILY:
        raise Malformed("not a paxos message")
    t = r.u8()
    sender = r.u32()
    if t == PREPARE:
        m = PrepareRequest(sender, r.u64(), read_ballot(r))
    elif t == PREPARE_RESP:
        inst, bal, out, prom = r.u64(), read_ballot(r), Outcome(r.u8()), read_ballot(r)
        ab = av = None
        if r.u8():
            ab, av = read_ballot(r), r.blob()
        later = tuple((r.u64(), read_ballot(r), r.blob()) for _ in range(r.u32()))
        m = PrepareResponse(sender, inst, bal, out, prom, ab, av, later)
    elif t == PROPOSE:
        m = ProposeRequest(sender, r.u64(), read_ballot(r), r.blob())
    elif t == PROPOSE_RESP:
        m = ProposeResponse(sender, r.u64(), read_ballot(r), Outcome(r.u8()), read_ballot(r))
    elif t == LEARN:
        m = Learn(sender, r.u64(), r.blob())
    elif t == STATUS:
        m = Status(sender, r.u64(), bool(r.u8()))
    else:
        raise Malformed(f"unknown paxos message type {t}")
    r.done()
    return m


# --- acceptor ---------------------------------------------------------------

@dataclass(frozen=True)
class AcceptorState:
    instance: int
    promised: Ballot | None
    accepted_ballot: Ballot | None
    accepted_value: bytes | None


def _acc_key(instance: int) -> bytes:
    return SYS_ACCEPTED + struct.pack(">Q", instance)


def _enc_record(ballot: Ballot, value: bytes) -> bytes:
    w = Writer()
    write_ballot(w, ballot)
    return w.blob(value).getvalue()


class Acceptor:
    """Acceptor state for all instances; durable through a ``Store``.

    Handlers mutate memory and stage the changed records in the store's open
    transaction. The caller must sync before releasing the response.
    """

    def __init__(self, node_id: int, store=None) -> None:
        self.node_id = node_id
        self.store = store
        self.promised: Ballot = NULL_BALLOT
        self.accepted: dict[int, tuple[Ballot, bytes]] = {}
        if store is not None:
            self._load()

    def _load(self) -> None:
        raw = self.store.get(SYS_PROMISED)
        if raw is not None:
            self.promised = read_ballot(Reader(raw))
        end = SYS_ACCEPTED + b"\xff" * 9
        for k, v in self.store.iterate(SYS_ACCEPTED):
            if k > end or not k.startswith(SYS_ACCEPTED):
                break
            r = Reader(v)
            self.accepted[struct.unpack(">Q", k[len(SYS_ACCEPTED):])[0]] = (read_ballot(r), r.blob())

    def state(self, instance: int) -> AcceptorState:
        acc = self.accepted.get(instance)
        return AcceptorState(instance, None if self.promised.is_null() else self.promised,
                             acc[0] if acc else None, acc[1] if acc else None)

    def _stage_promise(self) -> None:
        if self.store is not None:
            w = Writer()
            write_ballot(w, self.promised)
            self.store.current().put(SYS_PROMISED, w.getvalue())

    def on_prepare(self, m: PrepareRequest) -> tuple[PrepareResponse, bool]:
        """Returns the response and whether durable state changed."""
        if m.ballot < self.promised:
            return PrepareResponse(self.node_id, m.instance, m.ballot, Outcome.REJECTED, self.promised), False
        changed = m.ballot != self.promised
        if changed:
            self.promised = m.ballot
            self._stage_promise()
        acc = self.accepted.get(m.instance)
        later = tuple(sorted((i, b, v) for i, (b, v) in self.accepted.items() if i > m.instance))
        resp = PrepareResponse(self.node_id, m.instance, m.ballot, Outcome.PROMISED, self.promised,
                               acc[0] if acc else None, acc[1] if acc else None, later)
        return resp, changed

    def on_propose(self, m: ProposeRequest) -> tuple[ProposeResponse, bool]:
        if m.ballot < self.promised:
            return ProposeResponse(self.node_id, m.instance, m.ballot, Outcome.REJECTED, self.promised), False
        changed = False
        if m.ballot != self.promised:
            self.promised = m.ballot
            self._stage_promise()
            changed = True
        if self.accepted.get(m.instance) != (m.ballot, m.value):
            self.accepted[m.instance] = (m.ballot, m.value)
            if self.store is not None:
                self.store.current().put(_acc_key(m.instance), _enc_record(m.ballot, m.value))
            changed = True
        return ProposeResponse(self.node_id, m.instance, m.ballot, Outcome.ACCEPTED, self.promised), changed

    def forget(self, upto: int) -> None:
        """Drop accepted records for instances <= upto (they are decided and applied)."""
        for i in [i for i in self.accepted if i <= upto]:
            del self.accepted[i]
            if self.store is not None:
                self.store.current().delete(_acc_key(i))


def acceptor_key_filter(k: bytes) -> bool:
    return k == SYS_PROMISED or k.startswith(SYS_ACCEPTED)


# --- proposer ---------------------------------------------------------------

class Phase(enum.Enum):
    IDLE = "IDLE"
    PREPARING = "PREPARING"
    PREPARED = "PREPARED"  # phase 1 done for this and later instances
    PROPOSING = "PROPOSING"
    DECIDED = "DECIDED"


@dataclass
class Proposer:
    node_id: int
    cluster_size: int
    ballot: Ballot = NULL_BALLOT
    phase: Phase = Phase.IDLE
    instance: int = 0
    value: bytes | None = None
    promises: set[int] = field(default_factory=set)
    accepts: set[int] = field(default_factory=set)
    # highest-ballot value reported per instance during phase 1
    recovered: dict[int, tuple[Ballot, bytes]] = field(default_factory=dict)
    highest_seen: int = 0

    @property
    def majority(self) -> int:
        return self.cluster_size // 2 + 1

    def prepare(self, instance: int) -> PrepareRequest:
        counter = max(self.ballot.counter, self.highest_seen) + 1
        self.ballot = Ballot(counter, self.node_id)
        self.phase = Phase.PREPARING
        self.instance = instance
        self.value = None
        self.promises = set()
        self.accepts = set()
        self.recovered = {}
        return PrepareRequest(self.node_id, instance, self.ballot)

    def _merge(self, inst: int, ballot: Ballot, value: bytes) -> None:
        cur = self.recovered.get(inst)
        if cur is None or ballot > cur[0]:
            self.recovered[inst] = (ballot, value)

    def on_prepare_response(self, m: PrepareResponse) -> str | None:
        """Returns "prepared", "rejected" or None (no transition)."""
        if self.phase != Phase.PREPARING or m.instance != self.instance or m.ballot != self.ballot:
            return None
        if m.outcome == Outcome.REJECTED:
            self.highest_seen = max(self.highest_seen, m.promised.counter)
            self.phase = Phase.IDLE
            return "rejected"
        if m.sender in self.promises:
            return None
        self.promises.add(m.sender)
        if m.accepted_ballot is not None:
            self._merge(m.instance, m.accepted_ballot, m.accepted_value)
        for inst, b, v in m.later:
            self._merge(inst, b, v)
        if len(self.promises) >= self.majority:
            self.phase = Phase.PREPARED
            return "prepared"
        return None

    def pending_recovery(self) -> bool:
        return any(i >= self.instance for i in self.recovered)

    def propose(self, value: bytes) -> ProposeRequest:
        """Phase 2 for the current instance; a recovered value takes precedence."""
        assert self.phase == Phase.PREPARED
        rec = self.recovered.get(self.instance)
        self.value = rec[1] if rec is not None else value
        self.phase = Phase.PROPOSING
        self.accepts = set()
        return ProposeRequest(self.node_id, self.instance, self.ballot, self.value)

    def on_propose_response(self, m: ProposeResponse) -> str | None:
        if self.phase != Phase.PROPOSING or m.instance != self.instance or m.ballot != self.ballot:
            return None
        if m.outcome == Outcome.REJECTED:
            self.highest_seen = max(self.highest_seen, m.promised.counter)
            self.phase = Phase.IDLE
            return "rejected"
        self.accepts.add(m.sender)
        if len(self.accepts) >= self.majority:
            self.phase = Phase.DECIDED
            return "decided"
        return None

    def advance(self, multipaxos: bool = True) -> None:
        """Move to the next instance after a decision at the current one."""
        self.recovered.pop(self.instance, None)
        self.instance += 1
        self.value = None
        self.accepts = set()
        self.phase = Phase.PREPARED if multipaxos else Phase.IDLE


class Learner:
    """Decided values per instance, with conflict detection."""

    def __init__(self) -> None:
        self.decided: dict[int, bytes] = {}

    def learn(self, instance: int, value: bytes) -> bool:
        prior = self.decided.get(instance)
        if prior is None:
            self.decided[instance] = value
            return True
        if prior != value:
            raise ConflictingDecision(
                f"instance {instance}: {len(prior)}-byte value {hash(prior):x} vs "
                f"{len(value)}-byte value {hash(value):x}")
        return False

    def forget_below(self, instance: int) -> None:
        for i in [i for i in self.decided if i < instance]:
            del self.decided[i]
