import asyncio
import socket

import pytest

from keyspace.confparse import ParseError
from keyspace.transport import (
    LOSSY_MAX, Channel, ConnectionLost, Delivered, Envelope, FaultSchedule, NetworkTransport, Partition,
    PayloadTooLarge, SimTransport, frame, parse_schedule, route,
)


def send(tr, src, dst, payload=b"x", t=0, channel=Channel.LOSSY):
    tr.send(Envelope(src, dst, channel, payload, t))


def drain(tr, until=10 ** 12):
    return [e for e in tr.poll(until)]


def test_fault_free_delivers_once():
    tr = SimTransport(2)
    send(tr, 0, 1)
    ev = drain(tr)
    assert len(ev) == 1 and isinstance(ev[0], Delivered) and ev[0].envelope.dst == 1


def test_certain_loss_delivers_nothing():
    tr = SimTransport(2, FaultSchedule(loss_prob=1.0))
    for i in range(100):
        send(tr, 0, 1, t=i)
    assert drain(tr) == []


def _trace(seed):
    tr = SimTransport(3, FaultSchedule(seed=seed, dup_prob=0.5, reorder_prob=0.2, delay_min=10, delay_max=5000))
    for i in range(1000):
        send(tr, i % 3, (i + 1) % 3, b"%d" % i, t=i)
    return [(e.time, e.envelope.src, e.envelope.payload) for e in drain(tr)]


def test_same_seed_same_deliveries():
    a = _trace(7)
    assert a == _trace(7)
    assert len(a) > 1000  # duplicates happened
    assert a != _trace(8)


def test_poll_boundary():
    tr = SimTransport(2, FaultSchedule(delay_min=5, delay_max=5))
    assert tr.poll(100) == []
    send(tr, 0, 1)
    assert tr.next_time() == 5
    assert tr.poll(4) == []
    assert len(tr.poll(5)) == 1


def test_equal_time_ties_are_stable():
    def order():
        tr = SimTransport(3, FaultSchedule(delay_min=3, delay_max=3))
        send(tr, 2, 0, b"a")
        send(tr, 1, 0, b"b")
        send(tr, 0, 1, b"c")
        return [e.envelope.payload for e in tr.poll(3)]
    assert order() == order() == [b"c", b"b", b"a"]


def test_partition_cuts_only_across():
    tr = SimTransport(3, FaultSchedule(partitions=[Partition(0, 100, frozenset({0}), frozenset({1, 2}))]))
    send(tr, 1, 2, b"in", t=10)
    send(tr, 0, 1, b"across", t=10)
    send(tr, 0, 1, b"healed", t=200)
    got = [e.envelope.payload for e in drain(tr)]
    assert got == [b"in", b"healed"]


def test_reliable_is_fifo_and_break_signals_both_ends():
    tr = SimTransport(2, FaultSchedule(delay_min=1, delay_max=5000, reorder_prob=0.5))
    for i in range(50):
        send(tr, 0, 1, b"%02d" % i, t=i, channel=Channel.RELIABLE)
    got = [e.envelope.payload for e in drain(tr)]
    assert got == [b"%02d" % i for i in range(50)]
    tr.set_down(1, True, 10_000)
    send(tr, 0, 1, b"lost", t=10_001, channel=Channel.RELIABLE)
    ev = drain(tr)
    assert all(isinstance(e, ConnectionLost) for e in ev) and any(e.node == 0 for e in ev)


def test_size_limits_and_routing():
    tr = SimTransport(2)
    with pytest.raises(PayloadTooLarge):
        send(tr, 0, 1, b"x" * (LOSSY_MAX + 1))
    assert route(b"x" * 100) == Channel.LOSSY
    assert route(b"x" * 100_000) == Channel.RELIABLE
    assert frame(b"ab") == b"\x02\x00\x00\x00ab"


def test_bad_schedule_values_rejected():
    with pytest.raises(ValueError):
        FaultSchedule(loss_prob=1.5)
    with pytest.raises(ValueError):
        FaultSchedule(delay_min=10, delay_max=5)
    with pytest.raises(ValueError):
        SimTransport(3).partition((0, 1), {0, 1}, {1, 2})


def test_parse_schedule():
    text = """
seed = 7
lossProb = 0.1
delay.min = 200us
delay.max = 20ms
nodes = 3

[partition]
start = 5s
end = 35s
groupA = 0
groupB = 1,2

[crash]
node = 2
at = 12s
restart = 16s
"""
    sched, extras = parse_schedule(text, extra_top=("nodes",))
    assert sched.seed == 7 and sched.loss_prob == 0.1
    assert (sched.delay_min, sched.delay_max) == (200, 20_000)
    assert sched.partitions == [Partition(5_000_000, 35_000_000, frozenset({0}), frozenset({1, 2}))]
    assert sched.crashes[0].restart == 16_000_000
    assert extras == {"nodes": "3"}
    with pytest.raises(ParseError):
        parse_schedule("bogus = 1")
    with pytest.raises(ParseError):
        parse_schedule("[crash]\nnode = 1")


def _free_ports(k):
    socks = [socket.socket() for _ in range(k)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports


def test_network_transport_loopback():
    async def go():
        addrs = [("127.0.0.1", p) for p in _free_ports(2)]
        got: list = []
        done = asyncio.Event()

        def on_event(ev):
            got.append(ev)
            if len(got) == 2:
                done.set()

        a = NetworkTransport(0, addrs, lambda ev: None, lambda: 0)
        b = NetworkTransport(1, addrs, on_event, lambda: 0)
        await a.start()
        await b.start()
        try:
            a.send(Envelope(0, 1, Channel.RELIABLE, b"stream"))
            a.send(Envelope(0, 1, Channel.LOSSY, b"datagram"))
            await asyncio.wait_for(done.wait(), 5)
        finally:
            await a.stop()
            await b.stop()
        return got

    got = asyncio.run(go())
    assert sorted((e.envelope.channel, e.envelope.payload, e.envelope.src) for e in got) == [
        (Channel.LOSSY, b"datagram", 0), (Channel.RELIABLE, b"stream", 0)]
