import random
import socket
import struct
import urllib.error
import urllib.request

import pytest
from conftest import golden_mismatches
from hypothesis import given, strategies as st

from keyspace.confparse import ParseError
from keyspace.core import Malformed, Status
from keyspace.kvdb import KeyspaceDB
from keyspace.server import http
from keyspace.server import protocol as P
from keyspace.server.client import Client, Connection
from keyspace.server.config import parse_config
from keyspace.server.protocol import FrameDecoder, Op, Request, Response
from keyspace.storage import MemDisk, Store

PAPER_BLOCK = """database.pageSize = 4096
database.cacheSize = 200M
database.logBufferSize = 10M
"""


# --- wire protocol

def test_golden_files():
    count, bad = golden_mismatches()
    assert count >= 24 and not bad


def test_pipelined_frames_split_anywhere():
    reqs = [P.get(b"a"), P.get(b"b"), P.write(Op.SET, b"a", b"x", client_id=1, request_seq=1)]
    data = b"".join(P.encode_request(r) for r in reqs)
    for cut in range(len(data)):
        d = FrameDecoder()
        bodies = d.feed(data[:cut]) + d.feed(data[cut:])
        assert [P.decode_request_body(b) for b in bodies] == reqs


@pytest.mark.parametrize("body", [
    b"\x7f",                                   # unknown opcode
    bytes([Op.SET | P.DIRTY]) + b"\x00" * 16,  # writes have no dirty variant
    bytes([Op.GET]) + struct.pack("<I", 0),    # empty key
    bytes([Op.GET]) + struct.pack("<I", 5) + b"ab",  # truncated
    P.encode_request(P.get(b"a"))[4:] + b"x",  # trailing bytes
])
def test_malformed_bodies(body):
    with pytest.raises(Malformed):
        P.decode_request_body(body)


def test_bad_length_prefix():
    with pytest.raises(Malformed):
        FrameDecoder().feed(struct.pack("<I", 0))
    with pytest.raises(Malformed):
        FrameDecoder().feed(struct.pack("<I", P.MAX_FRAME + 1))


keys = st.binary(min_size=1, max_size=16).filter(lambda b: 0 not in b)


@given(st.one_of(
    st.builds(P.get, keys, st.booleans()),
    st.builds(lambda k, v, c, s: P.write(Op.SET, k, v, client_id=c, request_seq=s), keys, st.binary(max_size=32),
              st.integers(0, 2 ** 64 - 1), st.integers(0, 2 ** 64 - 1)),
    st.builds(lambda k, d: P.write(Op.ADD, k, P.i64_arg(d)), keys, st.integers(-(2 ** 63), 2 ** 63 - 1)),
    st.builds(lambda op, p, s, c, n, f, d: P.listing(op, p, s, c, n, f, d), st.sampled_from(sorted(P.LIST_OPS)),
              st.just(b"p"), st.one_of(st.just(b""), keys), st.integers(0, 2 ** 64 - 1), st.booleans(),
              st.booleans(), st.booleans()),
))
def test_request_roundtrip(req):
    wire = P.encode_request(req)
    assert P.decode_request_body(wire[4:]) == req


@given(st.sampled_from(list(Status)), st.lists(st.binary(max_size=16), max_size=4).map(tuple))
def test_response_roundtrip(status, values):
    resp = Response(status, values)
    assert P.decode_response_body(P.encode_response(resp)[4:]) == resp


# --- configuration

def test_config_accepts_published_block_verbatim():
    cfg = parse_config(PAPER_BLOCK)
    assert cfg.store.page_size == 4096
    assert cfg.store.cache_size == 209_715_200
    assert cfg.store.log_buffer_size == 10_485_760


def test_config_full():
    cfg = parse_config("""
# three nodes
node.id = 1
cluster.nodes = 10.0.0.1:7080, 10.0.0.2:7080, 10.0.0.3:7080
client.listen = 0.0.0.0:7070
database.dir = /var/keyspace
master.leaseTime = 5s
master.renewPeriod = 1500
master.clockDrift = 2%
log.chaining = off
""")
    assert cfg.node_id == 1 and len(cfg.peers) == 3
    assert cfg.lease.lease_time == 5_000_000 and cfg.lease.renew_period == 1_500_000
    assert cfg.lease.max_drift == pytest.approx(0.02)
    assert cfg.log.chaining is False
    assert cfg.data_dir == "/var/keyspace"


@pytest.mark.parametrize("text,line", [
    ("bogus.key = 1", 1),
    ("database.pageSize = 4096\nmaster.leaseTime = 9s", 2),
    ("node.id = 3", 1),
    ("log.batching = maybe", 1),
    ("[section]\nx = 1", 2),
])
def test_config_errors_carry_line(text, line):
    with pytest.raises(ParseError) as e:
        parse_config(text)
    assert f"line {line}" in str(e.value)


# --- HTTP mapping

def test_http_targets():
    assert http.parse_target("GET", "/get?key=a%2Fb") == P.get(b"a/b")
    assert http.parse_target("GET", "/dirtyget?key=k") == P.get(b"k", dirty=True)
    assert http.parse_target("GET", "/master") == http.MASTER
    for method, target, code in (("POST", "/get?key=a", 405), ("GET", "/nope", 404), ("GET", "/get", 400),
                                 ("GET", "/get?key=a&key=b", 400), ("GET", "/get?key=", 400)):
        with pytest.raises(http.BadRequest) as e:
            http.parse_target(method, target)
        assert e.value.code == code


def test_http_replies():
    peers = [("h0", 1), ("h1", 2)]
    assert http.reply_for(Response(Status.OK, (b"v",)), "/get?key=a").body == b"v"
    assert http.reply_for(Response(Status.NOT_FOUND), "/get?key=a").code == 404
    r = http.reply_for(P.not_master(1), "/get?key=a", peers)
    assert r.code == 302 and r.headers["Location"] == "http://h1:2/get?key=a"
    assert http.reply_for(P.not_master(None), "/get?key=a", peers).code == 503
    assert http.master_reply(None).body == b"none"


# --- node against a simulated cluster

def test_master_rules_in_simulation():
    from keyspace.harness.sim import SimConfig, SimWorld
    world = SimWorld(SimConfig(n=3, seed=2))
    assert world.run_until(lambda: world.stable_master() is not None, 60_000_000)
    m = world.stable_master()
    slave = (m + 1) % 3
    got = {}
    world.client_request(slave, P.write(Op.SET, b"k", b"v", client_id=1, request_seq=1), lambda r: got.setdefault(0, r))
    world.client_request(m, P.write(Op.SET, b"k", b"v", client_id=1, request_seq=1), lambda r: got.setdefault(1, r))
    world.run_until(lambda: len(got) == 2, world.time + 5_000_000)
    assert got[0] == P.not_master(m)
    assert got[1].status == Status.OK
    world.run(world.time + 1_000_000)
    world.client_request(slave, P.get(b"k", dirty=True), lambda r: got.setdefault(2, r))
    world.client_request(slave, P.get(b"k"), lambda r: got.setdefault(3, r))
    world.run_until(lambda: len(got) == 4, world.time + 5_000_000)
    assert got[2] == Response(Status.OK, (b"v",))
    assert got[3].status == Status.NOT_MASTER


# --- live servers over loopback

def test_live_cluster_client_and_http(live_cluster):
    c = live_cluster
    with Client(c.client_addrs, timeout=5) as cl:
        cl.set(b"greeting", b"hello")
        assert cl.get(b"greeting") == b"hello"
        assert cl.write(Op.ADD, b"greeting", P.i64_arg(1)).status == Status.TYPE_ERROR
        assert cl.get(b"missing") is None
    m = c.master()
    with urllib.request.urlopen(f"http://{c.http_addrs[m][0]}:{c.http_addrs[m][1]}/get?key=greeting") as r:
        assert r.read() == b"hello"
    slave = (m + 1) % 3
    host, port = c.http_addrs[slave]
    # the redirect is followed to the master
    with urllib.request.urlopen(f"http://{host}:{port}/get?key=greeting") as r:
        assert r.read() == b"hello"
    with pytest.raises(urllib.error.HTTPError) as e:
        urllib.request.urlopen(f"http://{host}:{port}/get?key=nothing")
    assert e.value.code == 404
    with urllib.request.urlopen(f"http://{host}:{port}/master") as r:
        assert r.read() == str(m).encode()


def test_live_pipelining_and_malformed(live_cluster):
    c = live_cluster
    m = c.master()
    with socket.create_connection(c.client_addrs[m], timeout=5) as s:
        s.sendall(b"".join(P.encode_request(r) for r in (
            P.get(b"p"), P.get(b"p", dirty=True), P.write(Op.SET, b"p", b"1", client_id=9, request_seq=1))))
        f = s.makefile("rb")
        out = []
        for _ in range(3):
            (n,) = struct.unpack("<I", f.read(4))
            out.append(P.decode_response_body(f.read(n)).status)
        assert out == [Status.NOT_FOUND, Status.NOT_FOUND, Status.OK]
    with socket.create_connection(c.client_addrs[m], timeout=5) as s:
        s.sendall(struct.pack("<I", 0))
        f = s.makefile("rb")
        (n,) = struct.unpack("<I", f.read(4))
        assert P.decode_response_body(f.read(n)).status == Status.MALFORMED
        assert f.read(1) == b""


def _random_request(rng):
    key = b"k%d" % rng.randrange(8)
    r = rng.random()
    if r < 0.3:
        return P.get(key)
    if r < 0.5:
        return P.write(Op.SET, key, b"%d" % rng.randrange(100))
    if r < 0.6:
        return P.write(Op.ADD, key, P.i64_arg(rng.randint(-5, 5)))
    if r < 0.65:
        return P.write(Op.TESTANDSET, key, b"%d" % rng.randrange(100), b"t")
    if r < 0.7:
        return P.write(Op.RENAME, key, b"k%d" % rng.randrange(8))
    if r < 0.75:
        return P.write(Op.DELETE, key)
    if r < 0.8:
        return P.write(Op.REMOVE, key)
    if r < 0.82:
        return P.write(Op.PRUNE, b"k1")
    op = rng.choice(sorted(P.LIST_OPS))
    return P.listing(op, b"k", b"" if rng.random() < 0.5 else key, rng.randrange(4), rng.random() < 0.5,
                     rng.random() < 0.5)


def _expected(db, req):
    """What a single node computes for ``req`` on the oracle database."""
    from keyspace.server.node import Node
    if req.base in P.WRITE_OPS:
        res = db.execute(P.to_command(req))
        db.store.current().sync()
        return P.from_result(res)
    fake = Node.__new__(Node)
    fake.db = db
    return Node.read(fake, req)


def test_thousand_random_requests_match_local_oracle(live_cluster):
    c = live_cluster
    rng = random.Random(11)
    db = KeyspaceDB(Store(MemDisk()))
    conn = Connection(c.client_addrs[c.master()])
    try:
        for i in range(1000):
            req = _random_request(rng)
            if req.base in P.WRITE_OPS:
                req = Request(req.op, req.args, 77, i + 1)
            assert conn.call(req) == _expected(db, req), (i, req)
    finally:
        conn.close()
