import pytest
from hypothesis import given, settings, strategies as st

from keyspace import core
from keyspace.core import (
    MAX_BATCH, Ballot, BatchTooLarge, Command, InvalidArgument, Kind, Malformed, Ordering, compare_ballots,
    decode_batch, decode_command, encode_batch, encode_command,
)

keys = st.binary(min_size=1, max_size=64).filter(lambda b: 0 not in b)
values = st.binary(max_size=256)
ids = st.integers(0, 2 ** 64 - 1)


@st.composite
def commands(draw):
    kind = draw(st.sampled_from(list(Kind)))
    key = draw(keys)
    cid, seq = draw(ids), draw(ids)
    if kind == Kind.SET:
        return core.set_(key, draw(values), client_id=cid, request_seq=seq)
    if kind == Kind.TEST_AND_SET:
        return core.test_and_set(key, draw(values), draw(values), client_id=cid, request_seq=seq)
    if kind == Kind.ADD:
        return core.add(key, draw(st.integers(-(2 ** 63), 2 ** 63 - 1)), client_id=cid, request_seq=seq)
    if kind == Kind.RENAME:
        return core.rename(key, draw(keys), client_id=cid, request_seq=seq)
    if kind == Kind.PRUNE:
        return core.prune(draw(st.binary(max_size=16).filter(lambda b: 0 not in b)), client_id=cid,
                          request_seq=seq)
    return Command(kind, key, client_id=cid, request_seq=seq)


@pytest.mark.parametrize("a,b,expected", [
    (Ballot(1, 0), Ballot(1, 0), Ordering.EQ),
    (Ballot(2, 0), Ballot(1, 5), Ordering.GT),
    (Ballot(3, 1), Ballot(3, 2), Ordering.LT),
])
def test_ballot_order(a, b, expected):
    assert compare_ballots(a, b) == expected


def test_set_roundtrip():
    c = core.set_(b"a", b"b")
    assert decode_command(encode_command(c)) == c


def test_delete_max_key_roundtrip():
    c = core.delete(b"k" * 1024)
    assert decode_command(encode_command(c)) == c


@settings(max_examples=300)
@given(commands())
def test_command_roundtrip_is_byte_identical(c):
    b = encode_command(c)
    d = decode_command(b)
    assert d == c
    assert encode_command(d) == b


@given(st.lists(commands(), max_size=20))
def test_batch_roundtrip(cs):
    assert decode_batch(encode_batch(cs)) == cs


def test_key_validation():
    with pytest.raises(InvalidArgument):
        core.set_(b"", b"v")
    with pytest.raises(InvalidArgument):
        core.set_(b"a\x00b", b"v")
    with pytest.raises(InvalidArgument):
        core.set_(b"k" * 1025, b"v")
    with pytest.raises(InvalidArgument):
        core.set_(b"k", b"v" * ((1 << 20) + 1))


def test_fields_a_kind_does_not_carry_are_rejected():
    with pytest.raises(InvalidArgument):
        Command(Kind.DELETE, b"k", value=b"x")


def _padded_batch(target: int) -> list[Command]:
    """One SET whose value is padded until the batch encodes to exactly ``target`` bytes."""
    base = len(encode_batch([core.set_(b"k", b"")]))
    return [core.set_(b"k", b"v" * (target - base))]


def test_batch_of_exactly_one_mebibyte_is_accepted():
    cs = _padded_batch(MAX_BATCH)
    assert len(encode_batch(cs)) == MAX_BATCH


def test_batch_one_byte_over_is_rejected():
    # the value bound (1 MiB) would be hit first by a single command, so split across two
    first = core.set_(b"a", b"x" * 1000)
    base = len(encode_batch([first, core.set_(b"k", b"")]))
    cs = [first, core.set_(b"k", b"v" * (MAX_BATCH + 1 - base))]
    with pytest.raises(BatchTooLarge):
        encode_batch(cs)


@given(st.binary(max_size=64))
def test_decode_garbage_never_crashes_unexpectedly(b):
    try:
        decode_batch(b)
    except Malformed:
        pass


def _random_command(rng) -> Command:
    key = bytes(rng.randrange(1, 256) for _ in range(rng.randint(1, 40)))
    val = rng.randbytes(rng.randint(0, 200))
    cid, seq = rng.getrandbits(64), rng.getrandbits(64)
    kind = rng.choice(list(Kind))
    if kind == Kind.SET:
        return core.set_(key, val, client_id=cid, request_seq=seq)
    if kind == Kind.TEST_AND_SET:
        return core.test_and_set(key, val[:10], val, client_id=cid, request_seq=seq)
    if kind == Kind.ADD:
        return core.add(key, rng.randint(-(2 ** 63), 2 ** 63 - 1), client_id=cid, request_seq=seq)
    if kind == Kind.RENAME:
        return core.rename(key, key[::-1], client_id=cid, request_seq=seq)
    if kind == Kind.PRUNE:
        return core.prune(key[:3], client_id=cid, request_seq=seq)
    return Command(kind, key, client_id=cid, request_seq=seq)


def test_ten_thousand_random_commands_roundtrip():
    import random
    rng = random.Random(2024)
    for _ in range(10_000):
        c = _random_command(rng)
        b = encode_command(c)
        assert encode_command(decode_command(b)) == b
        assert decode_command(b) == c
