import random

import pytest
from hypothesis import given, settings, strategies as st

from keyspace.harness.storage_trials import run_trial
from keyspace.storage import (
    BACKWARD, WAL_MAGIC, FileDisk, MemDisk, Store, StoreConfig, StoreFailed, decode_wal, encode_wal_record,
    prefix_successor,
)


def test_put_get_after_sync():
    store = Store(MemDisk())
    t = store.begin()
    t.put(b"a", b"1")
    assert store.get(b"a") is None
    assert store.get(b"a", pending=True) == b"1"
    t.sync()
    assert store.get(b"a") == b"1"


def test_sync_callback_waits_for_flush():
    queued = []
    store = Store(MemDisk(schedule=lambda d, cb: queued.append(cb)))
    acked = []
    t = store.begin()
    t.put(b"a", b"1")
    t.sync(lambda: acked.append(1))
    assert not acked and store.get(b"a") is None
    for cb in queued:
        cb()
    assert acked == [1] and store.get(b"a") == b"1"


def test_abort_discards():
    store = Store(MemDisk())
    t = store.begin()
    t.put(b"a", b"1")
    t.abort()
    assert store.get(b"a", pending=True) is None


def test_recovery_after_clean_crash():
    disk = MemDisk()
    store = Store(disk)
    t = store.begin()
    t.put(b"a", b"1")
    t.put(b"b", b"2")
    t.sync()
    t = store.begin()
    t.delete(b"a")
    t.sync()
    disk.crash()
    assert list(Store(disk).iterate()) == [(b"b", b"2")]


def test_unsynced_writes_are_lost_on_crash():
    disk = MemDisk(schedule=lambda d, cb: None)
    store = Store(disk)
    t = store.begin()
    t.put(b"a", b"1")
    t.sync()
    disk.crash()
    assert list(Store(disk).iterate()) == []


def test_torn_tail_is_discarded():
    first = WAL_MAGIC + encode_wal_record(1, {b"a": b"1"})
    rec = first + encode_wal_record(2, {b"b": b"2"})
    records, valid = decode_wal(rec[:-3])
    assert [seq for seq, _ in records] == [1]
    assert valid == len(first)


def test_checkpoint_and_recover():
    disk = MemDisk()
    cfg = StoreConfig(log_buffer_size=64)
    store = Store(disk, cfg)
    for i in range(50):
        t = store.begin()
        t.put(b"k%02d" % i, b"v" * i)
        t.sync()
    assert store.checkpoints > 0
    disk.crash()
    assert dict(Store(disk, cfg).iterate()) == {b"k%02d" % i: b"v" * i for i in range(50)}


def test_backward_iteration():
    store = Store(MemDisk())
    t = store.begin()
    for k in (b"a", b"b", b"c"):
        t.put(k, k)
    t.sync()
    assert [k for k, _ in store.iterate(b"", BACKWARD)] == [b"c", b"b", b"a"]
    assert [k for k, _ in store.iterate(b"b", BACKWARD)] == [b"b", b"a"]


def test_prefix_successor():
    assert prefix_successor(b"ab") == b"ac"
    assert prefix_successor(b"a\xff") == b"b"
    assert prefix_successor(b"\xff\xff") is None


def test_failed_flush_fail_stops():
    disk = MemDisk()
    store = Store(disk)
    t = store.begin()
    t.put(b"a", b"1")
    disk.fail_next_flush = True
    with pytest.raises(StoreFailed):
        t.sync()
    with pytest.raises(StoreFailed):
        store.begin()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([b"a", b"b", b"c", b"d"]), st.one_of(st.none(), st.binary(max_size=8))),
                max_size=30), st.booleans())
def test_pending_view_matches_dict(ops, forward):
    store = Store(MemDisk(schedule=lambda d, cb: None))
    model = {}
    for i, (k, v) in enumerate(ops):
        t = store.current()
        if v is None:
            t.delete(k)
            model.pop(k, None)
        else:
            t.put(k, v)
            model[k] = v
        if i % 3 == 2:
            t.sync()
    want = sorted(model.items(), reverse=not forward)
    assert list(store.iterate(b"", forward, pending=True)) == want


def test_file_disk_roundtrip(tmp_path):
    disk = FileDisk(str(tmp_path))
    store = Store(disk)
    t = store.begin()
    t.put(b"x", b"y")
    t.sync()
    disk.close()
    assert Store(FileDisk(str(tmp_path))).get(b"x") == b"y"


def test_crash_trials_sample():
    bad = [r for r in (run_trial(s) for s in range(300)) if not r.ok]
    assert not bad, bad[:3]


class _LyingDisk(MemDisk):
    """Acknowledges flushes without making anything durable."""

    def flush(self, name, callback):
        self.syncs += 1
        callback()


def test_lying_disk_is_caught():
    # negative control: the same oracle comparison must notice lost acknowledged writes
    disk = _LyingDisk()
    store = Store(disk)
    acked = []
    t = store.begin()
    t.put(b"a", b"1")
    t.sync(lambda: acked.append(1))
    assert acked
    disk.crash(random.Random(0))
    assert dict(Store(disk).iterate()) != {b"a": b"1"}
