import os
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from iotrace.collector import (
    ANONYMOUS_PATH, BUCKET_UPPER, COL, AccessKind, CounterSet, Family, NativeStore, RecordStore,
    Snapshot, bucket_for, canonical_path, classify_access, fnv1a64, native_store, record_id_for,
)


@pytest.mark.parametrize("prev_end,offset,expected", [
    (100, 100, AccessKind.CONSECUTIVE),
    (100, 150, AccessKind.SEQUENTIAL),
    (100, 40, AccessKind.RANDOM),
    (0, 0, AccessKind.CONSECUTIVE),
])
def test_classify_access(prev_end, offset, expected):
    assert classify_access(prev_end, offset) is expected


@given(st.integers(min_value=0, max_value=1 << 40))
def test_bucket_matches_oracle(size):
    assert bucket_for(size) == oracles.bucket(size)


def test_bucket_edges_are_inclusive():
    for i, upper in enumerate(BUCKET_UPPER):
        assert bucket_for(upper) == i
        assert bucket_for(upper + 1) == i + 1
    assert bucket_for(0) == 0
    with pytest.raises(ValueError):
        bucket_for(-1)


@pytest.mark.parametrize("raw,cwd,expected", [
    ("/a/b/../c", None, "/a/c"),
    ("/a//b/./c/", None, "/a/b/c"),
    ("x/y", "/base", "/base/x/y"),
    ("/..", None, "/"),
])
def test_canonical_path(raw, cwd, expected):
    assert canonical_path(raw, cwd) == expected


@given(st.binary(max_size=64))
def test_fnv_matches_oracle(data):
    assert fnv1a64(data) == oracles.fnv1a64(data)


def test_known_fnv_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_record_store_counts_and_patterns():
    s = RecordStore(dxt_enabled=True)
    s.on_open("/data/f", 3, 1.0)
    for off, n in [(0, 100), (100, 100), (300, 50), (10, 10), (20, 0)]:
        s.on_read(3, off, n, 2.0, 2.1)
    s.on_close(3, 3.0)
    rec = s.snapshot().find("/data/f")
    c = rec.counters
    assert (c.opens, c.closes, c.reads, c.bytes_read, c.zero_reads) == (1, 1, 5, 260, 1)
    seq, consec = oracles.classify([(0, 100), (100, 100), (300, 50), (10, 10), (20, 0)])
    assert (c.seq_reads, c.consec_reads) == (seq, consec)
    assert c.max_read_offset == 350
    assert len(rec.segments) == 5


def test_implicit_offsets_follow_reads_and_seeks():
    s = RecordStore()
    s.on_open("/f", 4, 0.5)
    s.on_read(4, None, 10, 1, 1)
    s.on_read(4, None, 10, 1, 1)
    s.on_seek(4, 100)
    s.on_read(4, None, 5, 1, 1)
    segs = s.snapshot().find("/f").segments
    assert [g.offset for g in segs] == [0, 10, 100]


def test_unknown_fd_goes_to_anonymous_record():
    s = RecordStore()
    s.on_read(77, None, 8, 1.0, 1.0)
    snap = s.snapshot()
    assert snap.paths == (ANONYMOUS_PATH,)
    assert snap.totals().bytes_read == 8


def test_dxt_capacity_truncates():
    s = RecordStore(dxt_enabled=True, dxt_capacity=3)
    s.on_open("/f", 1, 0.0)
    for i in range(5):
        s.on_read(1, i, 1, 0.0, 0.0)
    rec = s.snapshot().find("/f")
    assert len(rec.segments) == 3 and rec.segments_truncated
    assert rec.counters.reads == 5


def test_dxt_off_records_no_segments():
    s = RecordStore(dxt_enabled=False)
    s.on_open("/f", 1, 0.0)
    s.on_read(1, 0, 1, 0.0, 0.0)
    snap = s.snapshot()
    assert len(snap.segments) == 0 and not snap.dxt_enabled


def test_stdio_family_counts_separately():
    s = RecordStore()
    s.on_open("/ck", 9, 1.0, Family.STDIO)
    for _ in range(3):
        s.on_write(9, None, 4096, 1.0, 1.0, Family.STDIO)
    s.on_close(9, 2.0, Family.STDIO)
    c = s.snapshot().find("/ck").counters
    assert (c.stdio_opens, c.stdio_writes, c.stdio_bytes_written, c.writes) == (1, 3, 12288, 0)


def test_snapshot_is_immutable_and_independent():
    s = RecordStore()
    s.on_open("/f", 1, 0.0)
    a = s.snapshot()
    s.on_read(1, 0, 10, 0.0, 0.0)
    b = s.snapshot()
    assert a.totals().reads == 0 and b.totals().reads == 1
    with pytest.raises(ValueError):
        a.counters[0, 0] = 5


def test_counterset_dict_round_trip():
    c = CounterSet(opens=2, reads=4, read_size_hist=(1,) * 10)
    assert CounterSet.from_dict(c.to_dict()) == c


def test_snapshot_rows_sorted_by_id():
    s = RecordStore()
    for i, p in enumerate(["/z", "/a", "/m", "/q"]):
        s.on_open(p, i, 0.0)
    snap = s.snapshot()
    assert list(snap.ids) == sorted(snap.ids)
    assert snap.row_of(record_id_for("/a")) == snap.paths.index("/a")


def test_record_store_threads_lose_no_updates():
    s = RecordStore()
    n_threads, per = 8, 500

    def work(t):
        s.on_open(f"/t{t}", 100 + t, 0.0)
        for i in range(per):
            s.on_read(100 + t, i * 4, 4, 0.0, 0.0)

    th = [threading.Thread(target=work, args=(t,)) for t in range(n_threads)]
    for t in th:
        t.start()
    for t in th:
        t.join()
    tot = s.snapshot().totals()
    assert (tot.reads, tot.bytes_read) == (n_threads * per, n_threads * per * 4)


# operations replayed identically into both stores
_ops = st.lists(st.tuples(
    st.sampled_from(["open", "read", "pread", "write", "close", "seek"]),
    st.integers(0, 3),                 # fd
    st.sampled_from(["/p/a", "/p/b", "/p/../p/c"]),
    st.integers(0, 5000),              # offset
    st.integers(0, 3000),              # length
), max_size=40)


def _replay(store, ops, fd_base):
    t = 1.0
    for op, fd, path, off, n in ops:
        fd += fd_base
        t += 0.001
        if op == "open":
            store.on_open(path, fd, t)
        elif op == "read":
            store.on_read(fd, None, n, t, t)
        elif op == "pread":
            store.on_read(fd, off, n, t, t)
        elif op == "write":
            store.on_write(fd, off, n, t, t)
        elif op == "close":
            store.on_close(fd, t)
        else:
            store.on_seek(fd, off)


@settings(max_examples=60, deadline=None)
@given(_ops)
def test_native_and_python_stores_agree(ops):
    py = RecordStore(dxt_enabled=True, dxt_capacity=1024)
    native = native_store()
    # a high fd range no real file uses keeps this independent of other I/O
    base = 900_000
    before = native.snapshot()
    _replay(py, ops, base)
    _replay(native, ops, base)
    for fd in range(4):
        native.on_close(base + fd)
        py.on_close(base + fd)
    after = native.snapshot()
    got = {p: after.counters[i] - (before.counters[before.paths.index(p)]
                                   if p in before.paths else 0)
           for i, p in enumerate(after.paths) if p.startswith("/p/")}
    want = {p: py.snapshot().counters[i] for i, p in enumerate(py.snapshot().paths)
            if p.startswith("/p/")}
    assert set(k for k, v in got.items() if v.any()) == set(k for k, v in want.items() if v.any())
    for p, v in want.items():
        add = np.ones(len(v), bool)
        add[[COL["max_read_offset"], COL["max_write_offset"]]] = False
        assert np.array_equal(got[p][add], v[add]), p


def _dense(snap):
    return Snapshot(snap.t_wall, snap.t_mono, snap.ids, snap.paths, snap.counters, snap.times,
                    snap.truncated, snap.segments, snap.fds, snap.dxt_enabled, snap.dxt_capacity)


def _same_window(a, b):
    return (a.ids.tolist() == b.ids.tolist() and a.paths == b.paths
            and np.array_equal(a.deltas, b.deltas) and np.array_equal(a.times, b.times)
            and np.array_equal(a.segments, b.segments)
            and np.array_equal(a.truncated, b.truncated))


@settings(max_examples=40, deadline=None)
@given(st.lists(_ops, min_size=2, max_size=4), st.integers(0, 700), st.integers(0, 10**6))
def test_native_chunked_diff_matches_dense_diff(phases, fresh, tag):
    from iotrace.session import diff

    native = native_store()
    base = 900_000
    snaps = [native.snapshot()]
    for i, ops in enumerate(phases):
        _replay(native, ops, base)
        if i == 0:
            # enough new records to grow across chunk boundaries
            for j in range(fresh):
                native.on_open(f"/q/{tag}/{j}", base + 10, 1.0)
                native.on_read(base + 10, None, j, 1.0, 1.0)
                native.on_close(base + 10)
        for fd in range(4):
            native.on_close(base + fd)
        snaps.append(native.snapshot())
    for a, b in [(snaps[0], snaps[-1])] + list(zip(snaps, snaps[1:])):
        assert b.rows_changed_since(a) is not None
        assert _same_window(diff(a, b), diff(_dense(a), _dense(b)))
        assert _dense(b) == b


def test_idle_native_snapshots_share_rows():
    native = native_store()
    native.on_open("/q/idle", 900_020, 1.0)
    native.on_close(900_020)
    a = native.snapshot()
    b = native.snapshot()
    rows = b.rows_changed_since(a)[0]
    assert len(rows) == 0 and b.ids is a.ids


def test_native_mirror_resets_in_forked_child():
    native = native_store()
    native.on_open("/q/parent", 900_030, 1.0)
    native.on_close(900_030)
    assert native.snapshot().find("/q/parent") is not None
    pid = os.fork()
    if pid == 0:
        ok = False
        try:
            native.on_open("/q/child", 900_031, 1.0)
            native.on_close(900_031)
            snap = native.snapshot()
            ok = snap.find("/q/parent") is None and snap.find("/q/child").counters.opens == 1
        finally:
            os._exit(0 if ok else 1)
    _, status = os.waitpid(pid, 0)
    assert os.waitstatus_to_exitcode(status) == 0


def test_native_store_checks_layout():
    store = native_store()
    assert isinstance(store, NativeStore)
    assert store.now() > 0
    snap = store.snapshot()
    assert isinstance(snap, Snapshot)


def test_empty_snapshot():
    e = Snapshot.empty(t_wall=1.0, t_mono=2.0)
    assert len(e) == 0 and e.totals().reads == 0
    assert e == Snapshot.empty(t_wall=1.0, t_mono=2.0)


def test_rows_under_prefix():
    s = RecordStore()
    s.on_open("/d/x", 1, 0.0)
    s.on_open("/dd/y", 2, 0.0)
    snap = s.snapshot()
    assert [snap.paths[i] for i in snap.rows_under("/d")] == ["/d/x"]
    assert len(snap.rows_under(None)) == 2


def test_relative_paths_canonicalised(tmp_path):
    cwd = os.getcwd()
    os.chdir(tmp_path)
    try:
        s = RecordStore()
        s.on_open("sub/../f", 1, 0.0)
        assert s.snapshot().paths == (str(tmp_path / "f"),)
    finally:
        os.chdir(cwd)
