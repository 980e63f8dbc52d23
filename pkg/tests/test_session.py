import time

import numpy as np
import pytest

from iotrace import session
from iotrace.collector import RecordStore, Snapshot
from iotrace.session import (
    InvalidWindow, NoOpenWindow, ProfilingSession, ProfilingWindow, WindowAlreadyOpen, diff,
    periodic_windows, window_bandwidth,
)


def _session():
    return ProfilingSession(RecordStore(dxt_enabled=True), policy="none")


def test_window_holds_only_changes():
    store = RecordStore()
    store.on_open("/old", 1, 1.0)
    store.on_read(1, 0, 100, 1.0, 1.0)
    start = store.snapshot()
    store.on_read(1, 100, 50, 2.0, 2.0)
    store.on_open("/new", 2, 2.0)
    store.on_read(2, 0, 7, 2.0, 2.0)
    time.sleep(0.001)
    w = diff(start, store.snapshot())
    assert sorted(w.paths) == ["/new", "/old"]
    assert w.total("reads") == 2 and w.bytes_read_delta == 57
    assert len(w.segments) == 2
    old = w.select([w.paths.index("/old")])
    assert old.segments["offset"].tolist() == [100]


def test_max_offsets_take_stop_value():
    store = RecordStore()
    store.on_open("/f", 1, 0.0)
    store.on_read(1, 1000, 10, 0.0, 0.0)
    start = store.snapshot()
    store.on_read(1, 0, 10, 0.0, 0.0)
    w = diff(start, store.snapshot())
    assert w.total("max_read_offset") == 1010


def test_unchanged_records_are_omitted():
    store = RecordStore()
    store.on_open("/f", 1, 0.0)
    a = store.snapshot()
    time.sleep(0.001)
    assert len(diff(a, store.snapshot())) == 0


def test_diff_rejects_reversed_or_foreign_snapshots():
    store = RecordStore()
    store.on_open("/f", 1, 0.0)
    a = store.snapshot()
    time.sleep(0.001)
    b = store.snapshot()
    with pytest.raises(InvalidWindow):
        diff(b, a)
    other = RecordStore()
    other.on_open("/g", 1, 0.0)
    time.sleep(0.001)
    with pytest.raises(InvalidWindow):
        diff(other.snapshot(), store.snapshot())
    with pytest.raises(InvalidWindow):
        ProfilingWindow(b, a, 1)


def test_start_stop_errors():
    s = _session()
    with pytest.raises(NoOpenWindow):
        s.stop()
    s.start()
    with pytest.raises(WindowAlreadyOpen):
        s.start()
    s.end()
    assert not s.is_open


def test_restart_windows_partition_the_run():
    s = _session()
    store = s.store
    store.on_open("/f", 3, 0.0)
    rng = np.random.default_rng(1)
    steps, every = 23, 5

    def step(i):
        for _ in range(int(rng.integers(1, 5))):
            store.on_read(3, None, int(rng.integers(0, 4096)), time.monotonic(), time.monotonic())

    windows = list(periodic_windows(s, every, steps, step))
    assert len(windows) == 5            # four full groups and a trailing partial one
    final = store.snapshot().totals()
    assert sum(w.bytes_read_delta for w in windows) == final.bytes_read
    assert sum(w.total("reads") for w in windows) == final.reads
    for a, b in zip(windows, windows[1:]):
        assert a.t_stop == b.t_start
    assert sum(len(w.segments) for w in windows) == final.reads


def test_window_bandwidth():
    store = RecordStore()
    store.on_open("/f", 1, 0.0)
    a = Snapshot.build(0.0, 10.0, [], [], np.zeros((0, 37)), np.zeros((0, 5)), [])
    store.on_read(1, 0, 1_000_000, 0.0, 0.0)
    snap = store.snapshot()
    b = Snapshot.build(snap.t_wall, 12.0, snap.ids, snap.paths, snap.counters, snap.times,
                       snap.truncated, snap.segments)
    read_bw, write_bw = window_bandwidth(ProfilingWindow(a, b, 7))
    assert read_bw == pytest.approx(500_000.0) and write_bw == 0.0


def test_restrict_by_prefix():
    store = RecordStore()
    store.on_open("/data/x", 1, 0.0)
    store.on_open("/tmp/y", 2, 0.0)
    start = Snapshot.empty(t_mono=0.0)
    w = diff(start, store.snapshot()).restrict("/data")
    assert list(w.paths) == ["/data/x"]


def test_context_manager_closes_window():
    with _session() as s:
        s.store.on_open("/f", 1, 0.0)
    assert len(s.windows) == 1 and not s.is_open


def test_start_profiling_helpers():
    s = session.start_profiling(RecordStore(), policy="none")
    s.store.on_open("/f", 1, 0.0)
    w = session.stop_profiling(s)
    assert w.stats().total("opens") == 1


def test_policy_none_needs_store():
    with pytest.raises(ValueError):
        ProfilingSession(policy="none")


def test_runtime_session_attaches_and_detaches(fixture_lib, tmp_path):
    from iotrace import interpose

    p = tmp_path / "f"
    p.write_bytes(b"z" * 5000)
    s = ProfilingSession()
    s.start()
    assert interpose.current_state().mode is interpose.Mode.RUNTIME
    fixture_lib.iotfx_read_file(str(p).encode(), 1024)
    w = s.stop().stats().restrict(str(tmp_path))
    s.end()
    assert interpose.current_state().mode is interpose.Mode.DETACHED
    # 5 data reads (4x1024 + 904) then the EOF read
    assert (w.total("reads"), w.bytes_read_delta, w.total("zero_reads")) == (6, 5000, 1)
