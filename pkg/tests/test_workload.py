import os
import threading
import time

import numpy as np
import pytest

import oracles
from iotrace import workload
from iotrace.workload import (
    READ, DatasetMissing, DatasetSpec, OracleLog, PrefetchBuffer, WorkloadConfig, dataset_sizes,
    load_dataset, run_stream, staging_shaped_sizes,
)


def test_fixed_dataset_on_disk(make_dataset):
    d, m = make_dataset(files=5, size=1000)
    assert len(m) == 5 and m.total_bytes == 5000
    assert all(os.path.getsize(p) == 1000 for p in m.paths)
    assert load_dataset(d) == m


def test_lognormal_sizes_are_seeded():
    spec = DatasetSpec(200, "LOGNORMAL", median=88_000, sigma=0.5, seed=4)
    a, b = dataset_sizes(spec), dataset_sizes(spec)
    assert np.array_equal(a, b)
    assert 60_000 < np.median(a) < 120_000


def test_scaled_dataset_keeps_nominal_sizes(make_dataset):
    _, m = make_dataset(files=3, size=10_000, scale=100)
    assert m.sizes == (10_000,) * 3 and m.disk_sizes == (100,) * 3


def test_staging_shape_invariants():
    sizes = staging_shaped_sizes(seed=1)
    assert len(sizes) == 10_868 and int(sizes.sum()) == 48_000_000_000
    small = sizes[sizes <= 2_000_000]
    assert len(small) == 4_420 and int(small.sum()) == 3_700_000_000
    assert (sizes > 0).all()


def test_missing_dataset(tmp_path):
    with pytest.raises(DatasetMissing):
        load_dataset(tmp_path / "nothing")


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        WorkloadConfig(str(tmp_path), batch_size=0)
    with pytest.raises(ValueError):
        WorkloadConfig(str(tmp_path), prefetch_depth=-1)


def test_unprofiled_stream_matches_expectation(make_dataset):
    d, m = make_dataset(files=30, size=3000)
    cfg = WorkloadConfig(d, batch_size=8, steps=5, threads=3, chunk_size=1024)
    r = run_stream(cfg)
    want = oracles.stream_expectation(m.sizes, 1024, 40)
    totals = r.oracle.totals()
    assert {k: totals[k] for k in want} == want
    assert r.files_consumed == 40 and r.batches == 5
    assert r.max_prefetch_occupancy <= 1


def test_no_zero_read_mode(make_dataset):
    d, m = make_dataset(files=4, size=2048)
    r = run_stream(WorkloadConfig(d, batch_size=4, steps=1, chunk_size=1024,
                                  emulate_trailing_zero_read=False))
    reads = r.oracle.of_kind(READ)
    assert len(reads) == 8 and (reads["length"] > 0).all()


def test_oracle_save_load(tmp_path, make_dataset):
    d, _ = make_dataset(files=4, size=100)
    r = run_stream(WorkloadConfig(d, batch_size=2, steps=2))
    r.oracle.save(tmp_path / "o.ndjson")
    back, promised = OracleLog.load(tmp_path / "o.ndjson")
    assert promised == len(r.oracle.entries)
    assert back.run_id == r.oracle.run_id and np.array_equal(back.entries, r.oracle.entries)


def test_prefetch_depth_bounds_occupancy():
    buf = PrefetchBuffer(2)
    got = []

    def consumer():
        time.sleep(0.05)
        for _ in range(6):
            got.append(buf.get(timeout=5))

    t = threading.Thread(target=consumer)
    t.start()
    for i in range(6):
        buf.put(i)
    t.join()
    assert got == list(range(6)) and buf.max_occupancy == 2


def test_prefetch_depth_zero_is_a_handoff():
    buf = PrefetchBuffer(0)
    t = threading.Thread(target=lambda: [buf.put(i) for i in range(3)])
    t.start()
    assert [buf.get(timeout=5) for _ in range(3)] == [0, 1, 2]
    t.join()
    assert buf.max_occupancy == 0


def test_closed_buffer_raises():
    buf = PrefetchBuffer(1)
    buf.close()
    with pytest.raises(workload.WorkloadError):
        buf.get(timeout=1)


def test_checkpoint_emulation_writes_files(tmp_path):
    assert workload.checkpoint_emulation(tmp_path, 2, 5, 100) is None
    files = sorted(tmp_path.iterdir())
    assert len(files) == 2 and all(f.stat().st_size == 500 for f in files)
