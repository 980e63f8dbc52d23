import numpy as np
import pytest

from iotrace import validate, workload
from iotrace.session import ProfilingSession
from iotrace.validate import MismatchedRun, WindowRecord, load_windows, save_windows


@pytest.fixture
def profiled_run(make_dataset):
    d, m = make_dataset(files=40, size=8192)
    cfg = workload.WorkloadConfig(d, batch_size=8, steps=10, threads=2)
    s = ProfilingSession()
    try:
        r = workload.run_stream(cfg, s, window_every=2)
    finally:
        s.end()
    return d, m, r, [WindowRecord.from_stats(w, d) for w in r.windows]


def test_clean_run_passes(profiled_run):
    d, m, r, windows = profiled_run
    rep = validate.validate(windows, r.oracle, d, run_id=r.oracle.run_id,
                            expected_entries=len(r.oracle.entries))
    assert rep.passed, rep.render()
    assert all(p == o for p, o in rep.totals.values())
    assert len(rep.windows) == 5


def test_doubled_oracle_bytes_fail(profiled_run):
    d, _, r, windows = profiled_run
    e = r.oracle.entries.copy()
    e["length"] *= 2
    bad = workload.OracleLog(r.oracle.run_id, r.oracle.paths, e)
    rep = validate.validate(windows, bad, d)
    assert not rep.passed
    assert "MISMATCH" in rep.render()


def test_mismatched_run_and_truncated_oracle(profiled_run):
    d, _, r, windows = profiled_run
    with pytest.raises(MismatchedRun):
        validate.validate(windows, r.oracle, d, run_id="someone-else")
    with pytest.raises(MismatchedRun):
        validate.validate(windows, r.oracle, d, expected_entries=len(r.oracle.entries) + 1)


def test_file_round_trip(tmp_path, profiled_run):
    d, _, r, windows = profiled_run
    save_windows(tmp_path / "w.json", r.oracle.run_id, d, windows)
    r.oracle.save(tmp_path / "o.ndjson")
    run_id, ds, back = load_windows(tmp_path / "w.json")
    assert (run_id, ds, back) == (r.oracle.run_id, d, windows)
    assert validate.validate_files(tmp_path / "w.json", tmp_path / "o.ndjson").passed


def test_oracle_self_check(profiled_run):
    d, m, r, windows = profiled_run
    rep = validate.validate(windows, r.oracle, d, dataset_bytes=int(np.sum(m.sizes)) + 1)
    assert not rep.oracle_self_check and not rep.passed


def test_overhead_result_ratios():
    res = validate.OverheadResult([1.0, 1.0], [1.2, 1.2], [1.1, 1.1], [["off", "whole", "periodic"]])
    assert res.ratio_whole == pytest.approx(0.2) and res.ratio_periodic == pytest.approx(0.1)
    assert "+20.0%" in res.render()
