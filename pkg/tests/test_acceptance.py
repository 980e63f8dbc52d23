"""Acceptance criteria, one test each.

Every criterion prints a single ``[PASS]``/``[FAIL]`` line; the lines are
repeated in the pytest terminal summary.  Run directly for the lines alone::

    python tests/test_acceptance.py
"""

from __future__ import annotations

import ctypes
import json
import os
import sys
import tempfile
import threading
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import oracles  # noqa: E402
from iotrace import analysis, export, interpose, native, validate, workload  # noqa: E402
from iotrace.collector import BUCKET_LABELS, native_store  # noqa: E402
from iotrace.session import ProfilingSession, diff  # noqa: E402
from snapgen import random_snapshot  # noqa: E402

KiB, MiB = 1024, 1 << 20

# figures reported for the staging study; fractions follow from them
STAGING_FILES, STAGING_TOTAL = 10_868, 48_000_000_000
STAGING_SMALL_FILES, STAGING_SMALL_BYTES = 4_420, 3_700_000_000
STAGING_FRAC_BYTES, STAGING_FRAC_FILES, STAGING_TOL = 0.077, 0.407, 0.005
OVERHEAD_BOUND = 0.25

RESULTS: dict[int, str] = {}


def _line(n: int, title: str, ok: bool, detail: str) -> str:
    text = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2} {title}: {detail}"
    RESULTS[n] = text
    return text


def _profiled_stream(cfg, window_every=None, manifest=None):
    s = ProfilingSession()
    try:
        result = workload.run_stream(cfg, s, window_every, manifest=manifest)
    finally:
        s.end()
    whole = diff(s.windows[0].start, s.windows[-1].stop).restrict(cfg.dataset_dir)
    return result, whole


def _dataset(root, name, spec):
    d = os.path.join(root, name)
    if os.path.exists(os.path.join(d, "manifest.csv")):
        return d, workload.load_dataset(d)
    return d, workload.make_dataset(spec, d)


# ---- criteria ----

def criterion_1(root):
    d, m = _dataset(root, "fixed64k", workload.DatasetSpec(1000, "FIXED", 64 * KiB))
    cfg = workload.WorkloadConfig(d, batch_size=100, steps=10, threads=4)
    t0 = time.monotonic()
    result, w = _profiled_stream(cfg, manifest=m)
    elapsed = time.monotonic() - t0
    o = result.oracle.totals()
    want = oracles.stream_expectation(m.sizes, cfg.chunk_size, 1000)
    got = {"opens": w.total("opens"), "reads": w.total("reads"), "bytes_read": w.bytes_read_delta}
    ok = (all(got[k] == o[k] == want[k] for k in got) and elapsed < 60)
    return ok, (f"opens {got['opens']}/{o['opens']} reads {got['reads']}/{o['reads']} "
                f"bytes {got['bytes_read']}/{o['bytes_read']} (profiler/oracle), "
                f"{elapsed:.2f} s")


def criterion_2(root):
    d, m = _dataset(root, "fixed64k", workload.DatasetSpec(1000, "FIXED", 64 * KiB))
    cfg = workload.WorkloadConfig(d, batch_size=128, steps=100, threads=4)
    result, whole = _profiled_stream(cfg, window_every=5, manifest=m)
    records = [validate.WindowRecord.from_stats(w, d) for w in result.windows]
    rep = validate.validate(records, result.oracle, d, tolerance=0.05)
    parts = sum(r.bytes_read for r in records)
    oracle_bytes = result.oracle.totals()["bytes_read"]
    worst = max(c.rel_error for c in rep.windows)
    ok = (len(records) == 20 and parts == whole.bytes_read_delta == oracle_bytes
          and all(c.passed for c in rep.windows))
    return ok, (f"{len(records)} windows, sum {parts} = whole {whole.bytes_read_delta} = "
                f"oracle {oracle_bytes}, worst bandwidth error {worst:.2%}")


def criterion_3(root):
    spec = workload.DatasetSpec(12_800, "LOGNORMAL", median=88_000, sigma=0.5, seed=3)
    d, m = _dataset(root, "imagenet", spec)
    cfg = workload.WorkloadConfig(d, batch_size=128, steps=100, threads=4, chunk_size=MiB)
    result, w = _profiled_stream(cfg, manifest=m)
    ops = analysis.op_count_summary(w)
    pat = analysis.pattern_summary(w)
    diag = analysis.zero_read_diagnostic(w)
    want = oracles.stream_expectation(m.sizes, cfg.chunk_size, 12_800)
    ok = (abs(ops.reads_per_open - 2.0) <= 0.01 and abs(pat.frac_zero - 0.5) <= 0.01
          and diag.finding is analysis.Finding.TRAILING_EOF_READS
          and (ops.opens, ops.reads) == (want["opens"], want["reads"]))
    return ok, (f"reads_per_open {ops.reads_per_open:.4f}, frac_zero {pat.frac_zero:.4f}, "
                f"diagnostic {diag.finding.value}")


def criterion_4(root):
    d, m = _dataset(root, "malware", workload.DatasetSpec(40, "FIXED", 4 * MiB))
    cfg = workload.WorkloadConfig(d, batch_size=8, steps=5, threads=2, chunk_size=MiB)
    result, w = _profiled_stream(cfg, manifest=m)
    dist = analysis.read_size_distribution(w)
    pat = analysis.pattern_summary(w)
    modal = BUCKET_LABELS[dist.modal_bucket]
    ok = (dist.modal_bucket == oracles.bucket(MiB) and modal == "100K-1M"
          and abs(pat.frac_zero - 0.20) <= 0.01 and pat.frac_sequential == 1.0)
    return ok, (f"modal bucket {modal}, zero fraction {pat.frac_zero:.4f}, "
                f"frac_sequential {pat.frac_sequential}")


def criterion_5(root):
    ck = os.path.join(root, "checkpoints")
    s = ProfilingSession()
    try:
        w = workload.checkpoint_emulation(ck, 10, 140, 4096, s)
    finally:
        s.end()
    w = w.restrict(ck)
    n = w.total("stdio_writes")
    return n == 1400, f"stdio_writes {n} (expected 1400), stdio_opens {w.total('stdio_opens')}"


def criterion_6(root):
    spec = workload.DatasetSpec(STAGING_FILES, "MANIFEST", manifest=workload.STAGING_PRESET,
                                scale=1000, seed=0)
    d, m = _dataset(root, "staging", spec)
    plan = analysis.staging_advise(analysis.Manifest.load(os.path.join(d, "manifest.csv")),
                                   2_000_000)
    n, nbytes, fb, ff = oracles.staging_expectation(list(m.sizes), 2_000_000)
    ok = (len(m) == STAGING_FILES and m.total_bytes == STAGING_TOTAL
          and plan.staged_file_count == STAGING_SMALL_FILES == n
          and plan.staged_bytes == nbytes == STAGING_SMALL_BYTES
          and abs(plan.frac_bytes - STAGING_FRAC_BYTES) <= STAGING_TOL
          and abs(plan.frac_files - STAGING_FRAC_FILES) <= STAGING_TOL)
    return ok, (f"staged {plan.staged_file_count} files, frac_bytes {plan.frac_bytes:.4f}, "
                f"frac_files {plan.frac_files:.4f}")


def criterion_7(root):
    d, m = _dataset(root, "fixed64k", workload.DatasetSpec(1000, "FIXED", 64 * KiB))
    cfg = workload.WorkloadConfig(d, batch_size=128, steps=100, threads=4)
    res = validate.measure_overhead(cfg, repetitions=5, window_every=5, seed=0)
    ok = res.ratio_whole <= OVERHEAD_BOUND and res.ratio_periodic <= res.ratio_whole
    return ok, (f"off {res.mean_off:.4f} s, whole-run {res.ratio_whole:+.1%} "
                f"(bound {OVERHEAD_BOUND:.0%}), periodic {res.ratio_periodic:+.1%} "
                f"(must not exceed whole-run)")


_SCALARS = ("opens", "closes", "reads", "bytes_read", "zero_reads", "writes", "bytes_written",
            "stdio_opens", "stdio_reads", "stdio_writes", "stdio_bytes_written")


def _counts(before, after, path):
    a, b = before.find(path), after.find(path)
    return {k: (getattr(b.counters, k) if b else 0) - (getattr(a.counters, k) if a else 0)
            for k in _SCALARS}


def _prepare(root, tag):
    src = os.path.join(root, f"src-{tag}")
    with open(src, "wb") as fh:
        fh.write(np.random.default_rng(8).bytes(10_000))
    out, ck = os.path.join(root, f"out-{tag}"), os.path.join(root, f"ck-{tag}")
    for p in (out, ck):
        if os.path.exists(p):
            os.unlink(p)
    return src, out, ck


def _fixture_calls(fx, src, out, ck):
    # only fixture calls here: the harness's own Python I/O stays outside windows
    return (fx.iotfx_pread_loop(src.encode(), 10, 1000),
            fx.iotfx_read_file(src.encode(), 4096),
            fx.iotfx_checksum(src.encode()),
            fx.iotfx_pwrite_at(out.encode(), 100, 5000),
            fx.iotfx_checkpoint(ck.encode(), 140, 4096),
            fx.iotfx_fread_file(ck.encode(), 8192))


def _contents(out, ck):
    with open(out, "rb") as fh1, open(ck, "rb") as fh2:
        return fh1.read(), fh2.read()


def criterion_8(root):
    fx = native.load("fixture")
    store = native_store()
    slots = interpose.scan_relocations(interpose.CATALOG)
    read_slot = lambda: {s.slot_address: ctypes.c_size_t.from_address(s.slot_address).value
                         for s in slots}
    before_slots = read_slot()
    paths = _prepare(root, "off")
    v_off = _fixture_calls(fx, *paths)
    c_off = _contents(*paths[1:])
    src, out, ck = _prepare(root, "on")
    state = interpose.attach()
    try:
        s0 = store.snapshot()
        v_on = _fixture_calls(fx, src, out, ck)
        s1 = store.snapshot()
    finally:
        interpose.detach(state)
    c_on = _contents(out, ck)
    restored = read_slot() == before_slots
    # derived from the calls issued: pread loop 10x1000; read loop 3 data reads + EOF;
    # checksum 2 reads (8 KiB buffer) + EOF; one pwrite; 140 fwrite; fread to EOF
    want = {
        src: dict.fromkeys(_SCALARS, 0) | {"opens": 3, "closes": 3, "reads": 10 + 4 + 3,
                                           "bytes_read": 30_000, "zero_reads": 2},
        out: dict.fromkeys(_SCALARS, 0) | {"opens": 1, "closes": 1, "writes": 1,
                                           "bytes_written": 5000},
        ck: dict.fromkeys(_SCALARS, 0) | {"stdio_opens": 2, "stdio_writes": 140,
                                          "stdio_bytes_written": 140 * 4096, "stdio_reads": 70 + 1},
    }
    got = {p: _counts(s0, s1, p) for p in want}
    _prepare(root, "on")
    v_after = _fixture_calls(fx, src, out, ck)
    s2 = store.snapshot()
    quiet = all(v == 0 for p in (src, out, ck) for v in _counts(s1, s2, p).values())
    exact = got == want
    same = v_on == v_off == v_after and c_on == c_off
    ok = restored and exact and quiet and same
    missed = {p: {k: (want[p][k], got[p][k]) for k in _SCALARS if want[p][k] != got[p][k]}
              for p in want}
    detail = (f"{len(slots)} slots restored bit-identical: {restored}; "
              f"events exact: {exact}{'' if exact else ' ' + json.dumps(missed)}; "
              f"silent after detach: {quiet}; contents identical: {same}")
    return ok, detail


def criterion_9(root):
    d, m = _dataset(root, "fixed64k", workload.DatasetSpec(1000, "FIXED", 64 * KiB))
    cfg = workload.WorkloadConfig(d, batch_size=64, steps=10, threads=2)
    result, whole = _profiled_stream(cfg, window_every=5, manifest=m)
    traces = [whole] + list(result.windows)
    n_events = 0
    for i, w in enumerate(traces):
        path = os.path.join(root, f"trace{i}.json")
        export.write_trace(export.export_trace_events(w), path)
        with open(path) as fh:
            doc = json.load(fh)
        export.validate_trace(doc)
        n_events += len(doc)
    trips = 0
    for seed in range(100):
        snap = random_snapshot(seed)
        path = os.path.join(root, "rt.ndjson")
        export.write_log(snap, path)
        trips += export.load_log(path) == snap
    ok = trips == 100 and n_events > 0
    return ok, f"{len(traces)} trace files valid ({n_events} events), {trips}/100 log round trips"


def criterion_10(root):
    fx = native.load("fixture")
    store = native_store()
    files = []
    for t in range(16):
        p = os.path.join(root, f"conc{t:02d}")
        if not os.path.exists(p):
            with open(p, "wb") as fh:
                fh.write(b"\x01" * (1000 * 4096))
        files.append(p)
    expected_reads, expected_bytes = 16 * 1000, 16 * 1000 * 4096
    failures = []
    state = interpose.attach()
    try:
        for rep in range(20):
            a = store.snapshot()
            barrier = threading.Barrier(16)

            def work(p):
                barrier.wait()
                fx.iotfx_pread_loop(p.encode(), 1000, 4096)

            th = [threading.Thread(target=work, args=(p,)) for p in files]
            for t in th:
                t.start()
            for t in th:
                t.join()
            w = diff(a, store.snapshot()).restrict(root)
            sel = w.select([i for i, p in enumerate(w.paths) if p in files])
            reads, nbytes = sel.total("reads"), sel.bytes_read_delta
            if (reads, nbytes) != (expected_reads, expected_bytes):
                failures.append((rep, reads, nbytes))
    finally:
        interpose.detach(state)
    ok = not failures
    return ok, (f"20 repetitions of {expected_reads} reads / {expected_bytes} bytes; "
                f"mismatches: {failures or 'none'}")


CRITERIA = {
    1: ("exact accounting", criterion_1),
    2: ("windowed bandwidth", criterion_2),
    3: ("zero-read signature", criterion_3),
    4: ("segmented-read distribution", criterion_4),
    5: ("checkpoint capture", criterion_5),
    6: ("staging plan", criterion_6),
    7: ("overhead bound", criterion_7),
    8: ("interposition correctness", criterion_8),
    9: ("export validity", criterion_9),
    10: ("concurrency", criterion_10),
}


def run_criterion(n: int, root: str) -> tuple[bool, str]:
    title, fn = CRITERIA[n]
    try:
        ok, detail = fn(root)
    except Exception as exc:  # a crash is a failure with its reason on the line
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return ok, _line(n, title, ok, detail)


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("acceptance"))


@pytest.mark.parametrize("n", sorted(CRITERIA), ids=[f"criterion_{n}" for n in sorted(CRITERIA)])
def test_criterion(n, root, capsys):
    ok, line = run_criterion(n, root)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        passed = 0
        for n in sorted(CRITERIA):
            ok, line = run_criterion(n, tmp)
            passed += ok
            print(line, flush=True)
    print(f"{passed}/{len(CRITERIA)} criteria passed")
    sys.exit(0 if passed == len(CRITERIA) else 1)
