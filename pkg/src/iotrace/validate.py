"""Profiler-versus-oracle validation and the overhead harness."""

from __future__ import annotations

import json
import random
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .collector import canonical_path
from .session import WindowStats
from .workload import CLOSE, OPEN, READ, OracleLog, WorkloadConfig, run_stream

WINDOWS_FORMAT = "iotrace-windows"
DEFAULT_TOLERANCE = 0.05


class MismatchedRun(ValueError):
    pass


@dataclass(frozen=True)
class WindowRecord:
    """Per-window profiler totals, restricted to the dataset directory."""

    window_id: int
    t_start: float
    t_stop: float
    opens: int
    closes: int
    reads: int
    zero_reads: int
    bytes_read: int
    bytes_written: int

    @classmethod
    def from_stats(cls, w: WindowStats, prefix: str | None = None) -> WindowRecord:
        r = w.restrict(prefix)
        return cls(w.window_id, w.t_start, w.t_stop, r.total("opens"), r.total("closes"),
                   r.total("reads"), r.total("zero_reads"), r.bytes_read_delta,
                   r.bytes_written_delta)


def save_windows(path, run_id: str, dataset_dir: str, windows) -> None:
    doc = {"format": WINDOWS_FORMAT, "run_id": run_id, "dataset_dir": dataset_dir,
           "windows": [asdict(w) for w in windows]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_windows(path) -> tuple[str, str, list[WindowRecord]]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != WINDOWS_FORMAT:
        raise ValueError(f"{path}: not a windows file")
    return doc["run_id"], doc["dataset_dir"], [WindowRecord(**w) for w in doc["windows"]]


@dataclass
class WindowCheck:
    window_id: int
    elapsed: float
    profiler_bytes: int
    oracle_bytes: int          # reads completing inside the window
    oracle_min: int            # reads entirely inside the window
    oracle_max: int            # reads overlapping the window
    profiler_bw: float
    oracle_bw: float
    rel_error: float
    bytes_ok: bool
    passed: bool


@dataclass
class ValidationReport:
    verdict: str
    tolerance: float
    totals: dict
    windows: list[WindowCheck] = field(default_factory=list)
    oracle_self_check: bool = True
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "tolerance": self.tolerance, "totals": self.totals,
                "oracle_self_check": self.oracle_self_check, "notes": list(self.notes),
                "windows": [asdict(w) for w in self.windows]}

    def render(self) -> str:
        lines = [f"verdict: {self.verdict} (bandwidth tolerance {self.tolerance:.1%})", "totals:"]
        for k, (p, o) in self.totals.items():
            flag = "ok" if p == o else "MISMATCH"
            lines.append(f"  {k:<12} profiler={p:<14} oracle={o:<14} {flag}")
        if self.windows:
            lines.append("windows:")
            lines.append(f"  {'id':>6} {'elapsed_s':>10} {'prof_MB/s':>11} {'oracle_MB/s':>11} "
                         f"{'rel_err':>8} bytes")
            for w in self.windows:
                lines.append(f"  {w.window_id:>6} {w.elapsed:>10.6f} {w.profiler_bw / 1e6:>11.3f} "
                             f"{w.oracle_bw / 1e6:>11.3f} {w.rel_error:>8.4f} "
                             f"{'ok' if w.bytes_ok else 'MISMATCH'}{'' if w.passed else '  FAIL'}")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def validate(windows: list[WindowRecord], oracle: OracleLog, dataset_dir: str | None = None,
             tolerance: float = DEFAULT_TOLERANCE, expected_entries: int | None = None,
             run_id: str | None = None, dataset_bytes: int | None = None) -> ValidationReport:
    """Compare profiler windows with the oracle.

    Totals (opens, reads, zero reads, bytes) must match exactly.  Per window,
    the profiler's bytes must lie between the bytes of reads wholly inside the
    window and those of reads overlapping it (calls in flight at a boundary
    may land on either side), and its bandwidth must be within ``tolerance``
    of the oracle's, which attributes each read to its completion time.
    """
    if run_id is not None and run_id != oracle.run_id:
        raise MismatchedRun(f"profiler run {run_id} vs oracle run {oracle.run_id}")
    if expected_entries is not None and expected_entries != len(oracle.entries):
        raise MismatchedRun(f"oracle promises {expected_entries} entries, holds {len(oracle.entries)}")
    e = oracle.entries
    if dataset_dir:
        prefix = canonical_path(dataset_dir).rstrip("/") + "/"
        in_set = np.array([canonical_path(p).startswith(prefix) for p in oracle.paths], dtype=bool)
        e = e[in_set[e["file"]]] if len(e) else e
    reads = e[e["kind"] == READ]
    totals = {
        "opens": (sum(w.opens for w in windows), int((e["kind"] == OPEN).sum())),
        "closes": (sum(w.closes for w in windows), int((e["kind"] == CLOSE).sum())),
        "reads": (sum(w.reads for w in windows), len(reads)),
        "zero_reads": (sum(w.zero_reads for w in windows), int((reads["length"] == 0).sum())),
        "bytes_read": (sum(w.bytes_read for w in windows), int(reads["length"].sum())),
    }
    notes = []
    self_ok = True
    if dataset_bytes is not None and dataset_bytes != totals["bytes_read"][1]:
        self_ok = False
        notes.append(f"oracle self-check failed: logged {totals['bytes_read'][1]} bytes, "
                     f"files consumed hold {dataset_bytes}")
    checks = []
    for w in windows:
        elapsed = w.t_stop - w.t_start
        t0, t1 = reads["t0"], reads["t1"]
        completed = int(reads["length"][(t1 > w.t_start) & (t1 <= w.t_stop)].sum())
        inside = int(reads["length"][(t0 >= w.t_start) & (t1 <= w.t_stop)].sum())
        overlap = int(reads["length"][(t1 > w.t_start) & (t0 < w.t_stop)].sum())
        p_bw = w.bytes_read / elapsed
        o_bw = completed / elapsed
        err = abs(p_bw - o_bw) / o_bw if o_bw else (0.0 if p_bw == 0 else float("inf"))
        bytes_ok = inside <= w.bytes_read <= overlap
        checks.append(WindowCheck(w.window_id, elapsed, w.bytes_read, completed, inside, overlap,
                                  p_bw, o_bw, err, bytes_ok, bytes_ok and err <= tolerance))
    exact = all(p == o for p, o in totals.values())
    verdict = "PASS" if exact and self_ok and all(c.passed for c in checks) else "FAIL"
    return ValidationReport(verdict, tolerance, totals, checks, self_ok, notes)


def validate_files(windows_path, oracle_path, tolerance: float = DEFAULT_TOLERANCE) -> ValidationReport:
    run_id, dataset_dir, windows = load_windows(windows_path)
    oracle, expected = OracleLog.load(oracle_path)
    return validate(windows, oracle, dataset_dir, tolerance, expected, run_id)


@dataclass
class OverheadResult:
    t_off: list[float]
    t_whole: list[float]
    t_periodic: list[float]
    order: list[list[str]]

    @property
    def mean_off(self) -> float:
        return float(np.mean(self.t_off))

    @property
    def mean_whole(self) -> float:
        return float(np.mean(self.t_whole))

    @property
    def mean_periodic(self) -> float:
        return float(np.mean(self.t_periodic))

    @property
    def ratio_whole(self) -> float:
        return self.mean_whole / self.mean_off - 1.0

    @property
    def ratio_periodic(self) -> float:
        return self.mean_periodic / self.mean_off - 1.0

    def to_dict(self) -> dict:
        return {"t_off": self.t_off, "t_whole": self.t_whole, "t_periodic": self.t_periodic,
                "mean_off": self.mean_off, "mean_whole": self.mean_whole,
                "mean_periodic": self.mean_periodic, "overhead_whole": self.ratio_whole,
                "overhead_periodic": self.ratio_periodic, "order": self.order}

    def render(self) -> str:
        return (f"profiling off     {self.mean_off:.4f} s\n"
                f"whole-run window  {self.mean_whole:.4f} s  ({self.ratio_whole:+.1%})\n"
                f"periodic windows  {self.mean_periodic:.4f} s  ({self.ratio_periodic:+.1%})\n")


def _timed_run(config: WorkloadConfig, mode: str, window_every: int) -> float:
    from .analysis import build_report
    from .session import ProfilingSession, diff

    t0 = time.perf_counter()
    if mode == "off":
        run_stream(config)
        return time.perf_counter() - t0
    session = ProfilingSession()
    try:
        result = run_stream(config, session, window_every if mode == "periodic" else None)
    finally:
        session.end()
    if len(result.windows) == 1:
        whole = result.windows[0]
    else:
        whole = diff(session.windows[0].start, session.windows[-1].stop)
    build_report(whole, result.windows)
    return time.perf_counter() - t0


def measure_overhead(config: WorkloadConfig, repetitions: int = 5, window_every: int = 5,
                     seed: int = 0, warmup: bool = True) -> OverheadResult:
    """Time the workload unprofiled, with one whole-run window, and with periodic windows.

    Caches cannot be dropped without privileges, so one unmeasured warm-up run
    brings the dataset into the page cache and the mode order is shuffled per
    repetition.
    """
    rng = random.Random(seed)
    if warmup:
        run_stream(config)
    times = {"off": [], "whole": [], "periodic": []}
    orders = []
    for _ in range(repetitions):
        order = list(times)
        rng.shuffle(order)
        orders.append(order)
        for mode in order:
            times[mode].append(_timed_run(config, mode, window_every))
    return OverheadResult(times["off"], times["whole"], times["periodic"], orders)


PAGE_CACHE_NOTE = ("note: page caches are not dropped (needs privileges); a warm-up run "
                   "precedes measurement and run order is shuffled per repetition")
