"""Synthetic datasets and an ingestion-only (STREAM-style) read workload.

The workload logs every I/O call it issues into an :class:`OracleLog`, which
is the ground truth the profiler is validated against.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import threading
import time
import uuid
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from .analysis import Manifest

log = logging.getLogger(__name__)

MiB = 1 << 20
KiB = 1 << 10

ORACLE_FORMAT = "iotrace-oracle"
ORACLE_VERSION = 1


class WorkloadError(RuntimeError):
    pass


class DatasetMissing(WorkloadError):
    pass


class Unwritable(WorkloadError):
    pass


class DiskFull(Unwritable):
    pass


class SizeModel(str, enum.Enum):
    FIXED = "FIXED"
    LOGNORMAL = "LOGNORMAL"
    MANIFEST = "MANIFEST"


# preset manifest shapes for SizeModel.MANIFEST
STAGING_PRESET = "staging"


@dataclass(frozen=True)
class DatasetSpec:
    file_count: int
    size_model: SizeModel = SizeModel.FIXED
    size: int = 64 * KiB          # FIXED
    median: float = 88_000.0      # LOGNORMAL
    sigma: float = 0.5            # LOGNORMAL
    manifest: str | None = None   # MANIFEST: a manifest path or a preset name
    seed: int = 0
    scale: int = 1                # on-disk size = nominal size // scale

    def __post_init__(self):
        object.__setattr__(self, "size_model", SizeModel(self.size_model))
        if self.file_count < 0:
            raise ValueError("file_count must be >= 0")
        if self.scale < 1:
            raise ValueError("scale must be >= 1")
        if self.size_model is SizeModel.MANIFEST and not self.manifest:
            raise ValueError("MANIFEST size model needs a manifest path or preset")


def staging_shaped_sizes(seed: int = 0, n_files: int = 10_868, total: int = 48_000_000_000,
                         n_small: int = 4_420, small_total: int = 3_700_000_000,
                         threshold: int = 2_000_000) -> np.ndarray:
    """File sizes of a segmented-read dataset with a known small-file tail.

    ``n_small`` files are <= ``threshold`` and sum exactly to ``small_total``;
    the rest exceed the threshold and bring the total exactly to ``total``.
    """
    rng = np.random.default_rng(seed)
    n_large = n_files - n_small
    target_mean = small_total / n_small
    if not 0 < target_mean < threshold:
        raise ValueError("small files cannot meet the requested total")
    a = 2.0
    m = target_mean / threshold
    small = rng.beta(a, a * (1 - m) / m, n_small) * threshold
    for _ in range(100):
        small *= small_total / small.sum()
        np.clip(small, 1, threshold, out=small)
        if abs(small.sum() - small_total) < 1:
            break
    small = _round_to_total(small, small_total, 1, threshold)

    large_budget = total - small_total
    floor = threshold + 1
    extra = rng.lognormal(mean=15.176, sigma=0.667, size=n_large)
    extra *= (large_budget - floor * n_large) / extra.sum()
    large = _round_to_total(floor + extra, large_budget, floor, None)
    sizes = np.concatenate([small, large])
    return sizes[rng.permutation(n_files)]


def _round_to_total(x: np.ndarray, total: int, lo: int, hi: int | None) -> np.ndarray:
    out = np.floor(x).astype(np.int64)
    np.clip(out, lo, hi if hi is not None else np.iinfo(np.int64).max, out=out)
    residual = int(total - out.sum())
    order = np.argsort(-(x - np.floor(x)))
    i = 0
    while residual != 0:
        j = order[i % len(out)]
        step = 1 if residual > 0 else -1
        if (hi is None or out[j] + step <= hi) and out[j] + step >= lo:
            out[j] += step
            residual -= step
        i += 1
        if i > 10 * len(out) + abs(residual) * 10:
            raise ValueError("cannot distribute rounding residual within bounds")
    return out


def dataset_sizes(spec: DatasetSpec) -> np.ndarray:
    """Nominal file sizes for a spec (deterministic in ``spec.seed``)."""
    if spec.size_model is SizeModel.FIXED:
        return np.full(spec.file_count, int(spec.size), dtype=np.int64)
    if spec.size_model is SizeModel.LOGNORMAL:
        rng = np.random.default_rng(spec.seed)
        sizes = spec.median * np.exp(spec.sigma * rng.standard_normal(spec.file_count))
        return np.maximum(np.rint(sizes), 0).astype(np.int64)
    if spec.manifest == STAGING_PRESET:
        sizes = staging_shaped_sizes(spec.seed)
    else:
        sizes = np.asarray(Manifest.load(spec.manifest).sizes, dtype=np.int64)
    if spec.file_count and spec.file_count != len(sizes):
        raise ValueError(f"manifest has {len(sizes)} files, spec asks for {spec.file_count}")
    return sizes


def _file_name(i: int) -> str:
    return os.path.join(f"d{i // 1000:03d}", f"f{i:06d}.bin")


def make_dataset(spec: DatasetSpec, out_dir: str | os.PathLike) -> Manifest:
    """Write the dataset files and ``manifest.csv`` into ``out_dir``."""
    out_dir = os.path.abspath(out_dir)
    sizes = dataset_sizes(spec)
    disk = sizes // spec.scale
    rng = np.random.default_rng(spec.seed ^ 0x5EED)
    block = rng.integers(0, 256, size=int(min(disk.max(initial=0), 8 * MiB)) + 8,
                         dtype=np.uint8).tobytes()
    paths = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        for i, n in enumerate(disk):
            p = os.path.join(out_dir, _file_name(i))
            if i % 1000 == 0:
                os.makedirs(os.path.dirname(p), exist_ok=True)
            with open(p, "wb") as fh:
                n = int(n)
                head = i.to_bytes(8, "little")
                remaining = n
                first = True
                while remaining > 0:
                    chunk = block[: min(remaining, len(block))]
                    if first:
                        chunk = (head + chunk[8:])[: len(chunk)]
                        first = False
                    fh.write(chunk)
                    remaining -= len(chunk)
            paths.append(p)
        manifest = Manifest(tuple(paths), tuple(int(s) for s in sizes), tuple(int(d) for d in disk))
        manifest.save(os.path.join(out_dir, "manifest.csv"))
    except OSError as exc:
        if exc.errno == 28:
            raise DiskFull(str(exc)) from exc
        raise Unwritable(str(exc)) from exc
    return manifest


def load_dataset(dataset_dir: str | os.PathLike) -> Manifest:
    path = os.path.join(dataset_dir, "manifest.csv")
    if not os.path.exists(path):
        raise DatasetMissing(f"no manifest.csv in {dataset_dir}")
    manifest = Manifest.load(path)
    if manifest.paths and not os.path.exists(manifest.paths[0]):
        raise DatasetMissing(f"dataset files missing under {dataset_dir}")
    return manifest


@dataclass
class WorkloadConfig:
    dataset_dir: str
    batch_size: int = 128
    steps: int = 100
    threads: int = 1
    prefetch_depth: int = 1
    chunk_size: int = MiB
    emulate_trailing_zero_read: bool = True
    checkpoint_every: int | None = None
    writes_per_checkpoint: int = 140
    checkpoint_write_size: int = 4096
    compute_time: float = 0.0
    shuffle_seed: int | None = None

    def __post_init__(self):
        for name in ("batch_size", "steps", "threads", "chunk_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.prefetch_depth < 0:
            raise ValueError("prefetch_depth must be >= 0")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")


OPEN, READ, CLOSE, WRITE = 0, 1, 2, 3
KIND_NAMES = ("OPEN", "READ", "CLOSE", "WRITE")
ORACLE_DTYPE = np.dtype([("thread", "<i4"), ("file", "<i8"), ("kind", "<i1"),
                         ("offset", "<i8"), ("length", "<i8"), ("t0", "<f8"), ("t1", "<f8")])


@dataclass
class OracleLog:
    """Every I/O call issued by the workload, with its own timestamps.

    ``entries["file"]`` indexes ``paths``; times are monotonic seconds on the
    same clock as the profiler.
    """

    run_id: str
    paths: tuple[str, ...]
    entries: np.ndarray = field(default_factory=lambda: np.zeros(0, ORACLE_DTYPE))

    def of_kind(self, kind: int) -> np.ndarray:
        return self.entries[self.entries["kind"] == kind]

    def totals(self) -> dict[str, int]:
        reads = self.of_kind(READ)
        writes = self.of_kind(WRITE)
        return {"opens": int((self.entries["kind"] == OPEN).sum()),
                "closes": int((self.entries["kind"] == CLOSE).sum()),
                "reads": len(reads), "bytes_read": int(reads["length"].sum()),
                "zero_reads": int((reads["length"] == 0).sum()),
                "writes": len(writes), "bytes_written": int(writes["length"].sum())}

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps({"format": ORACLE_FORMAT, "version": ORACLE_VERSION,
                                 "run_id": self.run_id, "paths": list(self.paths),
                                 "entries": len(self.entries)}, separators=(",", ":")) + "\n")
            for e in self.entries:
                fh.write(json.dumps([int(e["thread"]), int(e["file"]), KIND_NAMES[e["kind"]],
                                     int(e["offset"]), int(e["length"]), float(e["t0"]),
                                     float(e["t1"])], separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> tuple[OracleLog, int]:
        """The log plus the entry count its header promises."""
        with open(path) as fh:
            head = json.loads(fh.readline())
            if head.get("format") != ORACLE_FORMAT:
                raise WorkloadError(f"{path}: not an oracle log")
            rows = []
            for line in fh:
                if not line.strip():
                    continue
                try:
                    t, f, k, off, n, t0, t1 = json.loads(line)
                except ValueError:
                    break  # a cut-off final line; the count check reports it
                rows.append((t, f, KIND_NAMES.index(k), off, n, t0, t1))
        entries = np.array(rows, dtype=ORACLE_DTYPE)
        return cls(head["run_id"], tuple(head["paths"]), entries), int(head["entries"])


class PrefetchBuffer:
    """Bounded FIFO of ready batches.

    A batch handed straight to a consumer already blocked in :meth:`get` does
    not occupy the buffer, so depth 0 means synchronous hand-off.
    """

    def __init__(self, depth: int):
        self.depth = depth
        self._items: list = []
        self._waiting = 0
        self._cond = threading.Condition()
        self._closed = False
        self.max_occupancy = 0

    def _occupancy(self) -> int:
        return max(len(self._items) - self._waiting, 0)

    def put(self, item) -> None:
        with self._cond:
            while self._occupancy() >= self.depth and self._waiting <= len(self._items):
                if self._closed:
                    return
                self._cond.wait()
            self._items.append(item)
            self.max_occupancy = max(self.max_occupancy, self._occupancy())
            self._cond.notify_all()

    def get(self, timeout: float | None = None):
        with self._cond:
            self._waiting += 1
            try:
                self._cond.notify_all()
                deadline = None if timeout is None else time.monotonic() + timeout
                while not self._items:
                    if self._closed:
                        raise WorkloadError("prefetch buffer closed")
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        raise TimeoutError("no batch ready")
                    self._cond.wait(remaining)
                item = self._items.pop(0)
            finally:
                self._waiting -= 1
            self._cond.notify_all()
            return item

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


@dataclass
class StreamResult:
    config: WorkloadConfig
    oracle: OracleLog
    files_consumed: int
    batches: int
    elapsed: float
    max_prefetch_occupancy: int
    windows: list = field(default_factory=list)
    checkpoints: int = 0

    def summary(self) -> dict:
        t = self.oracle.totals()
        return {"run_id": self.oracle.run_id, "files_consumed": self.files_consumed,
                "batches": self.batches, "elapsed": self.elapsed,
                "max_prefetch_occupancy": self.max_prefetch_occupancy,
                "checkpoints": self.checkpoints, **t, "config": asdict(self.config)}


def _read_file(fd: int, size: int, chunk: int, zero_read: bool, rec, thread: int, fidx: int) -> int:
    off = 0
    mono = time.monotonic
    while True:
        want = chunk if zero_read else min(chunk, size - off)
        if not zero_read and want <= 0:
            return off
        t0 = mono()
        data = os.pread(fd, want, off)
        t1 = mono()
        n = len(data)
        rec((thread, fidx, READ, off, n, t0, t1))
        off += n
        if n == 0:
            return off


def run_stream(config: WorkloadConfig, session=None, window_every: int | None = None,
               on_window: Callable | None = None, manifest: Manifest | None = None) -> StreamResult:
    """Run the workload; with a session, close windows every ``window_every`` steps.

    Worker threads pull files in batch order, read each one with positional
    reads and hand completed batches to a bounded prefetch buffer; the calling
    thread consumes one batch per step and drives the profiling windows.
    """
    from .session import periodic_windows

    manifest = load_dataset(config.dataset_dir) if manifest is None else manifest
    n_files = len(manifest)
    if n_files == 0:
        raise DatasetMissing("dataset is empty")
    order = np.arange(n_files)
    if config.shuffle_seed is not None:
        order = np.random.default_rng(config.shuffle_seed).permutation(n_files)
    disk = manifest.disk_sizes or manifest.sizes
    total = config.steps * config.batch_size
    B = config.batch_size
    buffer = PrefetchBuffer(config.prefetch_depth)
    cond = threading.Condition()
    state = {"next": 0, "batch": 0, "done": 0, "error": None}
    logs: list[list] = [[] for _ in range(config.threads)]
    checkpointer = _Checkpointer(config) if config.checkpoint_every else None

    def worker(tid: int) -> None:
        rec = logs[tid].append
        try:
            while True:
                with cond:
                    while (state["next"] < total and state["next"] // B > state["batch"]
                           and state["error"] is None):
                        cond.wait()
                    if state["next"] >= total or state["error"] is not None:
                        return
                    i = state["next"]
                    state["next"] += 1
                fidx = int(order[i % n_files])
                path = manifest.paths[fidx]
                t0 = time.monotonic()
                fd = os.open(path, os.O_RDONLY)
                t1 = time.monotonic()
                rec((tid, fidx, OPEN, 0, 0, t0, t1))
                try:
                    _read_file(fd, int(disk[fidx]), config.chunk_size,
                               config.emulate_trailing_zero_read, rec, tid, fidx)
                finally:
                    t0 = time.monotonic()
                    os.close(fd)
                    rec((tid, fidx, CLOSE, 0, 0, t0, time.monotonic()))
                with cond:
                    state["done"] += 1
                    if state["done"] == B:
                        buffer.put(state["batch"])
                        state["done"] = 0
                        state["batch"] += 1
                        cond.notify_all()
        except BaseException as exc:
            log.error("worker %d failed: %s", tid, exc)
            with cond:
                state["error"] = exc
                cond.notify_all()
            buffer.close()

    def step(s: int) -> None:
        try:
            buffer.get()
        except WorkloadError:
            raise WorkloadError(f"worker failed: {state['error']!r}") from state["error"]
        if config.compute_time:
            time.sleep(config.compute_time)
        if checkpointer and (s + 1) % config.checkpoint_every == 0:
            checkpointer.checkpoint(logs_main)

    logs_main: list = []
    threads = [threading.Thread(target=worker, args=(t,), daemon=True, name=f"stream-{t}")
               for t in range(config.threads)]
    windows = []
    t_start = time.monotonic()
    if session is not None and not session.is_open:
        session.start()
    for t in threads:
        t.start()
    try:
        if session is not None and window_every:
            for w in periodic_windows(session, window_every, config.steps, step):
                windows.append(w)
                if on_window:
                    on_window(w)
        else:
            for s in range(config.steps):
                step(s)
            if session is not None:
                w = session.stop().stats()
                windows.append(w)
                if on_window:
                    on_window(w)
    finally:
        with cond:
            if state["error"] is None and state["next"] < total:
                state["error"] = WorkloadError("aborted")
            cond.notify_all()
        buffer.close()
        for t in threads:
            t.join()
    elapsed = time.monotonic() - t_start
    if isinstance(state["error"], Exception) and str(state["error"]) != "aborted":
        raise WorkloadError(f"worker failed: {state['error']!r}") from state["error"]

    all_paths = list(manifest.paths)
    extra_paths = {}
    rows = [r for lg in logs for r in lg]
    for r in logs_main:
        idx = extra_paths.setdefault(r[1], n_files + len(extra_paths))
        rows.append((r[0], idx, *r[2:]))
    all_paths += list(extra_paths)
    entries = np.array(rows, dtype=ORACLE_DTYPE)
    entries = entries[np.argsort(entries["t0"], kind="stable")]
    oracle = OracleLog(uuid.uuid4().hex, tuple(all_paths), entries)
    return StreamResult(config, oracle, total, config.steps, elapsed, buffer.max_occupancy,
                        windows, checkpointer.count if checkpointer else 0)


class _Checkpointer:
    """Buffered (STDIO) writes through the native fixture library."""

    def __init__(self, config: WorkloadConfig, directory: str | None = None):
        from . import native

        self.lib = native.load("fixture")
        self.dir = directory or os.path.join(config.dataset_dir, "checkpoints")
        self.writes = config.writes_per_checkpoint
        self.nbytes = config.checkpoint_write_size
        self.count = 0
        os.makedirs(self.dir, exist_ok=True)

    def checkpoint(self, sink: list | None = None) -> str:
        path = os.path.join(self.dir, f"ckpt-{self.count:04d}.bin")
        t0 = time.monotonic()
        rc = self.lib.iotfx_checkpoint(os.fsencode(path), self.writes, self.nbytes)
        t1 = time.monotonic()
        if rc < 0:
            raise Unwritable(f"checkpoint to {path} failed")
        if sink is not None:
            sink.extend((-1, path, WRITE, k * self.nbytes, self.nbytes, t0, t1)
                        for k in range(self.writes))
        self.count += 1
        return path


def checkpoint_emulation(directory: str | os.PathLike, n_checkpoints: int,
                         writes_per_checkpoint: int = 140, bytes_per_write: int = 4096,
                         session=None):
    """Emit ``n_checkpoints`` bursts of ``fwrite`` calls; returns the window if profiled."""
    if n_checkpoints < 0 or writes_per_checkpoint < 0 or bytes_per_write < 0:
        raise ValueError("counts must be >= 0")
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise Unwritable(str(exc)) from exc
    cfg = WorkloadConfig(str(directory), writes_per_checkpoint=writes_per_checkpoint,
                         checkpoint_write_size=bytes_per_write)
    ck = _Checkpointer(cfg, str(directory))
    if session is not None and not session.is_open:
        session.start()
    for _ in range(n_checkpoints):
        ck.checkpoint()
    return session.stop().stats() if session is not None else None
