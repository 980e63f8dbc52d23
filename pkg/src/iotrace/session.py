"""Profiling windows: start/stop snapshots, diffs, and windowed bandwidth."""

from __future__ import annotations

import enum
import itertools
import logging
import threading
from collections.abc import Callable, Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from . import interpose
from .collector import (
    COL, N_COUNTERS, NON_ADDITIVE, SEG_DTYPE, TIME_FIELDS, CounterSet, NativeStore,
    Snapshot, canonical_path, native_store,
)

log = logging.getLogger(__name__)

_ADDITIVE = np.ones(N_COUNTERS, dtype=bool)
_ADDITIVE[list(NON_ADDITIVE)] = False
_ADDITIVE_COLS = np.flatnonzero(_ADDITIVE)
_NON_ADDITIVE_COLS = np.flatnonzero(~_ADDITIVE)


class SessionError(RuntimeError):
    pass


class WindowAlreadyOpen(SessionError):
    pass


class NoOpenWindow(SessionError):
    pass


class InvalidWindow(ValueError):
    pass


class AttachmentPolicy(str, enum.Enum):
    AUTO = "auto"        # adopt a preloaded shim, else attach at runtime
    RUNTIME = "runtime"
    PRELOAD = "preload"
    NONE = "none"        # caller feeds the store itself


class WindowStats:
    """Counter deltas between two snapshots.

    Rows are the records whose additive counters changed in the window, in
    record-id order.  High-water marks (max offsets) and timestamps carry the
    stop snapshot's values.
    """

    def __init__(self, window_id, t_start, t_stop, t_wall_start, t_wall_stop, ids, paths,
                 deltas, times, segments, truncated, dxt_enabled=True):
        self.window_id = int(window_id)
        self.t_start = float(t_start)
        self.t_stop = float(t_stop)
        self.t_wall_start = float(t_wall_start)
        self.t_wall_stop = float(t_wall_stop)
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.paths = tuple(paths)
        self.deltas = np.asarray(deltas, dtype=np.int64).reshape(len(self.paths), N_COUNTERS)
        self.times = np.asarray(times, dtype=np.float64).reshape(len(self.paths), len(TIME_FIELDS))
        self.segments = np.asarray(segments, dtype=SEG_DTYPE)
        self.truncated = np.asarray(truncated, dtype=bool)
        self.dxt_enabled = bool(dxt_enabled)
        self._totals: CounterSet | None = None

    @property
    def elapsed(self) -> float:
        return self.t_stop - self.t_start

    @property
    def totals(self) -> CounterSet:
        if self._totals is None:
            ints = self.deltas.sum(axis=0) if len(self.paths) else np.zeros(N_COUNTERS, np.int64)
            for col in NON_ADDITIVE:
                ints[col] = self.deltas[:, col].max() if len(self.paths) else 0
            self._totals = CounterSet.from_row(ints, [0.0] * len(TIME_FIELDS))
        return self._totals

    def total(self, name: str) -> int:
        return int(self.deltas[:, COL[name]].sum())

    @property
    def bytes_read_delta(self) -> int:
        return self.total("bytes_read")

    @property
    def bytes_written_delta(self) -> int:
        return self.total("bytes_written")

    @property
    def op_deltas(self) -> dict[str, int]:
        return {name: self.total(name) for name in
                ("opens", "closes", "reads", "writes", "zero_reads", "seq_reads",
                 "consec_reads", "seq_writes", "consec_writes", "stdio_opens",
                 "stdio_reads", "stdio_writes", "stdio_bytes_written")}

    @property
    def bandwidth_read(self) -> float:
        return self.bytes_read_delta / self.elapsed

    @property
    def bandwidth_write(self) -> float:
        return self.bytes_written_delta / self.elapsed

    @property
    def per_file_deltas(self) -> Mapping[int, CounterSet]:
        return {int(i): CounterSet.from_row(self.deltas[r], self.times[r])
                for r, i in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.paths)

    def __repr__(self) -> str:
        return (f"WindowStats(id={self.window_id}, elapsed={self.elapsed:.6f}, files={len(self)}, "
                f"bytes_read={self.bytes_read_delta}, bytes_written={self.bytes_written_delta})")

    def select(self, rows) -> WindowStats:
        rows = np.asarray(rows, dtype=np.int64)
        remap = np.full(len(self.paths), -1, dtype=np.int64)
        remap[rows] = np.arange(len(rows))
        segs = self.segments[np.isin(self.segments["rec"], rows)].copy()
        segs["rec"] = remap[segs["rec"]]
        return WindowStats(self.window_id, self.t_start, self.t_stop, self.t_wall_start,
                           self.t_wall_stop, self.ids[rows], [self.paths[i] for i in rows],
                           self.deltas[rows], self.times[rows], segs, self.truncated[rows],
                           self.dxt_enabled)

    def restrict(self, prefix: str | None) -> WindowStats:
        """Only files under a directory (or everything when ``prefix`` is empty)."""
        if not prefix:
            return self
        prefix = canonical_path(prefix).rstrip("/") + "/"
        return self.select([i for i, p in enumerate(self.paths) if p.startswith(prefix)])


def diff(start: Snapshot, stop: Snapshot, window_id: int = 0) -> WindowStats:
    """Per-record counter subtraction; records new in ``stop`` start from zero."""
    elapsed = stop.t_mono - start.t_mono
    if not elapsed > 0:
        raise InvalidWindow(f"non-positive elapsed time {elapsed!r}")
    fast = stop.rows_changed_since(start)
    if fast is not None:
        rows, current, base, times, truncated = fast
    else:
        rows = np.arange(len(stop))
        current, base = stop.counters, _aligned_base(start, stop)
        times, truncated = stop.times, stop.truncated
    deltas = current - base
    deltas[:, _NON_ADDITIVE_COLS] = current[:, _NON_ADDITIVE_COLS]
    additive = deltas[:, _ADDITIVE_COLS]
    if (additive < 0).any():
        raise InvalidWindow("counters decreased between snapshots; different stores?")
    keep = additive.any(axis=1)
    changed = rows[keep]

    # segments appended within the window: per-record sequence numbers past
    # the start snapshot's count for that record
    segs = stop.segments_since(start)
    if segs is None:
        idx, present = _alignment(start, stop)
        start_counts = np.zeros(len(stop), dtype=np.int64)
        if len(start):
            start_counts[present] = start.segment_counts()[idx[present]]
        segs = stop.segments
        if len(segs):
            segs = segs[segs["seq"] >= start_counts[segs["rec"]]]
    remap = np.full(len(stop), -1, dtype=np.int64)
    remap[changed] = np.arange(len(changed))
    segs = segs.copy()
    segs["rec"] = remap[segs["rec"]]
    segs = segs[segs["rec"] >= 0]

    return WindowStats(window_id, start.t_mono, stop.t_mono, start.t_wall, stop.t_wall,
                       stop.ids[changed], stop.paths_of(changed), deltas[keep],
                       times[keep], segs, truncated[keep], stop.dxt_enabled)


def _alignment(start: Snapshot, stop: Snapshot) -> tuple[np.ndarray, np.ndarray]:
    """Row of each ``stop`` record in ``start`` and whether it exists there."""
    n_start = len(start)
    if start.ids is stop.ids or np.array_equal(start.ids, stop.ids):
        return np.arange(n_start), np.ones(n_start, dtype=bool)
    idx = np.searchsorted(start.ids, stop.ids)
    present = np.zeros(len(stop), dtype=bool)
    ok = idx < n_start
    present[ok] = start.ids[idx[ok]] == stop.ids[ok]
    if int(present.sum()) != n_start:
        raise InvalidWindow("start snapshot holds records missing from stop; different stores?")
    return idx, present


def _aligned_base(start: Snapshot, stop: Snapshot) -> np.ndarray:
    idx, present = _alignment(start, stop)
    if present.all() and len(start) == len(stop):
        return start.counters
    base = np.zeros_like(stop.counters)
    base[present] = start.counters[idx[present]]
    return base


_window_ids = itertools.count(1)
_window_ids_lock = threading.Lock()


def _next_window_id() -> int:
    with _window_ids_lock:
        return next(_window_ids)


@dataclass(frozen=True)
class ProfilingWindow:
    start: Snapshot
    stop: Snapshot
    window_id: int

    def __post_init__(self):
        if not self.stop.t_mono > self.start.t_mono:
            raise InvalidWindow("stop must come after start")

    def stats(self) -> WindowStats:
        return diff(self.start, self.stop, self.window_id)


def window_bandwidth(w: ProfilingWindow | WindowStats) -> tuple[float, float]:
    """(read, write) bandwidth in bytes per second over the window."""
    stats = w.stats() if isinstance(w, ProfilingWindow) else w
    if not stats.elapsed > 0:
        raise InvalidWindow(f"non-positive elapsed time {stats.elapsed!r}")
    return stats.bandwidth_read, stats.bandwidth_write


class ProfilingSession:
    """Start/stop control over one store.

    Interposition is ensured on the first start and kept across windows;
    :meth:`end` closes any open window and undoes a runtime attachment made
    by this session.
    """

    def __init__(self, store=None, policy: AttachmentPolicy | str = AttachmentPolicy.AUTO,
                 targets=None):
        self.policy = AttachmentPolicy(policy)
        if store is None:
            store = native_store() if self.policy is not AttachmentPolicy.NONE else None
            if store is None:
                raise ValueError("policy 'none' needs an explicit store")
        self.store = store
        self.targets = targets
        self.windows: list[ProfilingWindow] = []
        self._start: Snapshot | None = None
        self._start_id: int | None = None
        self._attached: interpose.AttachmentState | None = None

    @property
    def is_open(self) -> bool:
        return self._start is not None

    def _ensure_attached(self) -> None:
        if self.policy is AttachmentPolicy.NONE or not isinstance(self.store, NativeStore):
            return
        state = interpose.current_state()
        if state.mode is not interpose.Mode.DETACHED:
            return
        if self.policy in (AttachmentPolicy.AUTO, AttachmentPolicy.PRELOAD) and interpose.preload_active():
            interpose.preload_init()
            return
        if self.policy is AttachmentPolicy.PRELOAD:
            raise interpose.PreloadInactive("preload policy requested but the shim is not preloaded")
        self._attached = interpose.attach(self.targets)

    def start(self) -> int:
        if self.is_open:
            raise WindowAlreadyOpen(f"window {self._start_id} is still open")
        self._ensure_attached()
        self._start = self.store.snapshot()
        self._start_id = _next_window_id()
        return self._start_id

    def stop(self, restart: bool = False) -> ProfilingWindow:
        """Close the open window; with ``restart`` the stop snapshot opens the next."""
        if not self.is_open:
            raise NoOpenWindow("no window is open")
        stop = self.store.snapshot()
        window = ProfilingWindow(self._start, stop, self._start_id)
        self.windows.append(window)
        if restart:
            self._start, self._start_id = stop, _next_window_id()
        else:
            self._start = self._start_id = None
        return window

    def end(self) -> ProfilingWindow | None:
        window = self.stop() if self.is_open else None
        if self._attached is not None and self._attached.mode is interpose.Mode.RUNTIME:
            if interpose.current_state() is self._attached:
                interpose.detach(self._attached)
        self._attached = None
        return window

    def __enter__(self) -> ProfilingSession:
        if not self.is_open:
            self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.end()


def start_profiling(store=None, policy: AttachmentPolicy | str = AttachmentPolicy.AUTO,
                    targets=None) -> ProfilingSession:
    session = ProfilingSession(store, policy, targets)
    session.start()
    return session


def stop_profiling(session: ProfilingSession) -> ProfilingWindow:
    return session.stop()


def periodic_windows(session: ProfilingSession, every_n_steps: int, steps: int,
                     step_callback: Callable[[int], object]) -> Iterator[WindowStats]:
    """Run ``steps`` steps, closing a window after every ``every_n_steps``.

    Consecutive windows share their boundary snapshot, so together they
    partition the run.  A trailing partial group still yields a window.
    """
    if every_n_steps < 1:
        raise ValueError("every_n_steps must be >= 1")
    if not session.is_open:
        session.start()
    for step in range(steps):
        step_callback(step)
        last = step == steps - 1
        if (step + 1) % every_n_steps == 0 or last:
            yield session.stop(restart=not last).stats()
