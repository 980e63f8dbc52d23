"""Per-file counter records, the operation trace buffer, and snapshots.

Two stores share one contract:

* :class:`RecordStore` is a pure-Python store fed by explicit ``on_*`` calls.
  It is the reference model for the counter semantics.
* :class:`NativeStore` fronts the store living inside the native shim, which
  the interposed wrappers update directly on the I/O hot path.

Both produce the same canonical :class:`Snapshot` (rows sorted by record id),
so everything downstream is agnostic of where the counts came from.
"""

from __future__ import annotations

import ctypes
import enum
import os
import threading
import time
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np
import numpy.ctypeslib  # noqa: F401  (lazy in numpy 2; must not load while attached)

SCALAR_COUNTERS = (
    "opens", "closes", "reads", "writes",
    "bytes_read", "bytes_written", "zero_reads",
    "seq_reads", "consec_reads", "seq_writes", "consec_writes",
    "max_read_offset", "max_write_offset",
)
STDIO_COUNTERS = ("stdio_opens", "stdio_reads", "stdio_writes", "stdio_bytes_written")
N_BUCKETS = 10
TIME_FIELDS = ("t_first_open", "t_first_read", "t_last_read", "t_first_write", "t_last_write")

# column layout of the counter matrix; must match the native shim
COLUMNS: tuple[str, ...] = (
    SCALAR_COUNTERS
    + tuple(f"read_size_hist[{i}]" for i in range(N_BUCKETS))
    + tuple(f"write_size_hist[{i}]" for i in range(N_BUCKETS))
    + STDIO_COUNTERS
)
N_COUNTERS = len(COLUMNS)
COL = {name: i for i, name in enumerate(COLUMNS)}
READ_HIST = slice(COL["read_size_hist[0]"], COL["read_size_hist[0]"] + N_BUCKETS)
WRITE_HIST = slice(COL["write_size_hist[0]"], COL["write_size_hist[0]"] + N_BUCKETS)
# high-water marks: not additive, windows carry the stop value
NON_ADDITIVE = (COL["max_read_offset"], COL["max_write_offset"])

BUCKET_UPPER = (100, 1024, 10240, 102400, 1048576, 4194304, 10485760, 104857600, 1073741824)
BUCKET_LABELS = (
    "0-100", "100-1K", "1K-10K", "10K-100K", "100K-1M",
    "1M-4M", "4M-10M", "10M-100M", "100M-1G", "1G+",
)

ANONYMOUS_PATH = "<anonymous>"
DEFAULT_DXT_CAPACITY = 1024

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_ID_STEP = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class Family(str, enum.Enum):
    POSIX = "POSIX"
    STDIO = "STDIO"

    @property
    def code(self) -> int:
        return 0 if self is Family.POSIX else 1


class Kind(str, enum.Enum):
    READ = "READ"
    WRITE = "WRITE"


class AccessKind(str, enum.Enum):
    CONSECUTIVE = "CONSECUTIVE"
    SEQUENTIAL = "SEQUENTIAL"
    RANDOM = "RANDOM"


def classify_access(prev_end: int, offset: int) -> AccessKind:
    """Classify an access against the end offset of the previous one.

    Consecutive accesses start exactly where the previous one ended; sequential
    ones start at or beyond it.  Consecutive implies sequential for counting.
    """
    if offset == prev_end:
        return AccessKind.CONSECUTIVE
    if offset > prev_end:
        return AccessKind.SEQUENTIAL
    return AccessKind.RANDOM


def bucket_for(size: int) -> int:
    if size < 0:
        raise ValueError(f"size must be >= 0, got {size}")
    for i, upper in enumerate(BUCKET_UPPER):
        if size <= upper:
            return i
    return N_BUCKETS - 1


def canonical_path(path: str | bytes, cwd: str | None = None) -> str:
    """Absolute, lexically normalised path (symlinks are not resolved)."""
    path = os.fsdecode(path)
    if not path.startswith("/"):
        path = (cwd if cwd is not None else os.getcwd()) + "/" + path
    parts: list[str] = []
    for part in path.split("/"):
        if part in ("", "."):
            continue
        if part == "..":
            if parts:
                parts.pop()
            continue
        parts.append(part)
    return "/" + "/".join(parts)


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def record_id_for(canonical: str) -> int:
    """64-bit FNV-1a of the canonical path bytes (before collision stepping)."""
    return fnv1a64(os.fsencode(canonical))


@dataclass(frozen=True)
class CounterSet:
    opens: int = 0
    closes: int = 0
    reads: int = 0
    writes: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    zero_reads: int = 0
    seq_reads: int = 0
    consec_reads: int = 0
    seq_writes: int = 0
    consec_writes: int = 0
    max_read_offset: int = 0
    max_write_offset: int = 0
    read_size_hist: tuple[int, ...] = (0,) * N_BUCKETS
    write_size_hist: tuple[int, ...] = (0,) * N_BUCKETS
    stdio_opens: int = 0
    stdio_reads: int = 0
    stdio_writes: int = 0
    stdio_bytes_written: int = 0
    t_first_open: float = 0.0
    t_first_read: float = 0.0
    t_last_read: float = 0.0
    t_first_write: float = 0.0
    t_last_write: float = 0.0

    @classmethod
    def from_row(cls, ints, times) -> CounterSet:
        ints = [int(v) for v in ints]
        kw = dict(zip(SCALAR_COUNTERS, ints))
        kw["read_size_hist"] = tuple(ints[READ_HIST])
        kw["write_size_hist"] = tuple(ints[WRITE_HIST])
        kw.update(zip(STDIO_COUNTERS, ints[WRITE_HIST.stop:]))
        kw.update(zip(TIME_FIELDS, (float(t) for t in times)))
        return cls(**kw)

    def int_row(self) -> list[int]:
        return ([getattr(self, n) for n in SCALAR_COUNTERS] + list(self.read_size_hist)
                + list(self.write_size_hist) + [getattr(self, n) for n in STDIO_COUNTERS])

    def time_row(self) -> list[float]:
        return [getattr(self, n) for n in TIME_FIELDS]

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> CounterSet:
        kw = {}
        for f in fields(cls):
            v = d.get(f.name, f.default)
            if f.name.endswith("_hist"):
                v = tuple(int(x) for x in v)
            elif f.name.startswith("t_"):
                v = float(v)
            else:
                v = int(v)
            kw[f.name] = v
        return cls(**kw)


class DxtSegment(NamedTuple):
    kind: Kind
    offset: int
    length: int
    t_start: float
    t_end: float


@dataclass(frozen=True)
class FileRecord:
    record_id: int
    path: str
    counters: CounterSet
    segments: tuple[DxtSegment, ...] = ()
    open_fds: Mapping[int, int] = field(default_factory=dict)
    segments_truncated: bool = False


SEG_DTYPE = np.dtype([
    ("rec", "<i8"), ("seq", "<i8"), ("kind", "<i1"),
    ("offset", "<i8"), ("length", "<i8"), ("t_start", "<f8"), ("t_end", "<f8"),
])
FD_DTYPE = np.dtype([("fd", "<i4"), ("family", "<i1"), ("rec", "<i8"), ("offset", "<i8")])
_NATIVE_SEG_DTYPE = np.dtype([
    ("rec", "<i8"), ("seq", "<i8"), ("kind", "<i4"), ("pad", "<i4"),
    ("offset", "<i8"), ("length", "<i8"), ("t_start", "<f8"), ("t_end", "<f8"),
])
_NATIVE_FD_DTYPE = np.dtype([("fd", "<i4"), ("family", "<i4"), ("rec", "<i8"), ("offset", "<i8")])


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _canonical_segments(segs: np.ndarray, remap: np.ndarray) -> np.ndarray:
    """Copy into SEG_DTYPE, map ``rec`` through ``remap`` and sort by (rec, seq)."""
    out = np.zeros(len(segs), SEG_DTYPE)
    if not len(out):
        return out
    rec = remap[segs["rec"]]
    seq = np.asarray(segs["seq"], dtype=np.int64)
    span = int(seq.max()) + 1 if seq.min() >= 0 else 0
    if span and int(rec.max()) < np.iinfo(np.int64).max // span:
        # (rec, seq) pairs are unique, so one combined key needs no stable sort
        order = np.argsort(rec * span + seq)
    else:
        order = np.lexsort((seq, rec))
    out["rec"] = rec[order]
    for name in SEG_DTYPE.names[1:]:
        out[name] = segs[name][order]
    return out


def _canonical_fds(fds, remap: np.ndarray) -> np.ndarray:
    fd_in = np.zeros(0, FD_DTYPE) if fds is None else np.asarray(fds)
    out = np.zeros(len(fd_in), FD_DTYPE)
    for name in FD_DTYPE.names:
        out[name] = fd_in[name]
    if len(out):
        out["rec"] = remap[out["rec"]]
        out = out[np.lexsort((out["fd"], out["family"]))]
    return out


def _row_order(ids: np.ndarray, paths) -> tuple:
    order = np.argsort(ids, kind="stable")
    remap = np.empty(len(ids), dtype=np.int64)
    remap[order] = np.arange(len(ids))
    return order, remap, _frozen(ids[order]), tuple(paths[i] for i in order)


class _AppendLog:
    """Append-only array buffer; a prefix view never changes once handed out."""

    def __init__(self, dtype):
        self._buf = np.zeros(1024, dtype)
        self.n = 0

    def extend(self, new: np.ndarray) -> None:
        need = self.n + len(new)
        if need > len(self._buf):
            grown = np.zeros(max(need, 2 * len(self._buf)), self._buf.dtype)
            grown[:self.n] = self._buf[:self.n]
            self._buf = grown
        self._buf[self.n:need] = new
        self.n = need

    def view(self) -> np.ndarray:
        v = self._buf[:self.n]
        v.flags.writeable = False
        return v


_CHUNK = 512


class _RowOrder:
    """Id order of the first ``n`` records of a native store (append order)."""

    __slots__ = ("n", "order", "remap", "ids", "_plist", "_paths")

    def __init__(self, native_ids: np.ndarray, plist: list, prev: _RowOrder | None = None):
        n = len(native_ids)
        if prev is not None and 0 < prev.n <= n:
            # records only append, so merge the new ids into the previous order
            fresh = np.argsort(native_ids[prev.n:], kind="stable") + prev.n
            pos = np.searchsorted(prev.ids, native_ids[fresh])
            order = np.insert(prev.order, pos, fresh)
        else:
            order = np.argsort(native_ids, kind="stable")
        self.n = n
        self.order = _frozen(order)
        remap = np.empty(n, dtype=np.int64)
        remap[order] = np.arange(n)
        self.remap = _frozen(remap)
        self.ids = _frozen(native_ids[order])
        self._plist = plist
        self._paths: tuple | None = None

    def paths(self) -> tuple:
        if self._paths is None:
            plist = self._plist
            self._paths = tuple(plist[i] for i in self.order.tolist())
        return self._paths

    def paths_of(self, rows) -> list[str]:
        plist = self._plist
        return [plist[i] for i in self.order[rows].tolist()]


class _NativeRows:
    """Record rows of a native snapshot as copy-on-write chunks in append order.

    Chunks untouched between two snapshots are the same objects, so a diff only
    has to look at chunks that differ.
    """

    __slots__ = ("lineage", "gen", "counters", "times", "truncated", "order")

    def __init__(self, lineage, gen, counters, times, truncated, order: _RowOrder):
        self.lineage = lineage
        self.gen = gen
        self.counters = counters
        self.times = times
        self.truncated = truncated
        self.order = order

    def dense(self, chunks, dtype, width=None) -> np.ndarray:
        if chunks:
            return _frozen(np.concatenate(chunks)[self.order.order])
        shape = (0,) if width is None else (0, width)
        return _frozen(np.zeros(shape, dtype))


class Snapshot:
    """Immutable point-in-time copy of every record in a store.

    Stored column-wise: row ``i`` holds record ``ids[i]`` (ascending),
    ``counters[i]`` its integer counters in :data:`COLUMNS` order and
    ``times[i]`` its timestamps.  ``segments`` and ``fds`` reference rows.
    """

    __slots__ = ("t_wall", "t_mono", "_ids", "_paths", "_counters", "_times", "_truncated",
                 "_segments", "fds", "dxt_enabled", "dxt_capacity", "_records", "_seg_bounds",
                 "_seg_origin", "_native")

    def __init__(self, t_wall, t_mono, ids, paths, counters, times, truncated,
                 segments, fds, dxt_enabled=True, dxt_capacity=DEFAULT_DXT_CAPACITY,
                 seg_origin=None, native: _NativeRows | None = None):
        self.t_wall = float(t_wall)
        self.t_mono = float(t_mono)
        # a native snapshot materialises its dense columns on first access
        self._native = native
        if native is not None:
            self._ids = native.order.ids
            self._paths = self._counters = self._times = self._truncated = None
        else:
            self._ids = _frozen(np.asarray(ids, dtype=np.uint64))
            self._paths = tuple(paths)
            n = len(self._paths)
            self._counters = _frozen(np.asarray(counters, dtype=np.int64).reshape(n, N_COUNTERS))
            self._times = _frozen(np.asarray(times, dtype=np.float64).reshape(n, len(TIME_FIELDS)))
            self._truncated = _frozen(np.asarray(truncated, dtype=bool).reshape(n))
        # with seg_origin = (log, raw, remap), segments are canonicalised on
        # first access from the store's append-only log
        self._seg_origin = seg_origin
        self._segments = None if segments is None else _frozen(np.asarray(segments, dtype=SEG_DTYPE))
        self.fds = _frozen(np.asarray(fds, dtype=FD_DTYPE))
        self.dxt_enabled = bool(dxt_enabled)
        self.dxt_capacity = int(dxt_capacity)
        self._records: _RecordView | None = None
        self._seg_bounds: np.ndarray | None = None

    @classmethod
    def build(cls, t_wall, t_mono, ids, paths, counters, times, truncated,
              segments=None, fds=None, **kw) -> Snapshot:
        """Canonicalise arbitrary row order: rows by id, segments by (row, seq)."""
        ids = np.asarray(ids, dtype=np.uint64)
        n = len(ids)
        order, remap, sorted_ids, sorted_paths = _row_order(ids, paths)
        counters = np.asarray(counters, dtype=np.int64).reshape(n, N_COUNTERS)[order]
        times = np.asarray(times, dtype=np.float64).reshape(n, len(TIME_FIELDS))[order]
        truncated = np.asarray(truncated, dtype=bool).reshape(n)[order]
        seg_origin = kw.pop("seg_origin", None)
        if seg_origin is not None:
            log, raw = seg_origin
            seg_origin, out_segs = (log, raw, remap), None
        else:
            out_segs = _canonical_segments(
                np.zeros(0, SEG_DTYPE) if segments is None else np.asarray(segments), remap)
        return cls(t_wall, t_mono, sorted_ids, sorted_paths, counters, times, truncated,
                   out_segs, _canonical_fds(fds, remap), seg_origin=seg_origin, **kw)

    @classmethod
    def _from_native(cls, t_wall, t_mono, rows: _NativeRows, fds, seg_origin, **kw) -> Snapshot:
        log, raw = seg_origin
        return cls(t_wall, t_mono, None, None, None, None, None, None,
                   _canonical_fds(fds, rows.order.remap), seg_origin=(log, raw, rows.order.remap),
                   native=rows, **kw)

    @classmethod
    def empty(cls, t_wall: float | None = None, t_mono: float | None = None, **kw) -> Snapshot:
        return cls(time.time() if t_wall is None else t_wall,
                   time.monotonic() if t_mono is None else t_mono,
                   np.zeros(0, np.uint64), (), np.zeros((0, N_COUNTERS), np.int64),
                   np.zeros((0, len(TIME_FIELDS))), np.zeros(0, bool),
                   np.zeros(0, SEG_DTYPE), np.zeros(0, FD_DTYPE), **kw)

    @classmethod
    def from_records(cls, records, t_wall: float, t_mono: float, **kw) -> Snapshot:
        records = list(records)
        ids = [r.record_id for r in records]
        segs = []
        fds = []
        for row, r in enumerate(records):
            for seq, s in enumerate(r.segments):
                segs.append((row, seq, 0 if s.kind == Kind.READ else 1,
                             s.offset, s.length, s.t_start, s.t_end))
            for fd, fam_off in sorted(r.open_fds.items()):
                family, offset = fam_off if isinstance(fam_off, tuple) else (Family.POSIX, fam_off)
                fds.append((fd, Family(family).code, row, offset))
        return cls.build(
            t_wall, t_mono, ids, [r.path for r in records],
            [r.counters.int_row() for r in records] or np.zeros((0, N_COUNTERS)),
            [r.counters.time_row() for r in records] or np.zeros((0, len(TIME_FIELDS))),
            [r.segments_truncated for r in records],
            np.array(segs, dtype=SEG_DTYPE), np.array(fds, dtype=FD_DTYPE), **kw)

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def paths(self) -> tuple:
        if self._paths is None:
            self._paths = self._native.order.paths()
        return self._paths

    @property
    def counters(self) -> np.ndarray:
        if self._counters is None:
            self._counters = self._native.dense(self._native.counters, np.int64, N_COUNTERS)
        return self._counters

    @property
    def times(self) -> np.ndarray:
        if self._times is None:
            self._times = self._native.dense(self._native.times, np.float64, len(TIME_FIELDS))
        return self._times

    @property
    def truncated(self) -> np.ndarray:
        if self._truncated is None:
            self._truncated = self._native.dense(self._native.truncated, bool)
        return self._truncated

    def paths_of(self, rows) -> list[str]:
        if self._paths is None:
            return self._native.order.paths_of(rows)
        return [self._paths[i] for i in np.asarray(rows, dtype=np.int64).tolist()]

    def rows_changed_since(self, earlier: Snapshot):
        """Rows that may differ from ``earlier``, if cheaply known.

        For two snapshots of the same native store returns ``(rows, counters,
        base, times, truncated)``: rows of this snapshot in id order, their
        counters, ``earlier``'s counters for the same records (zero when new),
        and their times and flags.  Every other row is unchanged.  Otherwise
        returns None.
        """
        a, b = earlier._native, self._native
        if a is None or b is None or a.lineage is not b.lineage or a.gen > b.gen:
            return None
        ks = [k for k, c in enumerate(b.counters) if k >= len(a.counters) or c is not a.counters[k]]
        if not ks:
            return (np.zeros(0, np.int64), np.zeros((0, N_COUNTERS), np.int64),
                    np.zeros((0, N_COUNTERS), np.int64), np.zeros((0, len(TIME_FIELDS))),
                    np.zeros(0, bool))
        native_rows = np.concatenate([np.arange(k * _CHUNK, k * _CHUNK + len(b.counters[k]))
                                      for k in ks])
        counters = np.concatenate([b.counters[k] for k in ks])
        base = np.zeros_like(counters)
        at = 0
        for k in ks:
            if k < len(a.counters):
                old = a.counters[k]
                base[at:at + len(old)] = old
            at += len(b.counters[k])
        times = np.concatenate([b.times[k] for k in ks])
        truncated = np.concatenate([b.truncated[k] for k in ks])
        rows = b.order.remap[native_rows]
        s = np.argsort(rows)
        return rows[s], counters[s], base[s], times[s], truncated[s]

    @property
    def segments(self) -> np.ndarray:
        if self._segments is None:
            _, raw, remap = self._seg_origin
            self._segments = _frozen(_canonical_segments(raw, remap))
        return self._segments

    def segments_since(self, earlier: Snapshot) -> np.ndarray | None:
        """Segments appended after ``earlier`` (rows of this snapshot), if cheaply known.

        Only snapshots taken from the same store log qualify; otherwise None.
        """
        a, b = earlier._seg_origin, self._seg_origin
        if a is None or b is None or a[0] is not b[0] or len(a[1]) > len(b[1]):
            return None
        return _canonical_segments(b[1][len(a[1]):], b[2])

    def __repr__(self) -> str:
        return (f"Snapshot(t_mono={self.t_mono:.6f}, records={len(self)}, "
                f"segments={len(self.segments)})")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (self.t_wall == other.t_wall and self.t_mono == other.t_mono
                and self.paths == other.paths
                and self.dxt_enabled == other.dxt_enabled
                and self.dxt_capacity == other.dxt_capacity
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.counters, other.counters)
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.truncated, other.truncated)
                and np.array_equal(self.segments, other.segments)
                and np.array_equal(self.fds, other.fds))

    __hash__ = None  # type: ignore[assignment]

    def row_of(self, record_id: int) -> int:
        i = int(np.searchsorted(self.ids, np.uint64(record_id)))
        if i < len(self.ids) and int(self.ids[i]) == record_id:
            return i
        raise KeyError(record_id)

    def segment_bounds(self) -> np.ndarray:
        """``bounds[i]:bounds[i+1]`` slices row ``i``'s segments."""
        if self._seg_bounds is None:
            self._seg_bounds = np.searchsorted(self.segments["rec"], np.arange(len(self) + 1))
        return self._seg_bounds

    def segment_counts(self) -> np.ndarray:
        return np.diff(self.segment_bounds())

    def record_at(self, row: int) -> FileRecord:
        b = self.segment_bounds()
        segs = tuple(
            DxtSegment(Kind.READ if s["kind"] == 0 else Kind.WRITE, int(s["offset"]),
                       int(s["length"]), float(s["t_start"]), float(s["t_end"]))
            for s in self.segments[b[row]:b[row + 1]])
        fd_rows = self.fds[self.fds["rec"] == row]
        open_fds = {int(f["fd"]): int(f["offset"]) for f in fd_rows}
        return FileRecord(int(self.ids[row]), self.paths[row],
                          CounterSet.from_row(self.counters[row], self.times[row]),
                          segs, open_fds, bool(self.truncated[row]))

    @property
    def records(self) -> Mapping[int, FileRecord]:
        if self._records is None:
            self._records = _RecordView(self)
        return self._records

    def find(self, path: str) -> FileRecord | None:
        canon = canonical_path(path)
        try:
            return self.record_at(self.paths.index(canon))
        except ValueError:
            return None

    def totals(self, rows=None) -> CounterSet:
        """Aggregate counters over all (or selected) rows."""
        c = self.counters if rows is None else self.counters[rows]
        ints = c.sum(axis=0) if len(c) else np.zeros(N_COUNTERS, np.int64)
        for col in NON_ADDITIVE:
            ints[col] = c[:, col].max() if len(c) else 0
        return CounterSet.from_row(ints, [0.0] * len(TIME_FIELDS))

    def rows_under(self, prefix: str | None) -> np.ndarray:
        if not prefix:
            return np.arange(len(self))
        prefix = canonical_path(prefix).rstrip("/") + "/"
        return np.array([i for i, p in enumerate(self.paths) if p.startswith(prefix)],
                        dtype=np.int64)


class _RecordView(Mapping):
    def __init__(self, snap: Snapshot):
        self._snap = snap
        self._cache: dict[int, FileRecord] = {}

    def __getitem__(self, record_id: int) -> FileRecord:
        rec = self._cache.get(record_id)
        if rec is None:
            rec = self._snap.record_at(self._snap.row_of(record_id))
            self._cache[record_id] = rec
        return rec

    def __iter__(self) -> Iterator[int]:
        return (int(i) for i in self._snap.ids)

    def __len__(self) -> int:
        return len(self._snap)


def _env_flag(name: str, default: bool) -> bool:
    v = os.environ.get(name)
    if v is None or v == "":
        return default
    return v.strip() not in ("0", "off", "false", "no")


def _env_int(name: str, default: int) -> int:
    v = os.environ.get(name)
    return int(v) if v else default


class _Rec:
    __slots__ = ("id", "path", "c", "t", "segs", "truncated")

    def __init__(self, rid: int, path: str):
        self.id = rid
        self.path = path
        self.c = [0] * N_COUNTERS
        self.t = [0.0] * len(TIME_FIELDS)
        self.segs: list[tuple] = []
        self.truncated = False


class _Fd:
    __slots__ = ("rec", "offset", "read_end", "write_end", "read_seen", "write_seen")

    def __init__(self, rec: _Rec):
        self.rec = rec
        self.offset = 0
        self.read_end = 0
        self.write_end = 0
        self.read_seen = False
        self.write_seen = False


class RecordStore:
    """Thread-safe in-process record store driven by explicit ``on_*`` calls."""

    def __init__(self, dxt_enabled: bool | None = None, dxt_capacity: int | None = None):
        self.dxt_enabled = _env_flag("IOTRACE_DXT", True) if dxt_enabled is None else dxt_enabled
        self.dxt_capacity = (_env_int("IOTRACE_DXT_CAPACITY", DEFAULT_DXT_CAPACITY)
                             if dxt_capacity is None else dxt_capacity)
        self._lock = threading.Lock()
        self._by_id: dict[int, _Rec] = {}
        self._by_path: dict[str, _Rec] = {}
        self._fds: tuple[dict[int, _Fd], dict[int, _Fd]] = ({}, {})

    def _record(self, canon: str) -> _Rec:
        rec = self._by_path.get(canon)
        if rec is None:
            rid = record_id_for(canon)
            while rid in self._by_id:
                rid = (rid + _ID_STEP) & _MASK64
            rec = self._by_id[rid] = self._by_path[canon] = _Rec(rid, canon)
        return rec

    def _fd_for_io(self, family: Family, fd: int) -> _Fd:
        table = self._fds[family.code]
        entry = table.get(fd)
        if entry is None:
            entry = table[fd] = _Fd(self._record(ANONYMOUS_PATH))
        return entry

    def on_open(self, path: str, fd: int, t: float, family: Family = Family.POSIX) -> int:
        if not path:
            raise ValueError("path must be nonempty")
        family = Family(family)
        canon = canonical_path(path)
        with self._lock:
            rec = self._record(canon)
            rec.c[COL["stdio_opens" if family is Family.STDIO else "opens"]] += 1
            if rec.t[0] == 0.0:
                rec.t[0] = t
            self._fds[family.code][fd] = _Fd(rec)
            return rec.id

    def on_close(self, fd: int, t: float = 0.0, family: Family = Family.POSIX) -> None:
        family = Family(family)
        with self._lock:
            if family is Family.POSIX:
                entry = self._fd_for_io(family, fd)
                entry.rec.c[COL["closes"]] += 1
            self._fds[family.code].pop(fd, None)

    def on_seek(self, fd: int, offset: int) -> None:
        with self._lock:
            self._fd_for_io(Family.POSIX, fd).offset = offset

    def on_read(self, fd: int, explicit_offset: int | None, length_returned: int,
                t0: float, t1: float, family: Family = Family.POSIX) -> None:
        self._account(Family(family), Kind.READ, fd, explicit_offset, length_returned, t0, t1)

    def on_write(self, fd: int, explicit_offset: int | None, length: int,
                 t0: float, t1: float, family: Family = Family.POSIX) -> None:
        self._account(Family(family), Kind.WRITE, fd, explicit_offset, length, t0, t1)

    def _account(self, family, kind, fd, explicit_offset, length, t0, t1) -> None:
        with self._lock:
            entry = self._fd_for_io(family, fd)
            rec = entry.rec
            c = rec.c
            if family is Family.STDIO:
                if kind is Kind.READ:
                    c[COL["stdio_reads"]] += 1
                else:
                    c[COL["stdio_writes"]] += 1
                    c[COL["stdio_bytes_written"]] += length
                return
            offset = entry.offset if explicit_offset is None else explicit_offset
            end = offset + length
            reading = kind is Kind.READ
            seen = entry.read_seen if reading else entry.write_seen
            prev_end = entry.read_end if reading else entry.write_end
            seq_col = COL["seq_reads" if reading else "seq_writes"]
            consec_col = COL["consec_reads" if reading else "consec_writes"]
            if not seen:
                c[seq_col] += 1
            elif length == 0:
                c[seq_col] += 1
                c[consec_col] += 1
            else:
                cls = classify_access(prev_end, offset)
                if cls is not AccessKind.RANDOM:
                    c[seq_col] += 1
                if cls is AccessKind.CONSECUTIVE:
                    c[consec_col] += 1
            if reading:
                entry.read_seen, entry.read_end = True, end
                c[COL["reads"]] += 1
                c[COL["bytes_read"]] += length
                if length == 0:
                    c[COL["zero_reads"]] += 1
                c[READ_HIST.start + bucket_for(length)] += 1
                c[COL["max_read_offset"]] = max(c[COL["max_read_offset"]], end)
                if rec.t[1] == 0.0:
                    rec.t[1] = t0
                rec.t[2] = t1
            else:
                entry.write_seen, entry.write_end = True, end
                c[COL["writes"]] += 1
                c[COL["bytes_written"]] += length
                c[WRITE_HIST.start + bucket_for(length)] += 1
                c[COL["max_write_offset"]] = max(c[COL["max_write_offset"]], end)
                if rec.t[3] == 0.0:
                    rec.t[3] = t0
                rec.t[4] = t1
            if explicit_offset is None:
                entry.offset = end
            if self.dxt_enabled:
                if len(rec.segs) < self.dxt_capacity:
                    rec.segs.append((0 if reading else 1, offset, length, t0, t1))
                else:
                    rec.truncated = True

    def snapshot(self) -> Snapshot:
        with self._lock:
            t_wall, t_mono = time.time(), time.monotonic()
            recs = list(self._by_id.values())
            row = {id(r): i for i, r in enumerate(recs)}
            segs = [(i, seq, *s) for i, r in enumerate(recs) for seq, s in enumerate(r.segs)]
            fds = [(fd, code, row[id(e.rec)], e.offset)
                   for code, table in enumerate(self._fds) for fd, e in table.items()]
            return Snapshot.build(
                t_wall, t_mono, [r.id for r in recs], [r.path for r in recs],
                np.array([r.c for r in recs], dtype=np.int64).reshape(len(recs), N_COUNTERS),
                np.array([r.t for r in recs], dtype=np.float64).reshape(len(recs), len(TIME_FIELDS)),
                [r.truncated for r in recs],
                np.array(segs, dtype=SEG_DTYPE), np.array(fds, dtype=FD_DTYPE),
                dxt_enabled=self.dxt_enabled, dxt_capacity=self.dxt_capacity)


class NativeStore:
    """The shim's in-library store.

    Counters are updated in C by the interposed wrappers; this class mirrors
    the store incrementally so a snapshot copies only records changed since
    the previous one, and its cost does not grow with idle records.
    """

    def __init__(self, dxt_enabled: bool | None = None, dxt_capacity: int | None = None):
        from . import native

        self._lib = native.load("shim")
        names = self._lib.iotrace_counter_names().decode().split(",")
        expected = [c.split("[")[0] for c in COLUMNS]
        if names != expected:
            raise RuntimeError("native counter layout does not match the Python layout")
        if dxt_enabled is not None or dxt_capacity is not None:
            cap = ctypes.c_int64()
            cur = bool(self._lib.iotrace_get_dxt(ctypes.byref(cap)))
            self._lib.iotrace_set_dxt(int(cur if dxt_enabled is None else dxt_enabled),
                                      -1 if dxt_capacity is None else int(dxt_capacity))
        self._lock = threading.Lock()
        self._reset(0)

    def _reset(self, epoch: int) -> None:
        # mirrors of the native store: everything appends except counter rows,
        # which live in copy-on-write chunks patched with the rows that changed
        self._epoch = epoch
        self._gen = 0
        self._lineage = object()
        self._paths: list[str] = []
        self._ids = _AppendLog(np.uint64)
        self._segs = _AppendLog(_NATIVE_SEG_DTYPE)
        self._chunks: tuple[list, list, list] = ([], [], [])
        self._order: _RowOrder | None = None

    def _patch(self, n: int, dirty: np.ndarray, counters, times, truncated) -> None:
        """Copy the chunks holding ``dirty`` rows and write the new values in."""
        nt = len(TIME_FIELDS)
        cc, ct, ctr = self._chunks
        for k in np.unique(dirty // _CHUNK).tolist():
            lo = k * _CHUNK
            size = min(_CHUNK, n - lo)
            i0, i1 = np.searchsorted(dirty, (lo, lo + size))
            rows = dirty[i0:i1] - lo
            for chunks, width, dtype, new in ((cc, N_COUNTERS, np.int64, counters),
                                              (ct, nt, np.float64, times),
                                              (ctr, None, bool, truncated)):
                chunk = np.zeros((size,) if width is None else (size, width), dtype)
                if k < len(chunks):
                    chunk[:len(chunks[k])] = chunks[k]
                chunk[rows] = new[i0:i1]
                if k < len(chunks):
                    chunks[k] = _frozen(chunk)
                else:
                    chunks.append(_frozen(chunk))

    @property
    def lib(self):
        return self._lib

    @property
    def dxt_enabled(self) -> bool:
        return bool(self._lib.iotrace_get_dxt(None))

    def now(self) -> float:
        return self._lib.iotrace_now()

    def on_open(self, path: str, fd: int, t: float, family: Family = Family.POSIX) -> int:
        if not path:
            raise ValueError("path must be nonempty")
        self._lib.iotrace_on_open(os.fsencode(path), fd, t, Family(family).code)
        return record_id_for(canonical_path(path))

    def on_close(self, fd: int, t: float = 0.0, family: Family = Family.POSIX) -> None:
        self._lib.iotrace_on_close(fd, t, Family(family).code)

    def on_seek(self, fd: int, offset: int) -> None:
        self._lib.iotrace_on_seek(fd, offset)

    def on_read(self, fd, explicit_offset, length_returned, t0, t1, family=Family.POSIX):
        self._lib.iotrace_on_read(fd, explicit_offset is not None, explicit_offset or 0,
                                  length_returned, t0, t1, Family(family).code)

    def on_write(self, fd, explicit_offset, length, t0, t1, family=Family.POSIX):
        self._lib.iotrace_on_write(fd, explicit_offset is not None, explicit_offset or 0,
                                   length, t0, t1, Family(family).code)

    def snapshot(self) -> Snapshot:
        from .native import SnapshotStruct

        with self._lock:
            raw = SnapshotStruct()
            rc = self._lib.iotrace_snapshot(self._segs.n, len(self._paths), self._gen,
                                            self._epoch, ctypes.byref(raw))
            try:
                if rc != 0:
                    raise MemoryError("native snapshot failed")
                if (raw.epoch != self._epoch or raw.paths_from != len(self._paths)
                        or raw.seg_from != self._segs.n):
                    self._reset(raw.epoch)
                n = raw.n_records
                if raw.paths_len:
                    blob = ctypes.string_at(raw.paths, raw.paths_len)
                    self._paths.extend(os.fsdecode(p) for p in blob.split(b"\0")[:-1])
                if n > raw.paths_from:
                    self._ids.extend(np.ctypeslib.as_array(raw.ids, (n - raw.paths_from,)))
                nd = raw.n_dirty
                if nd:
                    nt = len(TIME_FIELDS)
                    self._patch(
                        n, np.ctypeslib.as_array(raw.dirty, (nd,)),
                        np.ctypeslib.as_array(raw.counters, (nd * N_COUNTERS,)).reshape(nd, N_COUNTERS),
                        np.ctypeslib.as_array(raw.times, (nd * nt,)).reshape(nd, nt),
                        np.ctypeslib.as_array(raw.truncated, (nd,)) != 0)
                if raw.n_segs_out:
                    nbytes = raw.n_segs_out * _NATIVE_SEG_DTYPE.itemsize
                    self._segs.extend(np.frombuffer(ctypes.string_at(raw.segs, nbytes),
                                                    _NATIVE_SEG_DTYPE))
                fds = np.zeros(0, _NATIVE_FD_DTYPE)
                if raw.n_fds:
                    nbytes = raw.n_fds * _NATIVE_FD_DTYPE.itemsize
                    fds = np.frombuffer(ctypes.string_at(raw.fds, nbytes), _NATIVE_FD_DTYPE)
                self._gen = raw.gen
                t_wall, t_mono = raw.t_wall, raw.t_mono
                dxt_enabled, dxt_capacity = bool(raw.dxt_enabled), raw.dxt_capacity
            finally:
                self._lib.iotrace_snapshot_release(ctypes.byref(raw))
            if self._order is None or self._order.n != n:
                self._order = _RowOrder(self._ids.view(), self._paths, self._order)
            cc, ct, ctr = self._chunks
            rows = _NativeRows(self._lineage, self._gen, tuple(cc), tuple(ct), tuple(ctr),
                               self._order)
            return Snapshot._from_native(t_wall, t_mono, rows, fds,
                                         (self._segs, self._segs.view()),
                                         dxt_enabled=dxt_enabled, dxt_capacity=dxt_capacity)


_native_store: NativeStore | None = None
_native_lock = threading.Lock()


def native_store() -> NativeStore:
    """Process-wide handle on the shim's store."""
    global _native_store
    with _native_lock:
        if _native_store is None:
            _native_store = NativeStore()
        return _native_store


def snapshot(store) -> Snapshot:
    return store.snapshot()
