"""Characterisation of windows and datasets.

Everything here is a pure function of immutable inputs (window stats,
snapshots, manifests), so results can be recomputed from a saved log.
"""

from __future__ import annotations

import csv
import enum
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .collector import (
    ANONYMOUS_PATH, BUCKET_LABELS, COL, N_BUCKETS, READ_HIST, WRITE_HIST, Snapshot, bucket_for,
    canonical_path,
)
from .session import WindowStats

REPORT_SCHEMA = "iotrace-report"
REPORT_VERSION = 1
MB = 1e6
TRAILING_EOF_TOLERANCE = 0.05


class AnalysisError(ValueError):
    pass


class EmptyWindow(AnalysisError):
    pass


class EmptyManifest(AnalysisError):
    pass


class SizeUnknown(AnalysisError):
    def __init__(self, paths: Sequence[str]):
        super().__init__(f"{len(paths)} file(s) without a known size")
        self.paths = tuple(paths)


@dataclass(frozen=True)
class OpCountSummary:
    opens: int = 0
    closes: int = 0
    reads: int = 0
    writes: int = 0
    stdio_writes: int = 0
    reads_per_open: float = 0.0


def op_count_summary(w: WindowStats) -> OpCountSummary:
    opens, reads = w.total("opens"), w.total("reads")
    return OpCountSummary(opens, w.total("closes"), reads, w.total("writes"),
                          w.total("stdio_writes"), reads / opens if opens else 0.0)


@dataclass(frozen=True)
class SizeDistribution:
    buckets: tuple[int, ...] = (0,) * N_BUCKETS
    total: int = 0

    def __post_init__(self):
        if len(self.buckets) != N_BUCKETS:
            raise ValueError(f"expected {N_BUCKETS} buckets")
        if sum(self.buckets) != self.total:
            raise ValueError("bucket counts do not sum to total")

    @classmethod
    def from_counts(cls, counts) -> SizeDistribution:
        counts = tuple(int(c) for c in counts)
        return cls(counts, sum(counts))

    @classmethod
    def from_sizes(cls, sizes: Iterable[int]) -> SizeDistribution:
        counts = [0] * N_BUCKETS
        for s in sizes:
            counts[bucket_for(int(s))] += 1
        return cls.from_counts(counts)

    def fractions(self) -> tuple[float, ...]:
        return tuple(c / self.total if self.total else 0.0 for c in self.buckets)

    @property
    def modal_bucket(self) -> int:
        return int(np.argmax(self.buckets))

    @property
    def median_bucket(self) -> int:
        if not self.total:
            return 0
        cum = np.cumsum(self.buckets)
        return int(np.searchsorted(cum, (self.total + 1) // 2))

    def label(self, i: int) -> str:
        return BUCKET_LABELS[i]


def read_size_distribution(w: WindowStats) -> SizeDistribution:
    return SizeDistribution.from_counts(w.deltas[:, READ_HIST].sum(axis=0))


def write_size_distribution(w: WindowStats) -> SizeDistribution:
    return SizeDistribution.from_counts(w.deltas[:, WRITE_HIST].sum(axis=0))


@dataclass(frozen=True)
class Manifest:
    """Dataset file list with nominal sizes.

    ``disk_sizes`` differ from ``sizes`` when a dataset is materialised
    scaled down: the manifest keeps the sizes the analysis should reason about.
    """

    paths: tuple[str, ...]
    sizes: tuple[int, ...]
    disk_sizes: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.paths) != len(self.sizes):
            raise ValueError("paths and sizes differ in length")
        if self.disk_sizes is not None and len(self.disk_sizes) != len(self.sizes):
            raise ValueError("disk_sizes and sizes differ in length")

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def total_bytes(self) -> int:
        return int(sum(self.sizes))

    def size_map(self) -> dict[str, int]:
        return {canonical_path(p): s for p, s in zip(self.paths, self.sizes)}

    def save(self, path: str | os.PathLike) -> None:
        base = os.path.dirname(os.path.abspath(path))
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["path", "size", "disk_size"])
            disk = self.disk_sizes or self.sizes
            for p, s, d in zip(self.paths, self.sizes, disk):
                rel = os.path.relpath(p, base) if os.path.isabs(p) else p
                out.writerow([rel if not rel.startswith("..") else p, s, d])

    @classmethod
    def load(cls, path: str | os.PathLike) -> Manifest:
        base = os.path.dirname(os.path.abspath(path))
        paths, sizes, disk = [], [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or "path" not in reader.fieldnames or "size" not in reader.fieldnames:
                raise AnalysisError(f"{path}: manifest needs 'path' and 'size' columns")
            for row in reader:
                paths.append(os.path.normpath(os.path.join(base, row["path"])))
                sizes.append(int(row["size"]))
                disk.append(int(row.get("disk_size") or row["size"]))
        return cls(tuple(paths), tuple(sizes), tuple(disk))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, int]]) -> Manifest:
        pairs = list(pairs)
        return cls(tuple(p for p, _ in pairs), tuple(int(s) for _, s in pairs))


@dataclass(frozen=True)
class FileSizeReport:
    distribution: SizeDistribution
    unknown: tuple[str, ...] = ()
    sizes: Mapping[str, int] = field(default_factory=dict)


def _observed_sizes(paths, counters) -> tuple[dict[str, int], list[str]]:
    """Sizes implied by observed I/O.

    A file's size is known when a read hit end-of-file (a zero-length read
    follows the last byte) or when it was written; otherwise it is unknown.
    """
    known: dict[str, int] = {}
    unknown: list[str] = []
    for path, row in zip(paths, counters):
        if path == ANONYMOUS_PATH:
            continue
        if row[COL["zero_reads"]] > 0 or row[COL["writes"]] > 0:
            known[path] = int(max(row[COL["max_read_offset"]], row[COL["max_write_offset"]]))
        else:
            unknown.append(path)
    return known, unknown


def file_size_distribution(source, manifest: Manifest | None = None,
                           strict: bool = False) -> FileSizeReport:
    """Bucketed file sizes: manifest first, then observed end offsets.

    ``source`` is a :class:`Manifest`, a window, a snapshot, or a mapping of
    path to size.  Files whose size cannot be inferred are listed in
    ``unknown`` (or raise :class:`SizeUnknown` with ``strict``).
    """
    if isinstance(source, Manifest):
        sizes = source.size_map()
        return FileSizeReport(SizeDistribution.from_sizes(sizes.values()), (), sizes)
    if isinstance(source, Mapping):
        sizes = {canonical_path(p): int(s) for p, s in source.items()}
        return FileSizeReport(SizeDistribution.from_sizes(sizes.values()), (), sizes)
    if isinstance(source, WindowStats):
        paths, counters = source.paths, source.deltas
    elif isinstance(source, Snapshot):
        paths, counters = source.paths, source.counters
    else:
        raise TypeError(f"cannot infer file sizes from {type(source).__name__}")
    observed, unknown = _observed_sizes(paths, counters)
    listed = manifest.size_map() if manifest is not None else {}
    sizes: dict[str, int] = {}
    missing = []
    for p in paths:
        if p == ANONYMOUS_PATH:
            continue
        if p in listed:
            sizes[p] = listed[p]
        elif p in observed:
            sizes[p] = observed[p]
        else:
            missing.append(p)
    if strict and missing:
        raise SizeUnknown(missing)
    return FileSizeReport(SizeDistribution.from_sizes(sizes.values()), tuple(missing), sizes)


@dataclass(frozen=True)
class AccessPatternSummary:
    reads: int
    zero_reads: int
    seq_reads: int
    consec_reads: int
    frac_sequential: float
    frac_consecutive: float
    frac_random: float
    frac_zero: float


def pattern_summary(w: WindowStats) -> AccessPatternSummary:
    reads = w.total("reads")
    if reads <= 0:
        raise EmptyWindow("no reads in window")
    zero, seq, consec = w.total("zero_reads"), w.total("seq_reads"), w.total("consec_reads")
    return AccessPatternSummary(reads, zero, seq, consec, seq / reads, consec / reads,
                                (reads - seq) / reads, zero / reads)


class Finding(str, enum.Enum):
    TRAILING_EOF_READS = "TRAILING_EOF_READS"
    NONE = "NONE"


@dataclass(frozen=True)
class ZeroReadDiagnostic:
    zero_read_count: int
    affected_file_count: int
    finding: Finding


def zero_read_diagnostic(w: WindowStats, tolerance: float = TRAILING_EOF_TOLERANCE) -> ZeroReadDiagnostic:
    zero = w.deltas[:, COL["zero_reads"]]
    opens = w.total("opens")
    n_zero = int(zero.sum())
    affected = int((zero > 0).sum())
    finding = Finding.NONE
    if opens and n_zero and abs(n_zero - opens) / opens <= tolerance:
        finding = Finding.TRAILING_EOF_READS
    return ZeroReadDiagnostic(n_zero, affected, finding)


@dataclass(frozen=True)
class StagingPlan:
    threshold: int
    files: tuple[tuple[str, int], ...]
    staged_bytes: int
    staged_file_count: int
    frac_bytes: float
    frac_files: float
    capacity: int | None = None
    total_bytes: int = 0
    total_files: int = 0

    def move_list(self, destination: str) -> list[tuple[str, str]]:
        """(source, target) pairs placing each staged file under ``destination``."""
        common = os.path.commonpath([p for p, _ in self.files]) if len(self.files) > 1 else None
        out = []
        for p, _ in self.files:
            rel = os.path.relpath(p, common) if common else os.path.basename(p)
            out.append((p, os.path.join(destination, rel)))
        return out


def staging_advise(manifest: Manifest | Iterable[tuple[str, int]], threshold: int,
                   capacity: int | None = None) -> StagingPlan:
    """Files of size <= threshold, smallest first (ties by path) within capacity."""
    if not isinstance(manifest, Manifest):
        manifest = Manifest.from_pairs(manifest)
    if len(manifest) == 0:
        raise EmptyManifest("manifest has no files")
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    if capacity is not None and capacity < 0:
        raise ValueError("capacity must be >= 0")
    total = manifest.total_bytes
    chosen: list[tuple[str, int]] = []
    if threshold > 0:
        eligible = sorted((s, p) for p, s in zip(manifest.paths, manifest.sizes) if s <= threshold)
        used = 0
        for s, p in eligible:
            if capacity is not None and used + s > capacity:
                break
            used += s
            chosen.append((p, s))
    staged = sum(s for _, s in chosen)
    return StagingPlan(int(threshold), tuple(chosen), staged, len(chosen),
                       staged / total if total else 0.0, len(chosen) / len(manifest),
                       capacity, total, len(manifest))


def bandwidth_series(windows: Sequence[WindowStats]) -> list[tuple[int, float]]:
    """(window_id, read MB/s) per window."""
    return [(w.window_id, w.bytes_read_delta / w.elapsed / MB) for w in windows]


@dataclass
class ReportBundle:
    window: dict
    op_counts: OpCountSummary
    read_sizes: SizeDistribution
    write_sizes: SizeDistribution
    file_sizes: SizeDistribution
    unknown_sizes: int
    pattern: AccessPatternSummary | None
    zero_reads: ZeroReadDiagnostic
    per_file: list[dict]
    residual: dict
    series: list[tuple[int, float]]
    staging: StagingPlan | None = None

    def to_dict(self) -> dict:
        d = {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "window": dict(self.window),
            "op_counts": asdict(self.op_counts),
            "read_sizes": {"buckets": list(self.read_sizes.buckets), "total": self.read_sizes.total},
            "write_sizes": {"buckets": list(self.write_sizes.buckets), "total": self.write_sizes.total},
            "file_sizes": {"buckets": list(self.file_sizes.buckets), "total": self.file_sizes.total,
                           "unknown": self.unknown_sizes},
            "pattern": asdict(self.pattern) if self.pattern else None,
            "zero_reads": {**asdict(self.zero_reads), "finding": self.zero_reads.finding.value},
            "per_file": [dict(r) for r in self.per_file],
            "residual": dict(self.residual),
            "bandwidth_series": [[i, v] for i, v in self.series],
            "staging": None,
        }
        if self.staging is not None:
            s = self.staging
            d["staging"] = {
                "threshold": s.threshold, "capacity": s.capacity,
                "staged_bytes": s.staged_bytes, "staged_file_count": s.staged_file_count,
                "frac_bytes": s.frac_bytes, "frac_files": s.frac_files,
                "total_bytes": s.total_bytes, "total_files": s.total_files,
                "files": [[p, n] for p, n in s.files],
            }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ReportBundle:
        if d.get("schema") != REPORT_SCHEMA or d.get("version") != REPORT_VERSION:
            raise AnalysisError(f"unsupported report schema {d.get('schema')!r} v{d.get('version')!r}")
        staging = None
        if d.get("staging"):
            s = d["staging"]
            staging = StagingPlan(s["threshold"], tuple((p, n) for p, n in s["files"]),
                                  s["staged_bytes"], s["staged_file_count"], s["frac_bytes"],
                                  s["frac_files"], s["capacity"], s["total_bytes"], s["total_files"])
        zr = d["zero_reads"]
        return cls(
            window=dict(d["window"]),
            op_counts=OpCountSummary(**d["op_counts"]),
            read_sizes=SizeDistribution(tuple(d["read_sizes"]["buckets"]), d["read_sizes"]["total"]),
            write_sizes=SizeDistribution(tuple(d["write_sizes"]["buckets"]), d["write_sizes"]["total"]),
            file_sizes=SizeDistribution(tuple(d["file_sizes"]["buckets"]), d["file_sizes"]["total"]),
            unknown_sizes=d["file_sizes"]["unknown"],
            pattern=AccessPatternSummary(**d["pattern"]) if d.get("pattern") else None,
            zero_reads=ZeroReadDiagnostic(zr["zero_read_count"], zr["affected_file_count"],
                                          Finding(zr["finding"])),
            per_file=[dict(r) for r in d["per_file"]],
            residual=dict(d["residual"]),
            series=[(int(i), float(v)) for i, v in d["bandwidth_series"]],
            staging=staging,
        )


_TABLE_COLS = ("opens", "reads", "writes", "bytes_read", "bytes_written")


def build_report(w: WindowStats, windows: Sequence[WindowStats] | None = None,
                 manifest: Manifest | None = None, top_n: int = 20,
                 staging_threshold: int | None = None, capacity: int | None = None) -> ReportBundle:
    elapsed = w.elapsed
    window = {
        "window_id": w.window_id,
        "t_wall_start": w.t_wall_start,
        "elapsed": elapsed,
        "files": len(w),
        "bytes_read": w.bytes_read_delta,
        "bytes_written": w.bytes_written_delta,
        "bandwidth_read": w.bytes_read_delta / elapsed if elapsed > 0 else 0.0,
        "bandwidth_write": w.bytes_written_delta / elapsed if elapsed > 0 else 0.0,
    }
    try:
        pattern = pattern_summary(w)
    except EmptyWindow:
        pattern = None
    sizes = file_size_distribution(w, manifest)
    order = sorted(range(len(w)), key=lambda i: (-int(w.deltas[i, COL["bytes_read"]]
                                                     + -int(w.deltas[i, COL["bytes_written"]])),
                                                 int(w.ids[i])))
    top = order[:max(top_n, 0)]
    per_file = [{"record_id": int(w.ids[i]), "path": w.paths[i],
                 **{c: int(w.deltas[i, COL[c]]) for c in _TABLE_COLS}} for i in top]
    rest = order[len(top):]
    residual = {"files": len(rest), **{c: int(w.deltas[rest, COL[c]].sum()) if rest else 0
                                       for c in _TABLE_COLS}}
    staging = None
    if staging_threshold is not None and manifest is not None and len(manifest):
        staging = staging_advise(manifest, staging_threshold, capacity)
    series = bandwidth_series(windows) if windows else []
    return ReportBundle(window, op_count_summary(w), read_size_distribution(w),
                        write_size_distribution(w), sizes.distribution, len(sizes.unknown),
                        pattern, zero_read_diagnostic(w), per_file, residual, series, staging)
