"""Runtime-attachable I/O profiler and tracer with per-file counters."""

from .analysis import (
    Manifest, ReportBundle, StagingPlan, build_report, file_size_distribution, op_count_summary,
    pattern_summary, read_size_distribution, staging_advise, zero_read_diagnostic,
)
from .collector import (
    CounterSet, DxtSegment, FileRecord, Family, NativeStore, RecordStore, Snapshot, bucket_for,
    classify_access, native_store,
)
from .export import export_report, export_trace_events, load_log, write_log
from .interpose import CATALOG, Mode, SymbolTarget, attach, detach, preload_init, scan_relocations
from .session import (
    ProfilingSession, ProfilingWindow, WindowStats, diff, periodic_windows, start_profiling,
    stop_profiling, window_bandwidth,
)

__version__ = "0.1.0"

__all__ = [
    "CATALOG", "CounterSet", "DxtSegment", "Family", "FileRecord", "Manifest", "Mode",
    "NativeStore", "ProfilingSession", "ProfilingWindow", "RecordStore", "ReportBundle",
    "Snapshot", "StagingPlan", "SymbolTarget", "WindowStats", "attach", "bucket_for",
    "build_report", "classify_access", "detach", "diff", "export_report", "export_trace_events",
    "file_size_distribution", "load_log", "native_store", "op_count_summary", "pattern_summary",
    "periodic_windows", "preload_init", "read_size_distribution", "scan_relocations",
    "staging_advise", "start_profiling", "stop_profiling", "window_bandwidth", "write_log",
    "zero_read_diagnostic",
]
