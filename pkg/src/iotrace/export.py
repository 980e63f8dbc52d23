"""Serialisation: trace-event JSON, text/JSON reports and the profiler log.

The profiler log is newline-delimited JSON::

    {"format":"iotrace-log","version":1,...}        header
    {"type":"record",...}                            one per file record
    {"type":"segment",...}                           one per traced operation
    {"type":"end","records":N,"segments":M}          completeness marker

The native shim writes the same layout at process exit in preload mode.
"""

from __future__ import annotations

import enum
import json
import os
import socket
from collections.abc import Iterable, Sequence

import numpy as np

from .analysis import ReportBundle
from .collector import (
    BUCKET_LABELS, COL, FD_DTYPE, N_BUCKETS, N_COUNTERS, NON_ADDITIVE, READ_HIST, SCALAR_COUNTERS,
    SEG_DTYPE, STDIO_COUNTERS, TIME_FIELDS, WRITE_HIST, Family, Snapshot,
)
from .session import WindowStats

LOG_FORMAT = "iotrace-log"
LOG_VERSION = 1
_COMPACT = (",", ":")


class ExportError(Exception):
    pass


class NoSegments(ExportError):
    pass


class IoFailure(ExportError):
    pass


class MalformedLog(ExportError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class VersionMismatch(ExportError):
    pass


class ReportFormat(str, enum.Enum):
    TEXT = "text"
    JSON = "json"


# ---- trace events ----

def export_trace_events(w: WindowStats, pid: int | None = None,
                        max_lanes: int | None = None) -> list[dict]:
    """Complete ("X") events for every segment recorded within the window.

    One lane (tid) per file, numbered densely in order of each file's first
    segment.  ``max_lanes`` keeps only the files that moved the most bytes.
    """
    if not w.dxt_enabled:
        raise NoSegments("operation tracing was disabled for this window")
    pid = os.getpid() if pid is None else pid
    segs = w.segments
    rows = np.unique(segs["rec"]) if len(segs) else np.zeros(0, np.int64)
    if max_lanes is not None and len(rows) > max_lanes:
        moved = (w.deltas[rows, COL["bytes_read"]] + w.deltas[rows, COL["bytes_written"]])
        keep = sorted(rows[np.lexsort((w.ids[rows], -moved))][:max(max_lanes, 0)].tolist())
        segs = segs[np.isin(segs["rec"], keep)]
        rows = np.asarray(keep, dtype=np.int64)
    first = np.full(len(w), np.inf)
    if len(segs):
        np.minimum.at(first, segs["rec"], segs["t_start"])
    by_first = sorted(rows.tolist(), key=lambda r: (first[r], int(w.ids[r])))
    lanes = {r: i for i, r in enumerate(by_first)}

    order = np.lexsort((segs["seq"], segs["t_start"], w.ids[segs["rec"]] if len(segs) else segs["rec"]))
    segs = segs[order]
    ts = np.maximum((segs["t_start"] - w.t_start) * 1e6, 0.0).tolist()
    dur = np.maximum((segs["t_end"] - segs["t_start"]) * 1e6, 0.0).tolist()
    events = []
    for row, kind, off, length, t, d in zip(segs["rec"].tolist(), segs["kind"].tolist(),
                                            segs["offset"].tolist(), segs["length"].tolist(),
                                            ts, dur):
        name = "READ" if kind == 0 else "WRITE"
        events.append({
            "name": name.lower(), "cat": "io", "ph": "X", "ts": t, "dur": d,
            "pid": pid, "tid": lanes[row],
            "args": {"path": w.paths[row], "offset": off, "length": length, "kind": name},
        })
    return events


def write_trace(events: Sequence[dict], path: str | os.PathLike) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(list(events), fh, separators=_COMPACT)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def validate_trace(doc) -> None:
    """Check the trace-event JSON array format for complete events."""
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    if not isinstance(doc, list):
        raise ValueError("trace must be a JSON array")
    for i, e in enumerate(doc):
        if not isinstance(e, dict):
            raise ValueError(f"event {i} is not an object")
        for key in ("name", "ph", "ts", "pid", "tid"):
            if key not in e:
                raise ValueError(f"event {i} lacks {key!r}")
        if e["ph"] == "X":
            if not isinstance(e.get("dur"), (int, float)) or e["dur"] < 0:
                raise ValueError(f"event {i}: complete events need dur >= 0")
        if not isinstance(e["ts"], (int, float)) or e["ts"] < 0:
            raise ValueError(f"event {i}: ts must be a non-negative number")


# ---- reports ----

def export_report(bundle: ReportBundle | dict, fmt: ReportFormat | str = ReportFormat.TEXT) -> str:
    d = bundle.to_dict() if isinstance(bundle, ReportBundle) else bundle
    fmt = ReportFormat(fmt)
    if fmt is ReportFormat.JSON:
        return json.dumps(d, indent=2) + "\n"
    return render_text(d)


def _dist_lines(title: str, dist: dict) -> list[str]:
    total = dist["total"]
    lines = [f"{title} (total {total})"]
    width = max(len(lab) for lab in BUCKET_LABELS)
    for lab, c in zip(BUCKET_LABELS, dist["buckets"]):
        frac = c / total if total else 0.0
        bar = "#" * round(frac * 40)
        lines.append(f"  {lab:>{width}}  {c:>10}  {frac:6.1%}  {bar}".rstrip())
    return lines


def render_text(d: dict) -> str:
    """Plain-text report rendered from the JSON form, so both stay in sync."""
    w = d["window"]
    ops = d["op_counts"]
    out = [
        f"iotrace report (window {w['window_id']})",
        "",
        "Bandwidth",
        f"  elapsed          {w['elapsed']:.6f} s",
        f"  bytes read       {w['bytes_read']}",
        f"  bytes written    {w['bytes_written']}",
        f"  read bandwidth   {w['bandwidth_read'] / 1e6:.3f} MB/s",
        f"  write bandwidth  {w['bandwidth_write'] / 1e6:.3f} MB/s",
        f"  files touched    {w['files']}",
        "",
        "Operations",
        f"  opens            {ops['opens']}",
        f"  closes           {ops['closes']}",
        f"  reads            {ops['reads']}",
        f"  writes           {ops['writes']}",
        f"  stdio writes     {ops['stdio_writes']}",
        f"  reads per open   {ops['reads_per_open']:.3f}",
        "",
    ]
    out += _dist_lines("Read sizes", d["read_sizes"]) + [""]
    out += _dist_lines("File sizes", d["file_sizes"])
    if d["file_sizes"]["unknown"]:
        out.append(f"  ({d['file_sizes']['unknown']} file(s) of unknown size)")
    out.append("")
    p = d["pattern"]
    out.append("Access pattern")
    if p:
        out += [
            f"  sequential       {p['frac_sequential']:.3f}",
            f"  consecutive      {p['frac_consecutive']:.3f}",
            f"  random           {p['frac_random']:.3f}",
            f"  zero-length      {p['frac_zero']:.3f}",
        ]
    else:
        out.append("  no reads")
    z = d["zero_reads"]
    out += ["", "Zero-length reads",
            f"  count            {z['zero_read_count']}",
            f"  files affected   {z['affected_file_count']}",
            f"  finding          {z['finding']}"]
    if z["finding"] == "TRAILING_EOF_READS":
        out.append("  every file read ends with a read returning 0 bytes; "
                   "reading to the known size avoids one call per file")
    if d["bandwidth_series"]:
        out += ["", "Bandwidth series (MB/s)"]
        out += [f"  window {i:>6}  {v:12.3f}" for i, v in d["bandwidth_series"]]
    out += ["", "Top files by bytes",
            f"  {'bytes_read':>14} {'bytes_written':>14} {'reads':>8} {'writes':>8} {'opens':>6}  path"]
    for r in d["per_file"]:
        out.append(f"  {r['bytes_read']:>14} {r['bytes_written']:>14} {r['reads']:>8} "
                   f"{r['writes']:>8} {r['opens']:>6}  {r['path']}")
    res = d["residual"]
    if res["files"]:
        out.append(f"  {res['bytes_read']:>14} {res['bytes_written']:>14} {res['reads']:>8} "
                   f"{res['writes']:>8} {res['opens']:>6}  ({res['files']} other files)")
    s = d.get("staging")
    if s:
        cap = "none" if s["capacity"] is None else str(s["capacity"])
        out += ["", "Staging plan",
                f"  threshold        {s['threshold']} B",
                f"  capacity         {cap}",
                f"  files staged     {s['staged_file_count']} of {s['total_files']} ({s['frac_files']:.1%})",
                f"  bytes staged     {s['staged_bytes']} of {s['total_bytes']} ({s['frac_bytes']:.1%})"]
    return "\n".join(out) + "\n"


# ---- profiler log ----

def _record_line(snap: Snapshot, row: int, fds_by_row: dict[int, list]) -> dict:
    c = snap.counters[row]
    counters: dict = {name: int(c[COL[name]]) for name in SCALAR_COUNTERS}
    counters["read_size_hist"] = [int(v) for v in c[READ_HIST]]
    counters["write_size_hist"] = [int(v) for v in c[WRITE_HIST]]
    for name in STDIO_COUNTERS:
        counters[name] = int(c[COL[name]])
    for name, t in zip(TIME_FIELDS, snap.times[row]):
        counters[name] = float(t)
    return {"type": "record", "record_id": int(snap.ids[row]), "path": snap.paths[row],
            "counters": counters, "truncated": bool(snap.truncated[row]),
            "open_fds": fds_by_row.get(row, [])}


def iter_log_lines(snap: Snapshot, hostname: str | None = None, pid: int | None = None,
                   extra: dict | None = None):
    head = {"format": LOG_FORMAT, "version": LOG_VERSION,
            "hostname": socket.gethostname() if hostname is None else hostname,
            "pid": os.getpid() if pid is None else pid, "t_wall": snap.t_wall,
            "t_mono": snap.t_mono, "dxt_enabled": snap.dxt_enabled,
            "dxt_capacity": snap.dxt_capacity}
    if extra:
        head.update({k: v for k, v in extra.items() if k not in head})
    yield head
    fds_by_row: dict[int, list] = {}
    for f in snap.fds:
        fam = Family.POSIX.value if f["family"] == 0 else Family.STDIO.value
        fds_by_row.setdefault(int(f["rec"]), []).append([int(f["fd"]), fam, int(f["offset"])])
    for row in range(len(snap)):
        yield _record_line(snap, row, fds_by_row)
    for s in snap.segments:
        yield {"type": "segment", "record_id": int(snap.ids[s["rec"]]), "seq": int(s["seq"]),
               "kind": "READ" if s["kind"] == 0 else "WRITE", "offset": int(s["offset"]),
               "length": int(s["length"]), "t_start": float(s["t_start"]),
               "t_end": float(s["t_end"])}
    yield {"type": "end", "records": len(snap), "segments": len(snap.segments)}


def dumps_log(snap: Snapshot, hostname: str | None = None, pid: int | None = None,
              extra: dict | None = None) -> bytes:
    return b"".join(
        json.dumps(obj, separators=_COMPACT, ensure_ascii=False).encode("utf-8", "surrogateescape")
        + b"\n" for obj in iter_log_lines(snap, hostname, pid, extra))


def write_log(snap: Snapshot, path: str | os.PathLike, hostname: str | None = None,
              pid: int | None = None, extra: dict | None = None) -> None:
    """Write ``snap`` as a profiler log; ``extra`` adds header fields."""
    data = dumps_log(snap, hostname, pid, extra)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


class LogHeader(dict):
    pass


def _int(obj, key, line):
    v = obj.get(key)
    if not isinstance(v, int) or isinstance(v, bool):
        raise MalformedLog(f"{key!r} must be an integer", line)
    return v


def _num(obj, key, line):
    v = obj.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise MalformedLog(f"{key!r} must be a number", line)
    return float(v)


def parse_log(data: bytes) -> tuple[LogHeader, Snapshot]:
    lines = data.split(b"\n")
    if lines and lines[-1] == b"":
        lines.pop()
    if not lines:
        raise MalformedLog("empty log", 1)
    objs = []
    for no, raw in enumerate(lines, 1):
        try:
            obj = json.loads(raw.decode("utf-8", "surrogateescape"))
        except ValueError as exc:
            raise MalformedLog(f"invalid JSON ({exc.msg})", no) from None
        if not isinstance(obj, dict):
            raise MalformedLog("expected a JSON object", no)
        objs.append(obj)
    head = objs[0]
    if head.get("format") != LOG_FORMAT:
        raise MalformedLog("not an iotrace log header", 1)
    if head.get("version") != LOG_VERSION:
        raise VersionMismatch(f"log version {head.get('version')!r}, expected {LOG_VERSION}")
    header = LogHeader(head)

    ids, paths, counters, times, truncated, fds = [], [], [], [], [], []
    row_of: dict[int, int] = {}
    segs = []
    ended = False
    for no, obj in enumerate(objs[1:], 2):
        if ended:
            raise MalformedLog("content after end marker", no)
        kind = obj.get("type")
        if kind == "record":
            rid = _int(obj, "record_id", no)
            if rid in row_of:
                raise MalformedLog(f"duplicate record {rid}", no)
            path = obj.get("path")
            c = obj.get("counters")
            if not isinstance(path, str) or not isinstance(c, dict):
                raise MalformedLog("record needs 'path' and 'counters'", no)
            try:
                row = [int(c[n]) for n in SCALAR_COUNTERS]
                rh, wh = list(c["read_size_hist"]), list(c["write_size_hist"])
                if len(rh) != N_BUCKETS or len(wh) != N_BUCKETS:
                    raise ValueError("histogram length")
                row += [int(v) for v in rh] + [int(v) for v in wh]
                row += [int(c[n]) for n in STDIO_COUNTERS]
                trow = [float(c[n]) for n in TIME_FIELDS]
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedLog(f"bad counters ({exc})", no) from None
            row_of[rid] = len(ids)
            ids.append(rid)
            paths.append(path)
            counters.append(row)
            times.append(trow)
            truncated.append(bool(obj.get("truncated", False)))
            for entry in obj.get("open_fds", []):
                try:
                    fd, fam, off = entry
                    fds.append((int(fd), Family(fam).code, row_of[rid], int(off)))
                except (TypeError, ValueError) as exc:
                    raise MalformedLog(f"bad open_fds entry ({exc})", no) from None
        elif kind == "segment":
            rid = _int(obj, "record_id", no)
            if rid not in row_of:
                raise MalformedLog(f"segment for unknown record {rid}", no)
            k = obj.get("kind")
            if k not in ("READ", "WRITE"):
                raise MalformedLog(f"bad segment kind {k!r}", no)
            segs.append((row_of[rid], _int(obj, "seq", no), 0 if k == "READ" else 1,
                         _int(obj, "offset", no), _int(obj, "length", no),
                         _num(obj, "t_start", no), _num(obj, "t_end", no)))
        elif kind == "end":
            if obj.get("records") != len(ids) or obj.get("segments") != len(segs):
                raise MalformedLog("end marker counts do not match content", no)
            ended = True
        else:
            raise MalformedLog(f"unknown line type {kind!r}", no)
    if not ended:
        raise MalformedLog("missing end marker (truncated log?)", len(objs) + 1)
    snap = Snapshot.build(
        _num(head, "t_wall", 1), _num(head, "t_mono", 1), np.array(ids, dtype=np.uint64), paths,
        np.array(counters, dtype=np.int64).reshape(len(ids), N_COUNTERS),
        np.array(times, dtype=np.float64).reshape(len(ids), len(TIME_FIELDS)),
        truncated, np.array(segs, dtype=SEG_DTYPE), np.array(fds, dtype=FD_DTYPE),
        dxt_enabled=bool(head.get("dxt_enabled", True)),
        dxt_capacity=int(head.get("dxt_capacity", 0)))
    return header, snap


def load_log(path: str | os.PathLike) -> Snapshot:
    return load_log_with_header(path)[1]


def load_log_with_header(path: str | os.PathLike) -> tuple[LogHeader, Snapshot]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return parse_log(data)


def merge_snapshots(snaps: Iterable[Snapshot]) -> Snapshot:
    """Combine snapshots from different processes, keyed by path.

    Additive counters are summed, high-water marks and last-times take the
    maximum, first-times the earliest nonzero value.  Segments of a file are
    renumbered in start-time order.
    """
    snaps = list(snaps)
    if not snaps:
        return Snapshot.empty()
    if len(snaps) == 1:
        return snaps[0]
    by_path: dict[str, int] = {}
    ids, paths, counters, times, truncated = [], [], [], [], []
    segs = []
    for s in snaps:
        for row in range(len(s)):
            p = s.paths[row]
            if p not in by_path:
                by_path[p] = len(ids)
                ids.append(int(s.ids[row]))
                paths.append(p)
                counters.append(s.counters[row].copy())
                times.append(s.times[row].copy())
                truncated.append(bool(s.truncated[row]))
                continue
            i = by_path[p]
            c = counters[i]
            new = s.counters[row]
            keep = c[list(NON_ADDITIVE)].copy()
            c += new
            c[list(NON_ADDITIVE)] = np.maximum(keep, new[list(NON_ADDITIVE)])
            t, nt = times[i], s.times[row]
            for k, name in enumerate(TIME_FIELDS):
                if name.startswith("t_first"):
                    vals = [v for v in (t[k], nt[k]) if v]
                    t[k] = min(vals) if vals else 0.0
                else:
                    t[k] = max(t[k], nt[k])
            truncated[i] = truncated[i] or bool(s.truncated[row])
        for g in s.segments:
            segs.append((by_path[s.paths[g["rec"]]], g["kind"], g["offset"], g["length"],
                         g["t_start"], g["t_end"]))
    segs.sort(key=lambda g: (g[0], g[4], g[5]))
    out = []
    seq = {}
    for rec, kind, off, length, t0, t1 in segs:
        n = seq.get(rec, 0)
        seq[rec] = n + 1
        out.append((rec, n, kind, off, length, t0, t1))
    return Snapshot.build(
        max(s.t_wall for s in snaps), max(s.t_mono for s in snaps), np.array(ids, dtype=np.uint64),
        paths, np.array(counters, dtype=np.int64).reshape(len(ids), N_COUNTERS),
        np.array(times).reshape(len(ids), len(TIME_FIELDS)), truncated,
        np.array(out, dtype=SEG_DTYPE), None,
        dxt_enabled=all(s.dxt_enabled for s in snaps),
        dxt_capacity=max(s.dxt_capacity for s in snaps))
