"""Command-line driver.

Exit codes: 0 success, 1 runtime failure, 2 validation FAIL, 3 usage error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import re
import shutil
import subprocess
import sys

from . import analysis, export, interpose, session, validate, workload
from .collector import Snapshot

log = logging.getLogger("iotrace")

EXIT_OK, EXIT_ERROR, EXIT_FAIL, EXIT_USAGE = 0, 1, 2, 3

_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([kmgt]?i?b?)?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "b": 1, "k": 10**3, "m": 10**6, "g": 10**9, "t": 10**12,
          "ki": 2**10, "mi": 2**20, "gi": 2**30, "ti": 2**40}


def parse_size(text: str) -> int:
    """'4096', '2MB' (10^6), '1MiB' (2^20), '88K'."""
    m = _SIZE_RE.match(str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}")
    unit = (m.group(2) or "").lower().rstrip("b")
    if unit not in _UNITS:
        raise argparse.ArgumentTypeError(f"unknown unit in {text!r}")
    return int(float(m.group(1)) * _UNITS[unit])


def _on_off(text: str) -> bool:
    t = text.lower()
    if t in ("on", "1", "true", "yes"):
        return True
    if t in ("off", "0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on or off")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-prefix", default=None, help="write outputs to <prefix>.*")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--dxt", type=_on_off, default=True, metavar="on|off",
                   help="record individual operations (default on)")


def _workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="dataset directory (from mkdataset)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--prefetch", type=int, default=1, help="prefetch depth in batches")
    p.add_argument("--chunk-size", type=parse_size, default=workload.MiB)
    p.add_argument("--seed", type=int, default=None, help="shuffle file order with this seed")
    p.add_argument("--no-zero-read", action="store_true",
                   help="stop at the known file size instead of reading until EOF")
    p.add_argument("--compute-time", type=float, default=0.0, help="seconds per batch")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--writes-per-checkpoint", type=int, default=140)
    p.add_argument("--window-every-steps", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iotrace", description="I/O profiler and tracer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mkdataset", help="generate a synthetic dataset")
    p.add_argument("out_dir")
    p.add_argument("--files", type=int, default=1000)
    p.add_argument("--size-model", choices=[m.value for m in workload.SizeModel], default="FIXED")
    p.add_argument("--size", type=parse_size, default=64 * workload.KiB, help="FIXED file size")
    p.add_argument("--median", type=parse_size, default=88_000, help="LOGNORMAL median size")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--manifest", default=None,
                   help=f"MANIFEST source: a manifest.csv or the preset '{workload.STAGING_PRESET}'")
    p.add_argument("--scale", type=int, default=1, help="divide sizes by this on disk")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("stream", help="run the read workload under the profiler")
    _workload_args(p)
    _common(p)
    p.add_argument("--max-lanes", type=int, default=None, help="cap trace lanes (top files by bytes)")
    p.add_argument("--top-n", type=int, default=20)
    p.add_argument("--no-profile", action="store_true")

    p = sub.add_parser("checkpoint", help="emulate checkpoints with buffered writes")
    p.add_argument("directory")
    p.add_argument("--checkpoints", type=int, default=10)
    p.add_argument("--writes-per-checkpoint", type=int, default=140)
    p.add_argument("--bytes-per-write", type=parse_size, default=4096)
    _common(p)

    p = sub.add_parser("run", help="run a program with the preload library")
    _common(p)
    p.add_argument("--symbols", default=None, help="comma list overriding the symbol catalog")
    p.add_argument("--top-n", type=int, default=20)
    p.add_argument("target", nargs=argparse.REMAINDER, help="command and arguments (after --)")

    p = sub.add_parser("validate", help="compare profiler windows against the oracle")
    p.add_argument("--out-prefix", default=None, help="prefix used by 'stream'")
    p.add_argument("--windows", default=None)
    p.add_argument("--oracle", default=None)
    p.add_argument("--tolerance", type=float, default=validate.DEFAULT_TOLERANCE)
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("overhead", help="time the workload with and without profiling")
    _workload_args(p)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("advise", help="recommend small files for a faster tier")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--log")
    p.add_argument("--threshold", type=parse_size, default=2_000_000)
    p.add_argument("--capacity", type=parse_size, default=None)
    p.add_argument("--emit-moves", metavar="DEST", default=None,
                   help="print 'source<TAB>target' lines placing staged files under DEST")
    p.add_argument("--format", choices=("text", "json"), default="text")

    p = sub.add_parser("report", help="render a report from a profiler log")
    p.add_argument("log")
    p.add_argument("--manifest", default=None)
    p.add_argument("--threshold", type=parse_size, default=None)
    p.add_argument("--capacity", type=parse_size, default=None)
    p.add_argument("--top-n", type=int, default=20)
    p.add_argument("--format", choices=("text", "json"), default="text")
    return parser


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def _write_text(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def cmd_mkdataset(args) -> int:
    spec = workload.DatasetSpec(args.files, args.size_model, args.size, args.median, args.sigma,
                                args.manifest, args.seed, args.scale)
    m = workload.make_dataset(spec, args.out_dir)
    sizes = sorted(m.sizes)
    median = sizes[len(sizes) // 2] if sizes else 0
    _emit(f"wrote {len(m)} files to {os.path.abspath(args.out_dir)}\n"
          f"nominal total {m.total_bytes} B, median {median} B, "
          f"on disk {sum(m.disk_sizes or m.sizes)} B\n"
          f"manifest {os.path.join(os.path.abspath(args.out_dir), 'manifest.csv')}\n")
    return EXIT_OK


def _config(args) -> workload.WorkloadConfig:
    return workload.WorkloadConfig(
        os.path.abspath(args.dataset), args.batch_size, args.steps, args.threads, args.prefetch,
        args.chunk_size, not args.no_zero_read, args.checkpoint_every, args.writes_per_checkpoint,
        compute_time=args.compute_time, shuffle_seed=args.seed)


def _emit_outputs(prefix, whole, windows, final: Snapshot, fmt, top_n, manifest=None,
                  max_lanes=None, extra=None) -> analysis.ReportBundle:
    bundle = analysis.build_report(whole, windows if len(windows) > 1 else None, manifest, top_n)
    if prefix:
        export.write_log(final, f"{prefix}.iotrace.ndjson", extra=extra)
        _write_text(f"{prefix}.report.txt", export.export_report(bundle, "text"))
        _write_text(f"{prefix}.report.json", export.export_report(bundle, "json"))
        try:
            events = export.export_trace_events(whole, max_lanes=max_lanes)
            export.write_trace(events, f"{prefix}.trace.json")
        except export.NoSegments:
            log.info("operation tracing off: no trace file written")
    _emit(export.export_report(bundle, fmt))
    return bundle


def cmd_stream(args) -> int:
    config = _config(args)
    manifest = workload.load_dataset(config.dataset_dir)
    if args.no_profile:
        result = workload.run_stream(config, manifest=manifest)
        _emit(json.dumps(result.summary(), indent=2) + "\n")
        return EXIT_OK
    from .collector import native_store

    store = native_store()
    store.lib.iotrace_set_dxt(int(args.dxt), -1)
    sess = session.ProfilingSession(store)
    try:
        result = workload.run_stream(config, sess, args.window_every_steps, manifest=manifest)
    finally:
        sess.end()
    whole = session.diff(sess.windows[0].start, sess.windows[-1].stop)
    prefix = args.out_prefix
    if prefix:
        records = [validate.WindowRecord.from_stats(w, config.dataset_dir) for w in result.windows]
        validate.save_windows(f"{prefix}.windows.json", result.oracle.run_id, config.dataset_dir, records)
        result.oracle.save(f"{prefix}.oracle.ndjson")
        _write_text(f"{prefix}.summary.json", json.dumps(result.summary(), indent=2) + "\n")
    _emit_outputs(prefix, whole, result.windows, sess.windows[-1].stop, args.format, args.top_n,
                  manifest, args.max_lanes, {"run_id": result.oracle.run_id})
    return EXIT_OK


def cmd_checkpoint(args) -> int:
    from .collector import native_store

    store = native_store()
    store.lib.iotrace_set_dxt(int(args.dxt), -1)
    sess = session.ProfilingSession(store)
    try:
        w = workload.checkpoint_emulation(args.directory, args.checkpoints,
                                          args.writes_per_checkpoint, args.bytes_per_write, sess)
    finally:
        sess.end()
    w = w.restrict(args.directory)
    summary = {"checkpoints": args.checkpoints, "stdio_opens": w.total("stdio_opens"),
               "stdio_writes": w.total("stdio_writes"),
               "stdio_bytes_written": w.total("stdio_bytes_written")}
    if args.out_prefix:
        export.write_log(sess.windows[-1].stop, f"{args.out_prefix}.iotrace.ndjson")
    if args.format == "json":
        _emit(json.dumps(summary, indent=2) + "\n")
    else:
        _emit("".join(f"{k:<20} {v}\n" for k, v in summary.items()))
    return EXIT_OK


def cmd_run(args) -> int:
    target = list(args.target)
    if target and target[0] == "--":
        target = target[1:]
    if not target:
        raise _UsageError("run needs a target command")
    exe = shutil.which(target[0])
    if exe is None:
        log.error("cannot launch %s: not found", target[0])
        return EXIT_ERROR
    from . import _elf

    if not _elf.is_dynamic_executable(exe):
        log.warning("%s looks statically linked; preload cannot observe its I/O", exe)
    prefix = args.out_prefix or "iotrace-run"
    for stale in glob.glob(f"{glob.escape(prefix)}.raw.*.ndjson"):
        os.unlink(stale)
    symbols = args.symbols.split(",") if args.symbols else None
    env = dict(os.environ)
    env.update(interpose.preload_environment(f"{os.path.abspath(prefix)}.raw.%p.ndjson",
                                             symbols=symbols, dxt=args.dxt))
    try:
        proc = subprocess.run(target, env=env)
    except OSError as exc:
        log.error("cannot launch %s: %s", target[0], exc)
        return EXIT_ERROR
    raws = sorted(glob.glob(f"{glob.escape(os.path.abspath(prefix))}.raw.*.ndjson"))
    snaps, t_start = [], None
    for path in raws:
        header, snap = export.load_log_with_header(path)
        snaps.append(snap)
        if "t_start" in header:
            t_start = header["t_start"] if t_start is None else min(t_start, header["t_start"])
        os.unlink(path)
    merged = export.merge_snapshots(snaps)
    if t_start is None or not t_start < merged.t_mono:
        t_start = merged.t_mono - 1e-9
    start = Snapshot.empty(t_wall=merged.t_wall - (merged.t_mono - t_start), t_mono=t_start)
    whole = session.diff(start, merged)
    _emit_outputs(args.out_prefix, whole, [whole], merged, args.format, args.top_n,
                  extra={"t_start": t_start})
    if proc.returncode:
        log.warning("target exited with status %d", proc.returncode)
    return EXIT_OK if proc.returncode == 0 else proc.returncode


def cmd_validate(args) -> int:
    if args.out_prefix:
        windows_path = args.windows or f"{args.out_prefix}.windows.json"
        oracle_path = args.oracle or f"{args.out_prefix}.oracle.ndjson"
    elif args.windows and args.oracle:
        windows_path, oracle_path = args.windows, args.oracle
    else:
        raise _UsageError("validate needs --out-prefix or both --windows and --oracle")
    try:
        report = validate.validate_files(windows_path, oracle_path, args.tolerance)
    except validate.MismatchedRun as exc:
        _emit(f"MismatchedRun: {exc}\n")
        return EXIT_FAIL
    _emit(json.dumps(report.to_dict(), indent=2) + "\n" if args.format == "json" else report.render())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_overhead(args) -> int:
    config = _config(args)
    workload.load_dataset(config.dataset_dir)
    sys.stderr.write(validate.PAGE_CACHE_NOTE + "\n")
    result = validate.measure_overhead(config, args.repetitions, args.window_every_steps or 5)
    _emit(json.dumps(result.to_dict(), indent=2) + "\n" if args.format == "json" else result.render())
    return EXIT_OK


def cmd_advise(args) -> int:
    if args.manifest:
        manifest = analysis.Manifest.load(args.manifest)
    else:
        snap = export.load_log(args.log)
        fs = analysis.file_size_distribution(snap)
        if fs.unknown:
            log.warning("%d file(s) in the log have no known size and are left out", len(fs.unknown))
        manifest = analysis.Manifest.from_pairs(sorted(fs.sizes.items()))
    plan = analysis.staging_advise(manifest, args.threshold, args.capacity)
    if args.format == "json":
        doc = {k: v for k, v in plan.__dict__.items() if k != "files"}
        doc["files"] = [[p, s] for p, s in plan.files]
        _emit(json.dumps(doc, indent=2) + "\n")
    else:
        cap = "none" if plan.capacity is None else str(plan.capacity)
        _emit(f"threshold     {plan.threshold} B\ncapacity      {cap}\n"
              f"files staged  {plan.staged_file_count} of {plan.total_files} ({plan.frac_files:.1%})\n"
              f"bytes staged  {plan.staged_bytes} of {plan.total_bytes} ({plan.frac_bytes:.1%})\n")
    if args.emit_moves:
        _emit("".join(f"{src}\t{dst}\n" for src, dst in plan.move_list(args.emit_moves)))
    return EXIT_OK


def cmd_report(args) -> int:
    header, snap = export.load_log_with_header(args.log)
    t_start = header.get("t_start")
    if t_start is None or not t_start < snap.t_mono:
        firsts = snap.times[:, 0][snap.times[:, 0] > 0]
        t_start = float(firsts.min()) if len(firsts) else snap.t_mono
        if not t_start < snap.t_mono:
            t_start = snap.t_mono - 1e-9
    start = Snapshot.empty(t_wall=snap.t_wall - (snap.t_mono - t_start), t_mono=t_start)
    whole = session.diff(start, snap)
    manifest = analysis.Manifest.load(args.manifest) if args.manifest else None
    bundle = analysis.build_report(whole, None, manifest, args.top_n, args.threshold, args.capacity)
    _emit(export.export_report(bundle, args.format))
    return EXIT_OK


class _UsageError(Exception):
    pass


COMMANDS = {
    "mkdataset": cmd_mkdataset, "stream": cmd_stream, "checkpoint": cmd_checkpoint,
    "run": cmd_run, "validate": cmd_validate, "overhead": cmd_overhead,
    "advise": cmd_advise, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="iotrace: %(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"iotrace: error: {exc}\n")
        return EXIT_USAGE
    except (ValueError, workload.WorkloadError, export.ExportError, analysis.AnalysisError,
            interpose.InterposeError, session.SessionError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
