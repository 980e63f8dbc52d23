"""Build and load the native shim and fixture libraries.

Both libraries are compiled on first use with the system C compiler and cached
under ``$IOTRACE_CACHE`` (default ``~/.cache/iotrace``), keyed by a hash of the
source, so a stale build is never picked up.  ``IOTRACE_SHIM`` may point at a
prebuilt shim instead.
"""

from __future__ import annotations

import ctypes
import hashlib
import logging
import os
import shutil
import subprocess
import tempfile
import threading
from importlib import resources
from pathlib import Path

log = logging.getLogger(__name__)

_SOURCES = {
    "shim": ("shim.c", "libiotrace.so", ["-pthread", "-ldl"]),
    "fixture": ("fixture.c", "libiotrace_fixture.so", []),
}
_lock = threading.Lock()
_loaded: dict[str, ctypes.CDLL] = {}


class NativeBuildError(RuntimeError):
    pass


def cache_dir() -> Path:
    root = os.environ.get("IOTRACE_CACHE")
    if root:
        return Path(root)
    return Path(os.path.expanduser("~")) / ".cache" / "iotrace"


def _source(name: str) -> bytes:
    return resources.files("iotrace").joinpath("_native", name).read_bytes()


def library_path(kind: str = "shim") -> Path:
    """Path to the compiled library, building it if needed."""
    if kind == "shim" and os.environ.get("IOTRACE_SHIM"):
        return Path(os.environ["IOTRACE_SHIM"])
    src_name, lib_name, extra = _SOURCES[kind]
    src = _source(src_name)
    digest = hashlib.sha256(src).hexdigest()[:16]
    out = cache_dir() / digest / lib_name
    if out.exists():
        return out
    cc = os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc")
    if not cc:
        raise NativeBuildError("no C compiler found; set CC or IOTRACE_SHIM")
    out.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out.parent) as tmp:
        c_file = Path(tmp) / src_name
        c_file.write_bytes(src)
        tmp_lib = Path(tmp) / lib_name
        cmd = [cc, "-O2", "-g", "-shared", "-fPIC", "-U_FORTIFY_SOURCE",
               "-o", str(tmp_lib), str(c_file), *extra]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        if proc.returncode != 0:
            raise NativeBuildError(f"{' '.join(cmd)} failed:\n{proc.stderr}")
        os.replace(tmp_lib, out)
    log.debug("built %s", out)
    return out


def load(kind: str = "shim") -> ctypes.CDLL:
    """Load (once per process) and return the library handle."""
    with _lock:
        lib = _loaded.get(kind)
        if lib is None:
            lib = ctypes.CDLL(str(library_path(kind)))
            _declare(kind, lib)
            _loaded[kind] = lib
        return lib


def _declare(kind: str, lib: ctypes.CDLL) -> None:
    c_i64, c_dbl, c_int = ctypes.c_int64, ctypes.c_double, ctypes.c_int
    if kind == "fixture":
        lib.iotfx_pread_loop.argtypes = [ctypes.c_char_p, c_int, ctypes.c_long]
        lib.iotfx_pread_loop.restype = ctypes.c_long
        lib.iotfx_read_file.argtypes = [ctypes.c_char_p, ctypes.c_long]
        lib.iotfx_read_file.restype = ctypes.c_long
        lib.iotfx_checksum.argtypes = [ctypes.c_char_p]
        lib.iotfx_checksum.restype = ctypes.c_uint64
        lib.iotfx_pwrite_at.argtypes = [ctypes.c_char_p, ctypes.c_long, ctypes.c_long]
        lib.iotfx_pwrite_at.restype = ctypes.c_long
        lib.iotfx_checkpoint.argtypes = [ctypes.c_char_p, c_int, ctypes.c_long]
        lib.iotfx_checkpoint.restype = ctypes.c_long
        lib.iotfx_fread_file.argtypes = [ctypes.c_char_p, ctypes.c_long]
        lib.iotfx_fread_file.restype = ctypes.c_long
        return

    lib.iotrace_version.restype = c_int
    lib.iotrace_counter_names.restype = ctypes.c_char_p
    lib.iotrace_ncounters.restype = c_int
    lib.iotrace_now.restype = c_dbl
    lib.iotrace_on_open.argtypes = [ctypes.c_char_p, c_int, c_dbl, c_int]
    lib.iotrace_on_open.restype = c_i64
    lib.iotrace_on_close.argtypes = [c_int, c_dbl, c_int]
    lib.iotrace_on_close.restype = None
    io_args = [c_int, c_int, c_i64, c_i64, c_dbl, c_dbl, c_int]
    lib.iotrace_on_read.argtypes = io_args
    lib.iotrace_on_read.restype = None
    lib.iotrace_on_write.argtypes = io_args
    lib.iotrace_on_write.restype = None
    lib.iotrace_on_seek.argtypes = [c_int, c_i64]
    lib.iotrace_on_seek.restype = None
    lib.iotrace_set_enabled.argtypes = [c_int]
    lib.iotrace_get_enabled.restype = c_int
    lib.iotrace_set_symbol_mask.argtypes = [ctypes.c_uint32]
    lib.iotrace_get_symbol_mask.restype = ctypes.c_uint32
    lib.iotrace_set_dxt.argtypes = [c_int, c_i64]
    lib.iotrace_get_dxt.argtypes = [ctypes.POINTER(c_i64)]
    lib.iotrace_get_dxt.restype = c_int
    lib.iotrace_unresolved_mask.restype = ctypes.c_uint32
    lib.iotrace_record_count.restype = c_i64
    lib.iotrace_snapshot.argtypes = [c_i64, c_i64, ctypes.c_uint64, c_i64,
                                     ctypes.POINTER(SnapshotStruct)]
    lib.iotrace_snapshot.restype = c_int
    lib.iotrace_snapshot_release.argtypes = [ctypes.POINTER(SnapshotStruct)]
    lib.iotrace_snapshot_release.restype = None
    lib.iotrace_write_slot.argtypes = [ctypes.c_size_t, ctypes.c_size_t, c_int,
                                       ctypes.POINTER(ctypes.c_size_t)]
    lib.iotrace_write_slot.restype = c_int
    lib.iotrace_read_slot.argtypes = [ctypes.c_size_t]
    lib.iotrace_read_slot.restype = ctypes.c_size_t


class SegmentStruct(ctypes.Structure):
    _fields_ = [
        ("rec", ctypes.c_int64),
        ("seq", ctypes.c_int64),
        ("kind", ctypes.c_int32),
        ("pad", ctypes.c_int32),
        ("offset", ctypes.c_int64),
        ("length", ctypes.c_int64),
        ("t_start", ctypes.c_double),
        ("t_end", ctypes.c_double),
    ]


class FdStruct(ctypes.Structure):
    _fields_ = [
        ("fd", ctypes.c_int32),
        ("family", ctypes.c_int32),
        ("rec", ctypes.c_int64),
        ("offset", ctypes.c_int64),
    ]


class SnapshotStruct(ctypes.Structure):
    _fields_ = [
        ("t_mono", ctypes.c_double),
        ("t_wall", ctypes.c_double),
        ("n_records", ctypes.c_int64),
        ("n_segments_total", ctypes.c_int64),
        ("seg_from", ctypes.c_int64),
        ("n_segs_out", ctypes.c_int64),
        ("n_fds", ctypes.c_int64),
        ("paths_from", ctypes.c_int64),
        ("paths_len", ctypes.c_int64),
        ("dxt_enabled", ctypes.c_int32),
        ("dxt_capacity", ctypes.c_int32),
        ("gen", ctypes.c_uint64),
        ("epoch", ctypes.c_int64),
        ("n_dirty", ctypes.c_int64),
        ("dirty", ctypes.POINTER(ctypes.c_int64)),
        ("ids", ctypes.POINTER(ctypes.c_uint64)),
        ("counters", ctypes.POINTER(ctypes.c_int64)),
        ("times", ctypes.POINTER(ctypes.c_double)),
        ("truncated", ctypes.POINTER(ctypes.c_int32)),
        ("segs", ctypes.POINTER(SegmentStruct)),
        ("paths", ctypes.POINTER(ctypes.c_char)),
        ("fds", ctypes.POINTER(FdStruct)),
    ]
