"""Redirect I/O calls of the running process to the instrumented wrappers.

Two routes lead to the same wrappers in the native shim:

* preload: the shim is placed ahead of libc with ``LD_PRELOAD`` and its
  exported symbols shadow the originals for the whole process lifetime;
* runtime attach: relocation slots (GOT entries) of every loaded object that
  import a catalog symbol are rewritten to point at the wrapper, and restored
  on detach.
"""

from __future__ import annotations

import ctypes
import enum
import logging
import os
import threading
from dataclasses import dataclass, field

from . import _elf, native
from .collector import Family

log = logging.getLogger(__name__)

PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4


class InterposeError(RuntimeError):
    pass


class RelocationUnreadable(InterposeError):
    pass


class SlotWriteDenied(InterposeError):
    pass


class AlreadyAttached(InterposeError):
    pass


class NotAttached(InterposeError):
    pass


class RealSymbolUnresolvable(InterposeError):
    pass


class PreloadInactive(InterposeError):
    pass


@dataclass(frozen=True)
class SymbolTarget:
    name: str
    family: Family

    def __post_init__(self):
        if not self.name:
            raise ValueError("symbol name must be nonempty")


# order matches the symbol enum in the shim (bit i of its symbol mask)
CATALOG: tuple[SymbolTarget, ...] = tuple(
    SymbolTarget(n, Family.POSIX) for n in (
        "open", "open64", "creat", "close", "read", "pread", "pread64",
        "write", "pwrite", "pwrite64", "lseek", "lseek64")
) + tuple(
    SymbolTarget(n, Family.STDIO) for n in ("fopen", "fopen64", "fclose", "fread", "fwrite", "fseek")
)
_BY_NAME = {t.name: t for t in CATALOG}


def targets_from_names(names) -> list[SymbolTarget]:
    out = []
    for n in names:
        n = n.strip()
        if not n:
            continue
        if n not in _BY_NAME:
            raise ValueError(f"{n!r} is not in the symbol catalog")
        out.append(_BY_NAME[n])
    return out


def symbol_mask(targets) -> int:
    mask = 0
    for t in targets:
        mask |= 1 << CATALOG.index(_BY_NAME[t.name])
    return mask


@dataclass(frozen=True)
class Slot:
    object_name: str
    symbol: SymbolTarget
    slot_address: int


@dataclass(frozen=True)
class PatchRecord:
    object_name: str
    symbol: SymbolTarget
    slot_address: int
    original_value: int
    replacement_value: int


class Mode(str, enum.Enum):
    PRELOAD = "PRELOAD"
    RUNTIME = "RUNTIME"
    DETACHED = "DETACHED"


@dataclass(frozen=True)
class AttachmentState:
    mode: Mode = Mode.DETACHED
    patches: tuple[PatchRecord, ...] = field(default_factory=tuple)
    targets: tuple[SymbolTarget, ...] = ()


_lock = threading.RLock()
_state = AttachmentState()


def current_state() -> AttachmentState:
    return _state


def _object_name(obj: _elf.LoadedObject) -> str:
    if obj.name:
        return obj.name
    try:
        return os.readlink("/proc/self/exe")
    except OSError:
        return "<main>"


def _shim_identity() -> tuple[int, int] | None:
    try:
        st = os.stat(native.library_path("shim"))
    except (OSError, native.NativeBuildError):
        return None
    return st.st_dev, st.st_ino


def _file_identity(name: str):
    if not name:
        return None
    try:
        st = os.stat(name)
    except OSError:
        return None
    return st.st_dev, st.st_ino, st.st_mtime_ns


# relocations of a mapped object never change while it stays mapped
_scan_cache: dict[tuple, list] = {}


def scan_relocations(targets, objects=None) -> list[Slot]:
    """Every relocation slot importing one of ``targets`` in the loaded objects.

    The shim itself is skipped so its forwarding pointers are never redirected
    back into the wrappers.
    """
    targets = list(targets)
    if not targets:
        return []
    want = {t.name: t for t in targets}
    if objects is None:
        objects = _elf.loaded_objects()
    if not any(o.dynamic for o in objects):
        raise RelocationUnreadable("no loaded object has a dynamic section (static binary?)")
    shim = _shim_identity()
    seen: set[tuple[str, int]] = set()
    out: list[Slot] = []
    for obj in objects:
        if not obj.dynamic or obj.name.startswith("linux-vdso") or obj.name.startswith("linux-gate"):
            continue
        name = _object_name(obj)
        ident = _file_identity(name)
        if ident is not None and shim is not None and ident[:2] == shim:
            continue
        key = (name, obj.base, obj.dynamic, ident, frozenset(want))
        relocs = _scan_cache.get(key) if ident is not None else None
        if relocs is None:
            try:
                relocs = _elf.scan_loaded(obj, set(want))
            except (_elf.ElfError, ValueError) as exc:
                raise RelocationUnreadable(f"{name}: {exc}") from exc
            if ident is not None:
                _scan_cache[key] = relocs
        for r in relocs:
            addr = obj.base + r.offset
            if (name, addr) in seen:
                continue
            seen.add((name, addr))
            out.append(Slot(name, want[r.symbol], addr))
    return out


def scan_elf_file(path, targets) -> list[tuple[str, int]]:
    """(symbol, r_offset) pairs for an executable or library on disk."""
    want = {t.name for t in targets}
    try:
        elf = _elf.ElfFile(path)
    except _elf.ElfError as exc:
        raise RelocationUnreadable(str(exc)) from exc
    if not elf.has_dynamic:
        raise RelocationUnreadable(f"{path}: no dynamic relocations (statically linked)")
    if not want:
        return []
    try:
        return sorted({(r.symbol, r.offset) for r in elf.relocations(want)})
    except _elf.ElfError as exc:
        raise RelocationUnreadable(f"{path}: {exc}") from exc


def _page_protections() -> list[tuple[int, int, int]]:
    out = []
    with open("/proc/self/maps") as fh:
        for line in fh:
            rng, perms = line.split()[:2]
            lo, hi = (int(x, 16) for x in rng.split("-"))
            prot = ((PROT_READ if perms[0] == "r" else 0) | (PROT_WRITE if perms[1] == "w" else 0)
                    | (PROT_EXEC if perms[2] == "x" else 0))
            out.append((lo, hi, prot))
    return out


def _prot_at(maps, addr: int) -> int:
    for lo, hi, prot in maps:
        if lo <= addr < hi:
            return prot
    raise SlotWriteDenied(f"slot {addr:#x} is not mapped")


def _write(lib, slot: int, value: int, prot: int) -> int:
    old = ctypes.c_size_t()
    rc = lib.iotrace_write_slot(slot, value, prot, ctypes.byref(old))
    if rc != 0:
        raise SlotWriteDenied(f"cannot write slot {slot:#x}: {os.strerror(rc)}")
    return old.value


def default_wrappers() -> dict[str, int]:
    lib = native.load("shim")
    return {t.name: ctypes.cast(getattr(lib, t.name), ctypes.c_void_p).value for t in CATALOG}


def _check_resolved(lib, targets) -> None:
    missing = lib.iotrace_unresolved_mask()
    bad = [t.name for t in targets if missing & (1 << CATALOG.index(_BY_NAME[t.name]))]
    if bad:
        raise RealSymbolUnresolvable(f"no genuine implementation found for {', '.join(bad)}")


def attach(targets=None, wrappers=None) -> AttachmentState:
    """Rewrite every matching relocation slot to the wrapper for its symbol."""
    global _state
    targets = list(CATALOG if targets is None else targets)
    with _lock:
        if _state.mode is not Mode.DETACHED:
            raise AlreadyAttached(f"interposition already active ({_state.mode.value})")
        if not targets:
            return AttachmentState()
        lib = native.load("shim")
        wrappers = default_wrappers() if wrappers is None else dict(wrappers)
        missing = [t.name for t in targets if t.name not in wrappers]
        if missing:
            raise ValueError(f"no wrapper for {', '.join(missing)}")
        _check_resolved(lib, targets)
        slots = scan_relocations(targets)
        maps = _page_protections()
        patches: list[PatchRecord] = []
        try:
            for s in slots:
                value = wrappers[s.symbol.name]
                old = _write(lib, s.slot_address, value, _prot_at(maps, s.slot_address))
                patches.append(PatchRecord(s.object_name, s.symbol, s.slot_address, old, value))
        except SlotWriteDenied:
            _restore(lib, patches, maps)
            raise
        log.debug("attached %d slots for %d symbols", len(patches), len(targets))
        if not patches:
            return AttachmentState(targets=tuple(targets))
        _state = AttachmentState(Mode.RUNTIME, tuple(patches), tuple(targets))
        return _state


def _restore(lib, patches, maps) -> None:
    for p in reversed(patches):
        _write(lib, p.slot_address, p.original_value, _prot_at(maps, p.slot_address))


def detach(state: AttachmentState | None = None) -> AttachmentState:
    """Restore every patched slot to its original value."""
    global _state
    with _lock:
        state = _state if state is None else state
        if state.mode is not Mode.RUNTIME or _state is not state:
            raise NotAttached("no runtime attachment to undo")
        _restore(native.load("shim"), state.patches, _page_protections())
        _state = AttachmentState()
        return _state


def reattach(targets=None) -> AttachmentState:
    """Detach (if attached) and attach again, picking up objects loaded since."""
    with _lock:
        if _state.mode is Mode.RUNTIME:
            targets = _state.targets if targets is None else targets
            detach(_state)
        return attach(targets)


def preload_active() -> bool:
    try:
        ctypes.CDLL(None).iotrace_version
    except AttributeError:
        return False
    return True


def preload_init() -> AttachmentState:
    """Adopt a shim that was preloaded into this process."""
    global _state
    with _lock:
        if _state.mode is Mode.PRELOAD:
            return _state
        if _state.mode is not Mode.DETACHED:
            raise AlreadyAttached(f"interposition already active ({_state.mode.value})")
        if not preload_active():
            raise PreloadInactive("the shim is not preloaded into this process")
        lib = native.load("shim")
        enabled_mask = lib.iotrace_get_symbol_mask()
        targets = tuple(t for i, t in enumerate(CATALOG) if enabled_mask & (1 << i))
        _check_resolved(lib, targets)
        _state = AttachmentState(Mode.PRELOAD, (), targets)
        return _state


def preload_environment(log_template: str | None = None, enable: bool = True,
                        symbols=None, dxt: bool | None = None,
                        dxt_capacity: int | None = None) -> dict[str, str]:
    """Environment entries that launch a child process under the shim."""
    env = {"LD_PRELOAD": str(native.library_path("shim")), "IOTRACE_ENABLE": "1" if enable else "0"}
    existing = os.environ.get("LD_PRELOAD")
    if existing:
        env["LD_PRELOAD"] += ":" + existing
    if log_template:
        env["IOTRACE_LOG"] = log_template
    if symbols is not None:
        env["IOTRACE_SYMBOLS"] = ",".join(t.name if isinstance(t, SymbolTarget) else t for t in symbols)
    if dxt is not None:
        env["IOTRACE_DXT"] = "1" if dxt else "0"
    if dxt_capacity is not None:
        env["IOTRACE_DXT_CAPACITY"] = str(dxt_capacity)
    return env
