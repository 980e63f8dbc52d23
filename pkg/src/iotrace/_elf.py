"""Minimal ELF64 dynamic-section reader.

Works on loaded objects (via ``dl_iterate_phdr``) and on files on disk.  Only
what relocation scanning needs is parsed: the dynamic section, the PLT and
data relocation tables, and the dynamic symbol and string tables.
"""

from __future__ import annotations

import ctypes
import os
import platform
import struct
from dataclasses import dataclass

import numpy as np

PT_LOAD = 1
PT_DYNAMIC = 2
PT_INTERP = 3

DT_NULL = 0
DT_PLTRELSZ = 2
DT_STRTAB = 5
DT_SYMTAB = 6
DT_RELA = 7
DT_RELASZ = 8
DT_STRSZ = 10
DT_JMPREL = 23

_DYN = struct.Struct("<qQ")
_SYM_DTYPE = np.dtype([("name", "<u4"), ("info", "u1"), ("other", "u1"),
                       ("shndx", "<u2"), ("value", "<u8"), ("size", "<u8")])
_RELA_DTYPE = np.dtype([("offset", "<u8"), ("info", "<u8"), ("addend", "<i8")])
_PHDR = struct.Struct("<IIQQQQQQ")

# (JUMP_SLOT, GLOB_DAT) per machine
_RELOC_TYPES = {
    "x86_64": (7, 6),
    "aarch64": (1026, 1025),
}


class ElfError(Exception):
    pass


def reloc_types() -> tuple[int, int]:
    machine = platform.machine()
    try:
        return _RELOC_TYPES[machine]
    except KeyError:
        raise ElfError(f"unsupported machine {machine!r}") from None


@dataclass(frozen=True)
class LoadedObject:
    name: str
    base: int
    dynamic: int  # address of the in-memory dynamic section, 0 if none


@dataclass(frozen=True)
class Relocation:
    symbol: str
    offset: int  # r_offset, relative to the object's load base
    rtype: int


class _DlPhdrInfo(ctypes.Structure):
    _fields_ = [
        ("dlpi_addr", ctypes.c_size_t),
        ("dlpi_name", ctypes.c_char_p),
        ("dlpi_phdr", ctypes.c_void_p),
        ("dlpi_phnum", ctypes.c_uint16),
    ]


_CALLBACK = ctypes.CFUNCTYPE(ctypes.c_int, ctypes.POINTER(_DlPhdrInfo), ctypes.c_size_t,
                             ctypes.c_void_p)


def loaded_objects() -> list[LoadedObject]:
    libc = ctypes.CDLL(None)
    out: list[LoadedObject] = []

    def visit(info_p, _size, _data):
        info = info_p.contents
        name = os.fsdecode(info.dlpi_name or b"")
        dynamic = 0
        raw = ctypes.string_at(info.dlpi_phdr, _PHDR.size * info.dlpi_phnum)
        for i in range(info.dlpi_phnum):
            p_type, _flags, _off, p_vaddr, *_ = _PHDR.unpack_from(raw, i * _PHDR.size)
            if p_type == PT_DYNAMIC:
                dynamic = info.dlpi_addr + p_vaddr
        out.append(LoadedObject(name, info.dlpi_addr, dynamic))
        return 0

    libc.dl_iterate_phdr(_CALLBACK(visit), None)
    return out


def _parse_dynamic(read_u64_pairs) -> dict[int, int]:
    tags: dict[int, int] = {}
    for tag, val in read_u64_pairs:
        if tag == DT_NULL:
            break
        tags.setdefault(tag, val)
    return tags


def _relocations(tags, read, addr_of, want) -> list[Relocation]:
    """Shared walk over DT_JMPREL and DT_RELA tables.

    ``read(addr, n)`` returns bytes, ``addr_of(value)`` maps a dynamic-tag
    pointer to something ``read`` understands.
    """
    if DT_SYMTAB not in tags or DT_STRTAB not in tags:
        raise ElfError("dynamic section lacks symbol or string table")
    symtab = addr_of(tags[DT_SYMTAB])
    strtab = addr_of(tags[DT_STRTAB])
    strsz = tags.get(DT_STRSZ, 0)
    strings = read(strtab, strsz) if strsz else b""
    jump_slot, glob_dat = reloc_types()
    out: list[Relocation] = []
    for start_tag, size_tag in ((DT_JMPREL, DT_PLTRELSZ), (DT_RELA, DT_RELASZ)):
        if start_tag not in tags or not tags.get(size_tag):
            continue
        blob = read(addr_of(tags[start_tag]), tags[size_tag])
        rel = np.frombuffer(blob[: len(blob) // 24 * 24], _RELA_DTYPE)
        rtype = rel["info"] & 0xFFFFFFFF
        idx = (rel["info"] >> 32).astype(np.int64)
        keep = ((rtype == jump_slot) | (rtype == glob_dat)) & (idx != 0)
        if not keep.any():
            continue
        rel, rtype, idx = rel[keep], rtype[keep], idx[keep]
        syms = np.frombuffer(read(symtab, (int(idx.max()) + 1) * _SYM_DTYPE.itemsize), _SYM_DTYPE)
        st_name = syms["name"][idx]
        names = {}
        for o in np.unique(st_name).tolist():
            name = strings[o:strings.find(b"\0", o)].decode("ascii", "replace")
            if name in want:
                names[o] = name
        for r_offset, rt, o in zip(rel["offset"].tolist(), rtype.tolist(), st_name.tolist()):
            if o in names:
                out.append(Relocation(names[o], r_offset, rt))
    return out


def scan_loaded(obj: LoadedObject, want: set[str]) -> list[Relocation]:
    if not obj.dynamic:
        return []

    def pairs():
        addr = obj.dynamic
        while True:
            yield _DYN.unpack(ctypes.string_at(addr, _DYN.size))
            addr += _DYN.size

    tags = _parse_dynamic(pairs())

    # the loader relocates most dynamic pointers in place, but not all (vdso)
    def addr_of(v: int) -> int:
        return v + obj.base if v < obj.base else v

    return _relocations(tags, ctypes.string_at, addr_of, want)


class ElfFile:
    """An ELF64 little-endian file mapped by virtual address through PT_LOAD."""

    def __init__(self, path: str | os.PathLike):
        with open(path, "rb") as fh:
            self.data = fh.read()
        d = self.data
        if d[:4] != b"\x7fELF":
            raise ElfError(f"{path}: not an ELF file")
        if d[4] != 2 or d[5] != 1:
            raise ElfError(f"{path}: only ELF64 little-endian is supported")
        e_phoff = struct.unpack_from("<Q", d, 0x20)[0]
        e_phentsize, e_phnum = struct.unpack_from("<HH", d, 0x36)
        self.segments = [_PHDR.unpack_from(d, e_phoff + i * e_phentsize) for i in range(e_phnum)]

    @property
    def has_dynamic(self) -> bool:
        return any(p[0] == PT_DYNAMIC for p in self.segments)

    @property
    def has_interp(self) -> bool:
        return any(p[0] == PT_INTERP for p in self.segments)

    def offset_of(self, vaddr: int) -> int:
        for p_type, _f, p_offset, p_vaddr, _pa, p_filesz, _m, _al in self.segments:
            if p_type == PT_LOAD and p_vaddr <= vaddr < p_vaddr + p_filesz:
                return p_offset + (vaddr - p_vaddr)
        raise ElfError(f"address {vaddr:#x} not backed by file contents")

    def relocations(self, want: set[str]) -> list[Relocation]:
        dyn = next((p for p in self.segments if p[0] == PT_DYNAMIC), None)
        if dyn is None:
            raise ElfError("no dynamic section")
        off, size = dyn[2], dyn[5]
        tags = _parse_dynamic(_DYN.iter_unpack(self.data[off: off + size // 16 * 16]))

        def read(o: int, n: int) -> bytes:
            return self.data[o: o + n]

        return _relocations(tags, read, self.offset_of, want)


def is_dynamic_executable(path: str | os.PathLike) -> bool:
    try:
        return ElfFile(path).has_dynamic
    except (OSError, ElfError):
        return True  # scripts and unknown formats: assume the loader is involved
