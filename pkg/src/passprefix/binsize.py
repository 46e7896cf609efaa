"""Read-only section-header parsing for ELF and Mach-O containers.

Only what code-size extraction needs: section names, owning segment (Mach-O)
and sizes.  The container format is detected from the magic bytes.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

from .errors import MalformedBinary, MissingTextSection

ELF_MAGIC = b"\x7fELF"

MH_MAGIC = 0xFEEDFACE
MH_CIGAM = 0xCEFAEDFE
MH_MAGIC_64 = 0xFEEDFACF
MH_CIGAM_64 = 0xCFFAEDFE
FAT_MAGIC = 0xCAFEBABE
FAT_MAGIC_64 = 0xCAFEBABF

LC_SEGMENT = 0x1
LC_SEGMENT_64 = 0x19

SHN_XINDEX = 0xFFFF


class Section(NamedTuple):
    name: str
    size: int
    segment: str = ""
    offset: int = 0


@dataclass(frozen=True)
class Container:
    format: str  # "elf" or "macho"
    bits: int
    little_endian: bool
    sections: tuple[Section, ...]


def _unpack(fmt: str, data: bytes, offset: int) -> tuple:
    try:
        return struct.unpack_from(fmt, data, offset)
    except struct.error as exc:
        raise MalformedBinary(f"truncated header at offset {offset:#x}") from exc


def _cstr(raw: bytes) -> str:
    return raw.split(b"\0", 1)[0].decode("latin-1")


def _parse_elf(data: bytes) -> Container:
    if len(data) < 16:
        raise MalformedBinary("truncated ELF identification")
    ei_class, ei_data = data[4], data[5]
    if ei_class not in (1, 2) or ei_data not in (1, 2):
        raise MalformedBinary(f"bad ELF class/data bytes {ei_class}/{ei_data}")
    e = "<" if ei_data == 1 else ">"
    if ei_class == 2:
        (shoff,) = _unpack(e + "Q", data, 0x28)
        shentsize, shnum, shstrndx = _unpack(e + "HHH", data, 0x3A)
        sh_fmt = e + "IIQQQQIIQQ"
    else:
        (shoff,) = _unpack(e + "I", data, 0x20)
        shentsize, shnum, shstrndx = _unpack(e + "HHH", data, 0x2E)
        sh_fmt = e + "IIIIIIIIII"
    if shoff == 0:
        raise MissingTextSection("ELF file has no section header table")
    if shentsize < struct.calcsize(sh_fmt):
        raise MalformedBinary(f"section header entry size {shentsize} too small")

    def header(i: int) -> tuple:
        return _unpack(sh_fmt, data, shoff + i * shentsize)

    if shnum == 0:  # extended numbering: real count lives in section 0
        shnum = header(0)[5]
    if shstrndx == SHN_XINDEX:
        shstrndx = header(0)[6]
    if shnum > (len(data) - shoff) // shentsize + 1 or shstrndx >= max(shnum, 1):
        raise MalformedBinary("section header table out of bounds")
    headers = [header(i) for i in range(shnum)]
    str_off, str_size = headers[shstrndx][4], headers[shstrndx][5]
    if str_off + str_size > len(data):
        raise MalformedBinary("section name table out of bounds")
    strtab = data[str_off : str_off + str_size]
    sections = []
    for h in headers:
        name_off = h[0]
        if name_off >= max(len(strtab), 1) and name_off != 0:
            raise MalformedBinary(f"section name offset {name_off} out of bounds")
        sections.append(Section(_cstr(strtab[name_off:]), h[5], "", h[4]))
    return Container("elf", 32 if ei_class == 1 else 64, e == "<", tuple(sections))


def _parse_macho(data: bytes, base: int = 0) -> Container:
    (magic,) = _unpack("<I", data, base)
    is64 = magic in (MH_MAGIC_64, MH_CIGAM_64)
    e = "<" if magic in (MH_MAGIC, MH_MAGIC_64) else ">"
    ncmds, sizeofcmds = _unpack(e + "II", data, base + 16)
    off = base + (32 if is64 else 28)
    end = off + sizeofcmds
    if end > len(data):
        raise MalformedBinary("load commands extend past end of file")
    sections = []
    for _ in range(ncmds):
        cmd, cmdsize = _unpack(e + "II", data, off)
        if cmdsize < 8 or off + cmdsize > end:
            raise MalformedBinary(f"bad load command size {cmdsize}")
        if cmd in (LC_SEGMENT, LC_SEGMENT_64):
            if cmd == LC_SEGMENT_64:
                nsects = _unpack(e + "I", data, off + 64)[0]
                sect_off, sect_len, sect_fmt = off + 72, 80, e + "16s16sQQI"
            else:
                nsects = _unpack(e + "I", data, off + 48)[0]
                sect_off, sect_len, sect_fmt = off + 56, 68, e + "16s16sIII"
            if sect_off + nsects * sect_len > off + cmdsize:
                raise MalformedBinary("segment section table exceeds its load command")
            for i in range(nsects):
                sectname, segname, _addr, size, offset = _unpack(sect_fmt, data, sect_off + i * sect_len)
                sections.append(Section(_cstr(sectname), size, _cstr(segname), base + offset))
        off += cmdsize
    return Container("macho", 64 if is64 else 32, e == "<", tuple(sections))


def _parse_fat(data: bytes) -> Container:
    (magic, nfat) = _unpack(">II", data, 0)
    if nfat == 0:
        raise MalformedBinary("universal binary with no architectures")
    # first slice only; slices are per-architecture builds of the same program
    if magic == FAT_MAGIC_64:
        _cpu, _sub, offset, _size, _align, _res = _unpack(">iiQQII", data, 8)
    else:
        _cpu, _sub, offset, _size, _align = _unpack(">iiIII", data, 8)
    (slice_magic,) = _unpack("<I", data, offset)
    if slice_magic not in (MH_MAGIC, MH_CIGAM, MH_MAGIC_64, MH_CIGAM_64):
        raise MalformedBinary("universal binary slice is not Mach-O")
    return _parse_macho(data, offset)


def parse_container(data: bytes) -> Container:
    if data[:4] == ELF_MAGIC:
        return _parse_elf(data)
    if len(data) < 4:
        raise MalformedBinary("file too short to identify")
    (le_magic,) = struct.unpack_from("<I", data)
    if le_magic in (MH_MAGIC, MH_CIGAM, MH_MAGIC_64, MH_CIGAM_64):
        return _parse_macho(data)
    (be_magic,) = struct.unpack_from(">I", data)
    if be_magic in (FAT_MAGIC, FAT_MAGIC_64):
        return _parse_fat(data)
    raise MalformedBinary(f"unrecognised container magic {data[:4].hex()}")


def is_text_section(section: Section, fmt: str) -> bool:
    if fmt == "elf":
        return section.name == ".text" or section.name.startswith(".text.")
    return section.segment == "__TEXT" and section.name.startswith("__text")


def text_size(data: bytes) -> int:
    container = parse_container(data)
    texts = [s for s in container.sections if is_text_section(s, container.format)]
    if not texts:
        raise MissingTextSection(f"no executable-code section in {container.format} file")
    return sum(s.size for s in texts)


def measure_code_size(path: str | os.PathLike) -> int:
    """Size in bytes of the ``.text`` section(s) of an object or executable.

    Split sections (``.text.hot``, ``.text.unlikely``, ...) are summed.
    """
    with open(path, "rb") as fh:
        return text_size(fh.read())
