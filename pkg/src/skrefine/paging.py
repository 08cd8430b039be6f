"""x86-64 four-level paging: entry codec, address split, walks, and .pt files.

A paging-structure file is a sequence of 4096-byte structures of 512
little-endian 64-bit entries: the PML4 first, then every PDPT, every PD and
every PT.  Non-leaf entries hold the physical address of the next structure;
since the file is loaded at ``pt_base``, that address is ``pt_base`` plus the
structure's file offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .policy import PAGE, Permissions

ENTRIES = 512
STRUCT_BYTES = ENTRIES * 8
VA_LIMIT = 1 << 48

PRESENT = 1 << 0
WRITABLE = 1 << 1
NO_EXECUTE = 1 << 63
ADDR_MASK = 0x000F_FFFF_FFFF_F000
RESERVED_MASK = ((1 << 63) - 1) & ~ADDR_MASK & ~(PRESENT | WRITABLE)


class PagingError(ValueError):
    pass


class PageTableCorruption(PagingError):
    """A non-leaf entry points outside the paging-structure file."""


def split_va(va: int) -> tuple[int, int, int, int, int]:
    if not 0 <= va < VA_LIMIT:
        raise PagingError(f"non-canonical address {va:#x}")
    return (va >> 39) & 511, (va >> 30) & 511, (va >> 21) & 511, (va >> 12) & 511, va & 0xFFF


def join_va(pml4: int, pdpt: int, pd: int, pt: int, offset: int = 0) -> int:
    return (pml4 << 39) | (pdpt << 30) | (pd << 21) | (pt << 12) | offset


@dataclass(frozen=True)
class PTEntry:
    raw: int

    @property
    def present(self) -> bool:
        return bool(self.raw & PRESENT)

    @property
    def writable(self) -> bool:
        return bool(self.raw & WRITABLE)

    @property
    def no_execute(self) -> bool:
        return bool(self.raw & NO_EXECUTE)

    @property
    def address(self) -> int:
        return self.raw & ADDR_MASK


def encode_entry(pa: int, present: bool = True, writable: bool = False, no_execute: bool = False) -> PTEntry:
    if not present:
        return PTEntry(0)
    if pa % PAGE or not 0 <= pa < (1 << 52):
        raise PagingError(f"misaligned or out-of-range physical address {pa:#x}")
    return PTEntry(pa | PRESENT | (WRITABLE if writable else 0) | (NO_EXECUTE if no_execute else 0))


def decode_entry(raw: int) -> tuple[int, bool, bool, bool]:
    e = PTEntry(raw)
    return e.address, e.present, e.writable, e.no_execute


class PagingStructureFile:
    """One subject's paging structures as loaded at physical address ``pt_base``.

    ``levels`` records how many structures each level holds when known (set by
    the generator; unknown for files read from disk).
    """

    def __init__(self, data: bytes, pt_base: int, levels: tuple | None = None):
        if len(data) < STRUCT_BYTES or len(data) % STRUCT_BYTES:
            raise PagingError(f"paging-structure file of {len(data)} bytes is not a positive multiple of 4096")
        self.data = bytes(data)
        self.pt_base = pt_base
        self.levels = levels
        self.words = np.frombuffer(self.data, dtype="<u8")
        self._entries = None

    def __len__(self):
        return len(self.data)

    def __eq__(self, other):
        return isinstance(other, PagingStructureFile) and self.data == other.data and self.pt_base == other.pt_base

    @property
    def entries(self) -> list:
        if self._entries is None:
            self._entries = self.words.tolist()
        return self._entries

    def entry(self, index: int) -> PTEntry:
        return PTEntry(self.entries[index])

    def level_regions(self) -> list[tuple[int, int]] | None:
        """Structure-index ranges ``[start, stop)`` per level, if known."""
        if self.levels is None:
            return None
        out, start = [], 0
        for n in self.levels:
            out.append((start, start + n))
            start += n
        return out

    def walk(self, va: int):
        """Return (entry indices used, pa or None, Permissions or None)."""
        e = self.entries
        base, span = self.pt_base, len(self.data)
        idx = split_va(va)
        struct, used = 0, []
        w, x = True, True
        for level in range(4):
            slot = struct * ENTRIES + idx[level]
            used.append(slot)
            raw = e[slot]
            if not raw & PRESENT:
                return used, None, None
            w = w and bool(raw & WRITABLE)
            x = x and not raw & NO_EXECUTE
            target = raw & ADDR_MASK
            if level < 3:
                off = target - base
                if not 0 <= off < span:
                    raise PageTableCorruption(
                        f"entry {slot} points to {target:#x}, outside [{base:#x}, {base + span:#x})"
                    )
                struct = off // STRUCT_BYTES
            else:
                return used, target | idx[4], Permissions(True, w, x)
        raise AssertionError("unreachable")

    def walk_many(self, vas):
        return _kernels.walk_pages(self.words, self.pt_base, vas)


def translate(ptf: PagingStructureFile, va: int):
    """Translate ``va``; None if unmapped, else (physical address, Permissions)."""
    _, pa, perm = ptf.walk(va)
    return None if pa is None else (pa, perm)


def read_pt_file(data: bytes, pt_base: int = 0) -> PagingStructureFile:
    return PagingStructureFile(data, pt_base)


def write_pt_file(ptf: PagingStructureFile) -> bytes:
    return ptf.data


def structure_count(pages) -> tuple[int, int, int, int]:
    """Structures per level needed to map the given page-aligned addresses."""
    pdpt, pd, pt = set(), set(), set()
    for va in pages:
        a, b, c, _, _ = split_va(va)
        pdpt.add(a)
        pd.add((a, b))
        pt.add((a, b, c))
    return 1, len(pdpt), len(pd), len(pt)


def build_tables(mappings, pt_base: int) -> PagingStructureFile:
    """Build paging structures for ``mappings``: iterable of (va, pa, Permissions) per 4 KiB page.

    Intermediate entries are present|writable without NX, so the effective
    permissions of a page are those of its leaf.
    """
    mappings = sorted(mappings, key=lambda m: m[0])
    vas = [m[0] for m in mappings]
    if len(set(vas)) != len(vas):
        raise PagingError("duplicate virtual page in mapping")
    for va, pa, _ in mappings:
        if va % PAGE or pa % PAGE:
            raise PagingError(f"unaligned mapping {va:#x} -> {pa:#x}")
        if va >= VA_LIMIT:
            raise PagingError(f"virtual address {va:#x} beyond 4-level paging limit")

    keys = [split_va(va)[:3] for va in vas]
    pdpts = sorted({k[0] for k in keys})
    pds = sorted({k[:2] for k in keys})
    pts = sorted(set(keys))
    first_pdpt = 1
    first_pd = first_pdpt + len(pdpts)
    first_pt = first_pd + len(pds)
    nstructs = first_pt + len(pts)
    pdpt_of = {k: first_pdpt + i for i, k in enumerate(pdpts)}
    pd_of = {k: first_pd + i for i, k in enumerate(pds)}
    pt_of = {k: first_pt + i for i, k in enumerate(pts)}

    words = np.zeros(nstructs * ENTRIES, dtype="<u8")

    def link(struct, index, child):
        words[struct * ENTRIES + index] = pt_base + child * STRUCT_BYTES | PRESENT | WRITABLE

    for a in pdpts:
        link(0, a, pdpt_of[a])
    for a, b in pds:
        link(pdpt_of[a], b, pd_of[(a, b)])
    for a, b, c in pts:
        link(pd_of[(a, b)], c, pt_of[(a, b, c)])
    for (va, pa, perm), key in zip(mappings, keys):
        leaf = encode_entry(pa, True, perm.w, not perm.x)
        words[pt_of[key] * ENTRIES + split_va(va)[3]] = leaf.raw
    return PagingStructureFile(words.tobytes(), pt_base, (1, len(pdpts), len(pds), len(pts)))
