import numpy as np
import pytest
from hypothesis import given, strategies as st

from skrefine.paging import (
    PageTableCorruption,
    PagingError,
    PagingStructureFile,
    build_tables,
    decode_entry,
    encode_entry,
    join_va,
    split_va,
    structure_count,
    translate,
)
from skrefine.policy import Permissions

RW = Permissions(True, True, False)
RX = Permissions(True, False, True)


def slow_walk(data: bytes, base: int, va: int):
    """Byte-level reference walker, independent of the package's walk."""
    struct = 0
    w, x = True, True
    for level in range(4):
        index = (va >> (39 - 9 * level)) & 0x1FF
        off = struct * 4096 + index * 8
        raw = int.from_bytes(data[off : off + 8], "little")
        if raw & 1 == 0:
            return None
        w &= bool(raw & 2)
        x &= not raw >> 63
        addr = raw & ((1 << 52) - 1) & ~0xFFF
        if level == 3:
            return addr + (va & 0xFFF), w, x
        struct = (addr - base) // 4096


def test_split_va_examples():
    assert split_va(0x0000_7FFF_FFFF_F123) == (255, 511, 511, 511, 0x123)
    assert split_va(0x400123) == (0, 0, 2, 0, 0x123)
    assert split_va(0) == (0, 0, 0, 0, 0)
    assert join_va(*split_va(0x1234_5678_9ABC)) == 0x1234_5678_9ABC


def test_split_va_rejects_noncanonical():
    with pytest.raises(PagingError):
        split_va(1 << 48)


def test_encode_entry_examples():
    assert encode_entry(0x2000, True, True, False).raw == 0x2003
    assert encode_entry(0x5000, True, False, True).raw == 0x8000000000005001
    assert encode_entry(0x5000, present=False).raw == 0
    assert decode_entry(0x8000000000005001) == (0x5000, True, False, True)


def test_encode_rejects_misaligned():
    with pytest.raises(PagingError):
        encode_entry(0x2001)


def test_translate_single_mapping():
    ptf = build_tables([(0x400000, 0x100000, RW)], 0x800000)
    assert ptf.levels == (1, 1, 1, 1)
    assert len(ptf) == 4 * 4096
    pa, perm = translate(ptf, 0x400123)
    assert pa == 0x100123 and perm == RW and str(perm) == "rw-"
    assert translate(ptf, 0x401000) is None


def test_corrupt_nonleaf_entry():
    ptf = build_tables([(0x400000, 0x100000, RW)], 0x800000)
    words = ptf.words.copy()
    words[0] = 0x0FFF_0000_0000_0003  # PML4 entry far outside the file
    bad = PagingStructureFile(words.tobytes(), 0x800000)
    with pytest.raises(PageTableCorruption):
        translate(bad, 0x400000)


def test_file_size_must_be_page_multiple():
    with pytest.raises(PagingError):
        PagingStructureFile(bytes(4100), 0)
    with pytest.raises(PagingError):
        PagingStructureFile(b"", 0)


def test_structure_counts_follow_file_order():
    vas = [0x1000, 0x200000, 1 << 30, 1 << 39]
    maps = [(va, 0x10000 + i * 4096, RX) for i, va in enumerate(vas)]
    ptf = build_tables(maps, 0)
    assert ptf.levels == structure_count(vas) == (1, 2, 3, 4)
    assert len(ptf) == 10 * 4096
    assert ptf.level_regions() == [(0, 1), (1, 3), (3, 6), (6, 10)]


def test_duplicate_mapping_rejected():
    with pytest.raises(PagingError):
        build_tables([(0x1000, 0x2000, RW), (0x1000, 0x3000, RW)], 0)


@st.composite
def mapping_sets(draw):
    n = draw(st.integers(1, 40))
    pages = draw(st.lists(st.integers(0, (1 << 36) - 1), min_size=n, max_size=n, unique=True))
    perms = draw(st.lists(st.sampled_from([RW, RX, Permissions(True, False, False)]), min_size=n, max_size=n))
    base = draw(st.integers(1, 1 << 20)) * 4096
    return [(p * 4096, (i + 1) * 4096, perm) for i, (p, perm) in enumerate(zip(pages, perms))], base


@given(mapping_sets(), st.lists(st.integers(0, (1 << 48) - 1), max_size=20))
def test_walk_agrees_with_byte_walker(ms, probes):
    maps, base = ms
    ptf = build_tables(maps, base)
    for va, pa, perm in maps:
        assert translate(ptf, va + 5) == (pa + 5, perm)
        assert slow_walk(ptf.data, base, va + 5) == (pa + 5, perm.w, perm.x)
    for va in probes:
        got = translate(ptf, va)
        ref = slow_walk(ptf.data, base, va)
        assert (got is None) == (ref is None)
        if got is not None:
            assert (got[0], got[1].w, got[1].x) == ref
