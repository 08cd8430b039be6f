"""Hot loops of the condition checker: batched page walks and the validity scan.

Each kernel exists twice: a numba ``@njit`` version and a vectorized numpy
version.  ``SKREFINE_NUMBA=0`` in the environment (or a missing numba)
selects the numpy path; both are always importable for cross-checking.
"""

from __future__ import annotations

import os

import numpy as np

PRESENT = np.uint64(1)
WRITABLE = np.uint64(2)
NX = np.uint64(1 << 63)
ADDR_MASK = np.uint64(0x000F_FFFF_FFFF_F000)

# walk status codes
ST_OK = 0
ST_NOT_PRESENT = 1
ST_CORRUPT = 2

# permission bits in walk output
P_R, P_W, P_X = 1, 2, 4

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("SKREFINE_NUMBA", "1") not in ("0", "false", "no")


def walk_pages_numpy(words, pt_base, vas):
    """Walk every address in ``vas`` through the paging structures ``words``.

    Returns ``(pa, perm, status, used)`` where ``used[i, l]`` is the word index
    of the level-``l`` entry consulted for ``vas[i]`` (-1 if not reached).
    """
    vas = np.asarray(vas, dtype=np.uint64)
    n = vas.shape[0]
    nwords = words.shape[0]
    span = np.uint64(nwords * 8)
    base = np.uint64(pt_base)

    pa = np.zeros(n, dtype=np.uint64)
    perm = np.zeros(n, dtype=np.uint8)
    status = np.full(n, ST_OK, dtype=np.int8)
    used = np.full((n, 4), -1, dtype=np.int64)

    struct = np.zeros(n, dtype=np.int64)
    writable = np.ones(n, dtype=bool)
    nx = np.zeros(n, dtype=bool)
    live = np.ones(n, dtype=bool)
    for level in range(4):
        shift = np.uint64(39 - 9 * level)
        idx = ((vas >> shift) & np.uint64(511)).astype(np.int64)
        slot = struct * 512 + idx
        used[live, level] = slot[live]
        entry = np.zeros(n, dtype=np.uint64)
        entry[live] = words[slot[live]]
        absent = live & ((entry & PRESENT) == 0)
        status[absent] = ST_NOT_PRESENT
        live &= ~absent
        writable &= (entry & WRITABLE) != 0
        nx |= (entry & NX) != 0
        target = entry & ADDR_MASK
        if level < 3:
            off = target - base  # wraps for target < base; caught by the span test
            bad = live & ((target < base) | (off >= span))
            status[bad] = ST_CORRUPT
            live &= ~bad
            struct = np.where(live, (off // np.uint64(4096)).astype(np.int64), 0)
        else:
            pa[live] = target[live] | (vas[live] & np.uint64(0xFFF))
    perm[live] = P_R | np.where(writable[live], P_W, 0) | np.where(nx[live], 0, P_X)
    return pa, perm, status, used


def unmarked_present_numpy(words, used):
    marked = np.zeros(words.shape[0], dtype=bool)
    flat = used.ravel()
    marked[flat[flat >= 0]] = True
    return np.flatnonzero(((words & PRESENT) != 0) & ~marked)


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def walk_pages_numba(words, pt_base, vas):
        n = vas.shape[0]
        nwords = words.shape[0]
        pa = np.zeros(n, dtype=np.uint64)
        perm = np.zeros(n, dtype=np.uint8)
        status = np.zeros(n, dtype=np.int8)
        used = np.full((n, 4), -1, dtype=np.int64)
        base = np.uint64(pt_base)
        for i in range(n):
            va = vas[i]
            struct = 0
            w = True
            x = True
            for level in range(4):
                shift = np.uint64(39 - 9 * level)
                slot = struct * 512 + np.int64((va >> shift) & np.uint64(511))
                used[i, level] = slot
                e = words[slot]
                if e & np.uint64(1) == 0:
                    status[i] = 1
                    break
                if e & np.uint64(2) == 0:
                    w = False
                if e >> np.uint64(63):
                    x = False
                target = e & np.uint64(0x000FFFFFFFFFF000)
                if level < 3:
                    if target < base or target - base >= np.uint64(nwords * 8):
                        status[i] = 2
                        break
                    struct = np.int64((target - base) // np.uint64(4096))
                else:
                    pa[i] = target | (va & np.uint64(0xFFF))
                    perm[i] = 1 | (2 if w else 0) | (4 if x else 0)
        return pa, perm, status, used

    @numba.njit(cache=True)
    def unmarked_present_numba(words, used):
        marked = np.zeros(words.shape[0], dtype=np.bool_)
        for i in range(used.shape[0]):
            for level in range(4):
                s = used[i, level]
                if s >= 0:
                    marked[s] = True
        count = 0
        for j in range(words.shape[0]):
            if words[j] & np.uint64(1) and not marked[j]:
                count += 1
        out = np.empty(count, dtype=np.int64)
        k = 0
        for j in range(words.shape[0]):
            if words[j] & np.uint64(1) and not marked[j]:
                out[k] = j
                k += 1
        return out

else:  # pragma: no cover
    walk_pages_numba = walk_pages_numpy
    unmarked_present_numba = unmarked_present_numpy


def walk_pages(words, pt_base, vas):
    vas = np.ascontiguousarray(vas, dtype=np.uint64)
    if USE_NUMBA:
        return walk_pages_numba(words, np.uint64(pt_base), vas)
    return walk_pages_numpy(words, pt_base, vas)


def unmarked_present(words, used):
    if USE_NUMBA:
        return unmarked_present_numba(words, used)
    return unmarked_present_numpy(words, used)
