import numpy as np
import pytest
from hypothesis import given, strategies as st

from skrefine import _kernels
from skrefine.paging import build_tables
from skrefine.policy import Permissions

pytestmark = pytest.mark.skipif(not _kernels._HAVE_NUMBA, reason="numba not installed")

PERMS = [Permissions(True, True, False), Permissions(True, False, True), Permissions(True, False, False)]


def random_tables(rng, n):
    pages = rng.choice(1 << 24, size=n, replace=False)
    maps = [(int(p) * 4096, (i + 1) * 4096, PERMS[i % 3]) for i, p in enumerate(pages)]
    return build_tables(maps, 0x4000_0000), [m[0] for m in maps]


@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_walk_numba_matches_numpy(seed, n):
    rng = np.random.default_rng(seed)
    ptf, vas = random_tables(rng, n)
    words = ptf.words.copy()
    # corrupt a few words so all three status codes show up
    for j in rng.choice(words.shape[0], size=3, replace=False):
        words[j] = np.uint64(int(rng.integers(0, 1 << 62)))
    probes = np.array(vas + rng.integers(0, 1 << 36, size=16).tolist(), dtype=np.uint64)
    a = _kernels.walk_pages_numba(words, np.uint64(ptf.pt_base), probes)
    b = _kernels.walk_pages_numpy(words, ptf.pt_base, probes)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_unmarked_numba_matches_numpy(seed, n):
    rng = np.random.default_rng(seed)
    ptf, vas = random_tables(rng, n)
    words = ptf.words.copy()
    words[rng.integers(words.shape[0])] |= np.uint64(1)
    _, _, _, used = _kernels.walk_pages_numpy(words, ptf.pt_base, np.array(vas, dtype=np.uint64))
    np.testing.assert_array_equal(
        _kernels.unmarked_present_numba(words, used), _kernels.unmarked_present_numpy(words, used)
    )


def test_clean_tables_have_no_unmarked_entries():
    ptf, vas = random_tables(np.random.default_rng(1), 50)
    _, _, status, used = _kernels.walk_pages(ptf.words, ptf.pt_base, np.array(vas, dtype=np.uint64))
    assert (status == _kernels.ST_OK).all()
    assert _kernels.unmarked_present(ptf.words, used).size == 0


def test_env_switch_selects_numpy(monkeypatch):
    import importlib

    monkeypatch.setenv("SKREFINE_NUMBA", "0")
    mod = importlib.reload(_kernels)
    try:
        assert mod.USE_NUMBA is False
    finally:
        monkeypatch.delenv("SKREFINE_NUMBA")
        importlib.reload(_kernels)
