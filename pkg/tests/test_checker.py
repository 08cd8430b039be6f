import copy

import numpy as np
import pytest

from skrefine import checker, synth, toolchain
from skrefine.paging import PagingStructureFile
from skrefine.policy import BPolicy, BSubject, ContentSource, PhysComponent, VirtComponent, ZERO


def bpolicy(phys, subjects):
    return BPolicy([PhysComponent(n, a, s, ZERO) for n, a, s in phys], subjects)


def virt(logical, physical, size, rwe="rw-", channel=False, va=0x10000):
    return VirtComponent(logical, va, size, rwe, physical, channel)


def test_adjacent_components_do_not_overlap():
    b = bpolicy([("a", 0x1000, 0x1000), ("b", 0x2000, 0x1000)], [])
    assert checker.check_phys_overlap(b) == []


def test_one_byte_overlap_detected():
    b = bpolicy([("a", 0x1000, 0x1001), ("b", 0x2000, 0x1000)], [])
    (f,) = checker.check_phys_overlap(b)
    assert f.message == checker.ILLEGAL_SHARING and f.address == 0x2000


def test_interior_overlap_detected():
    b = bpolicy([("a", 0x1000, 0x2000), ("b", 0x2800, 0x1000)], [])
    assert [f.message for f in checker.check_phys_overlap(b)] == [checker.ILLEGAL_SHARING]


def test_containment_detected():
    b = bpolicy([("a", 0x1000, 0x10000), ("b", 0x3000, 0x1000), ("c", 0x20000, 0x1000)], [])
    assert len(checker.check_phys_overlap(b)) == 1


def test_sharing_rules():
    phys = [("x", 0x1000, 0x1000)]
    both_channels = [
        BSubject("s0", 0, [virt("x", "x", 0x1000, "rw-", True)]),
        BSubject("s1", 0, [virt("x", "x", 0x1000, "r--", True)]),
    ]
    assert checker.check_virt_overlap(bpolicy(phys, both_channels)) == []
    read_only = [
        BSubject("s0", 0, [virt("x", "x", 0x1000, "r--")]),
        BSubject("s1", 0, [virt("x", "x", 0x1000, "r-x")]),
    ]
    assert checker.check_virt_overlap(bpolicy(phys, read_only)) == []
    undeclared = copy.deepcopy(both_channels)
    undeclared[0].virt[0].channel = False
    (f,) = checker.check_virt_overlap(bpolicy(phys, undeclared))
    assert f.message == checker.ILLEGAL_SHARING and f.subject == "s0/s1"


def test_clean_two_cpu_config_passes():
    art = toolchain.generate(synth.two_cpu_policy())
    rep = checker.check_artifacts(art)
    assert rep.ok and rep.findings == []
    assert set(rep.millis) == set(checker.CONDITIONS)
    js = rep.to_json()
    assert all(js[c]["pass"] for c in checker.CONDITIONS)


def test_finding_messages_per_condition():
    p = synth.random_policy(np.random.default_rng(1), nroutes=1)
    msgs = {
        "pt_redirect": checker.ADDRESS_MISMATCH,
        "perm_write": checker.RWE_MISMATCH,
        "spurious_present": checker.INVALID_ENTRY,
    }
    for fault, msg in msgs.items():
        rep = checker.check_artifacts(toolchain.generate(p, fault, rng=np.random.default_rng(0)))
        assert any(f.message.startswith(msg) for f in rep.findings), fault


def test_spurious_entry_reports_index():
    art = toolchain.generate(synth.two_cpu_policy(), "spurious_present", rng=np.random.default_rng(0))
    (f,) = checker.check_artifacts(art).findings
    assert f.message == f"{checker.INVALID_ENTRY} {f.entry}"
    owner = next(i for i, s in enumerate(art.bpolicy.subjects) if s.name == f.subject)
    assert art.pts[owner].words[f.entry] & 1


def test_pt_redirect_finding_names_subject():
    art = toolchain.generate(synth.two_cpu_policy(), "pt_redirect")
    fs = [f for f in checker.check_artifacts(art).findings if f.message == checker.ADDRESS_MISMATCH]
    assert fs and fs[0].subject == "sub1"


def test_every_page_checked_once():
    # a flipped leaf in a large component is found at its exact address
    art = toolchain.generate(synth.single_subject_policy(300), "perm_write", rng=np.random.default_rng(4))
    fs = checker.check_artifacts(art).findings
    assert len(fs) == 1 and fs[0].address is not None


@pytest.mark.parametrize("seed", range(25))
def test_fast_and_naive_agree_on_micro_configs(seed):
    rng = np.random.default_rng(seed)
    p = synth.micro_policy(rng)
    fault = [None, "overlap", "pt_redirect", "perm_nx", "spurious_present", "image_byte", "pt_clear_present"][seed % 7]
    try:
        art = toolchain.generate(p, fault, rng=rng)
    except toolchain.FaultNotApplicable:
        art = toolchain.generate(p, rng=rng)
    fast = checker.check_artifacts(art)
    naive = checker.naive_check(art.bpolicy, art.pts, art.image, 1 << 22, art.read_file)
    assert {c: fast.passed[c] for c in naive.checked} == naive.passed


def test_naive_refuses_large_bounds():
    art = toolchain.generate(synth.two_cpu_policy())
    with pytest.raises(ValueError):
        checker.naive_check(art.bpolicy, art.pts, art.image, checker.NAIVE_MAX_BOUND * 2, art.read_file)
    with pytest.raises(ValueError):
        checker.naive_check(art.bpolicy, art.pts, art.image, 0x20000, art.read_file)


def test_truncated_image_fails_content():
    art = toolchain.generate(synth.two_cpu_policy())
    art.image.data = art.image.data[: len(art.image.data) // 2]
    assert "R4" in checker.check_artifacts(art).failed_conditions()
