"""One test per headline acceptance criterion."""

import time

import numpy as np
import pytest

from skrefine import checker, cli, harness, synth, toolchain
from skrefine.abstract import a_init, a_tick
from skrefine.concrete import c_init, c_tick
from skrefine.policy import PAGE
from skrefine.refinement import AbstractSetMachine, OperationCall, SetMachine, check_lockstep, set_glue

# faults whose effect lies below the oracle's bound (spurious_pdpt aliases far above it)
ORACLE_FAULTS = [None, *(f for f in toolchain.FAULTS if f != "spurious_pdpt")]


def test_oracle_equivalence_on_micro_configs():
    bound = 1 << 22
    disagreements, faulted = [], 0
    for seed in range(220):
        rng = np.random.default_rng(seed)
        p = synth.micro_policy(rng)
        assert len(p.subjects) <= 3
        for s in p.subjects:
            assert sum(size for _, _, size, *_ in s.vmem_components(p)) // PAGE <= 16
        fault = ORACLE_FAULTS[seed % len(ORACLE_FAULTS)]
        try:
            art = toolchain.generate(p, fault, rng=rng)
            faulted += fault is not None
        except toolchain.FaultNotApplicable:
            art = toolchain.generate(p, rng=rng)
        fast = checker.check_artifacts(art)
        naive = checker.naive_check(art.bpolicy, art.pts, art.image, bound, art.read_file)
        got = {c: fast.passed[c] for c in naive.checked}
        if got != naive.passed:
            disagreements.append((seed, fault, got, naive.passed))
    assert disagreements == []
    assert faulted >= 150


def test_fault_detection_sixty_of_sixty():
    hits = 0
    for fault in toolchain.PRIMARY_FAULTS:
        for seed in range(10):
            p = synth.random_policy(np.random.default_rng(seed))
            art = toolchain.generate(p, fault, rng=np.random.default_rng(seed))
            failed = checker.check_artifacts(art).failed_conditions()
            assert failed == {toolchain.FAULTS[fault]}, (fault, seed, failed)
            hits += 1
    assert hits == 60


def _validity_seconds(art, reps=50, rounds=7):
    checker.check_validity(art.bpolicy, art.pts)  # compile / warm caches
    best = float("inf")
    for _ in range(rounds):
        t0 = time.perf_counter()
        for _ in range(reps):
            checker.check_validity(art.bpolicy, art.pts)
        best = min(best, (time.perf_counter() - t0) / reps)
    return best


def test_validity_check_scaling():
    times = []
    for n in (1024, 2048, 4096):
        art = toolchain.generate(synth.single_subject_policy(n))
        assert checker.check_validity(art.bpolicy, art.pts) == []
        times.append(_validity_seconds(art))
    assert all(t < 2.0 for t in times), times
    assert times[1] / times[0] <= 3 and times[2] / times[1] <= 3, times


def test_desk_scale_throughput(tmp_path, capsys):
    p = synth.throughput_policy()
    assert len(p.subjects) == 16 and p.ncpus == 4
    art = toolchain.generate(p)
    used = sum(v.size for s in art.bpolicy.subjects for v in s.virt)
    assert used >= 32 << 20
    toolchain.write_artifacts(art, str(tmp_path))
    t0 = time.perf_counter()
    code = cli.main(["check", "--config", str(tmp_path)])
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    assert code == 0
    assert elapsed < 10.0, elapsed


@pytest.mark.slow
def test_lockstep_refinement_on_random_policies():
    t0 = time.perf_counter()
    failures = []
    for seed in range(100):
        p = synth.random_policy(np.random.default_rng(seed))
        assert 2 <= p.ncpus <= 4 and 4 <= len(p.subjects) <= 16 and p.channels
        art = toolchain.generate(p)
        verdict = harness.lockstep_run(art, steps=10_000, seed=seed)
        if not verdict:
            failures.append((seed, str(verdict)))
    assert failures == []
    assert time.perf_counter() - t0 < 600


def test_two_cpu_golden_trace():
    art = toolchain.generate(synth.two_cpu_policy())
    a = a_init(art.params_abstract, art.read_file)
    c = c_init(art.params_concrete, bytes(art.image.data), art.pts)

    def tick(cpu, n):
        for _ in range(n):
            a_tick(a, cpu)
            c_tick(c, cpu)

    tick(0, 40)
    assert (c.cpus[0].minor_frame, c.cpus[0].vmx_timer, c.cpus[0].vmptr) == (1, 40, 1)
    assert (a.clocks[0].minor_fp, a.active_subject(0)) == (1, 1)
    tick(1, 80)
    assert c.cpus[1].in_barrier and c.wait_count == 1
    assert not a.cpu_enabled(1) and a.clocks[1].ideal_maj_fp == 1 and a.maj_fp == 0
    tick(0, 40)
    assert (c.cmsc, c.current_major_frame, c.wait_count) == (80, 1, 0)
    assert [cpu.vmx_timer for cpu in c.cpus] == [80, 60]
    assert [cpu.vmptr for cpu in c.cpus] == [0, 3]
    assert a.maj_fp == 1 and [a.active_subject(q) for q in (0, 1)] == [0, 3]
    assert harness.glue_check(a, c)


def test_set_machine_example():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        t = rng.permutation(4).tolist()
        n = int(rng.integers(1, 30))
        trace = [OperationCall(str(rng.choice(["add", "elem"])), int(rng.integers(4))) for _ in range(n)]
        assert check_lockstep(AbstractSetMachine(4), SetMachine(4, t), trace, set_glue)
    # with a non-injective T, some add/elem pair diverges by the third operation after init
    caught = None
    for x in range(4):
        for y in range(4):
            trace = [OperationCall("add", x), OperationCall("elem", y), OperationCall("elem", x)]
            v = check_lockstep(AbstractSetMachine(4), SetMachine(4, [0, 0, 1, 2]), trace, lambda a, c: True)
            if not v:
                caught = v
                break
        if caught:
            break
    assert caught is not None and caught.step - 1 <= 3 and caught.kind == "output"


def test_security_properties():
    for seed in range(50):
        p = synth.random_policy(np.random.default_rng(seed))
        art = toolchain.generate(p)
        assert harness.no_exfiltration(art, seed), seed
        assert harness.no_infiltration(art, seed), seed
        assert harness.temporal_separation(art, seed), seed
    p = synth.two_cpu_policy()
    assert not harness.no_exfiltration(p, 0, fault="pt_redirect")
    assert not harness.no_infiltration(p, 0, fault="pt_redirect")
    assert not harness.temporal_separation(p, 0, concrete_fault="skip_register_save")


def test_condition_r_is_necessary():
    art = toolchain.generate(synth.two_cpu_policy(), "pt_redirect")
    assert checker.check_artifacts(art).failed_conditions() == {"R1"}
    verdict = harness.lockstep_run(art, [OperationCall("exec", 0)] * 20, force=True)
    assert not verdict and verdict.kind == "glue" and verdict.reason.split(": ", 1)[1].startswith("g2")
