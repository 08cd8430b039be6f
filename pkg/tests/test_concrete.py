import pytest

from skrefine import synth, toolchain
from skrefine.concrete import (
    ERROR_HALT,
    ConcreteMachine,
    c_execute,
    c_init,
    c_interrupt,
    c_invariants,
    c_tick,
)
from skrefine.isa import Instruction, Opcode
from skrefine.refinement import OperationCall


@pytest.fixture
def art():
    return toolchain.generate(synth.two_cpu_policy())


@pytest.fixture
def st(art):
    return c_init(art.params_concrete, bytes(art.image.data), art.pts)


def ticks(st, cpu, n):
    for _ in range(n):
        c_tick(st, cpu)


def test_init_state(st):
    assert [c.vmptr for c in st.cpus] == [0, 2]
    assert [c.vmx_timer for c in st.cpus] == [40, 80]
    assert c_invariants(st) == []


def test_golden_steps(st):
    ticks(st, 0, 40)
    cpu0 = st.cpus[0]
    assert cpu0.minor_frame == 1 and cpu0.vmx_timer == 40 and cpu0.vmptr == 1
    ticks(st, 1, 80)
    assert st.cpus[1].in_barrier and st.wait_count == 1
    ticks(st, 0, 40)
    assert st.cmsc == 80 and st.current_major_frame == 1 and st.wait_count == 0
    assert (st.cpus[0].vmx_timer, st.cpus[0].vmptr) == (80, 0)
    assert (st.cpus[1].vmx_timer, st.cpus[1].vmptr) == (60, 3)
    assert c_invariants(st) == []


def test_barrier_ticks_only_advance_tsc(st):
    ticks(st, 1, 145)  # 65 ticks spent waiting
    assert st.cpus[1].tsc == 145 and st.cpus[1].in_barrier
    ticks(st, 0, 80)
    # cpu 1 is 65 ticks into the new frame: second minor frame is not reached yet
    assert st.cpus[1].minor_frame == 1 and st.cpus[1].vmx_timer == 55 and st.cpus[1].vmptr == 2


def test_full_cycle_wraps(st):
    ticks(st, 0, 200)
    ticks(st, 1, 200)
    assert (st.current_major_frame, st.current_cycle, st.cmsc) == (0, 1, 200)
    assert [c.vmptr for c in st.cpus] == [0, 2]


def test_register_save_and_restore(st):
    c_execute(st, 0, Instruction(Opcode.MOVI, 1, 0, 1234))
    ticks(st, 0, 40)
    assert st.subject_descs[0].gp[1] == 1234
    assert st.cpus[0].regs.gp[1] == 0  # sub2 loaded
    ticks(st, 1, 80)
    ticks(st, 0, 40)
    assert st.cpus[0].regs.gp[1] == 1234


def test_skip_register_save_loses_state(art):
    st = c_init(art.params_concrete, bytes(art.image.data), art.pts, "skip_register_save")
    c_execute(st, 0, Instruction(Opcode.MOVI, 1, 0, 1234))
    ticks(st, 0, 40)
    assert st.subject_descs[0].gp[1] == 0


def test_store_goes_through_page_tables(st, art):
    for insn in (Instruction(Opcode.MOVI, 1, 0, 0x5A), Instruction(Opcode.MOVI, 3, 0, 0x20001), Instruction(Opcode.STOREB, 3, 1, 0)):
        assert c_execute(st, 0, insn) == "ok"
    data = art.bpolicy.phys_by_name()["sub1.data"]
    assert st.pmem[data.address + 1] == 0x5A
    assert st.dirty == {data.address // 4096}


def test_unmapped_access_halts(st):
    c_execute(st, 0, Instruction(Opcode.MOVI, 3, 0, 0x900000))
    assert c_execute(st, 0, Instruction(Opcode.LOADB, 0, 3, 0)) == "halted"
    assert st.mode == ERROR_HALT


def test_interrupt_leaves_guest_unchanged(st):
    c_execute(st, 0, Instruction(Opcode.MOVI, 1, 0, 7))
    regs = st.cpus[0].regs.copy()
    assert c_interrupt(st, 0, 33) == "routed(2)"
    assert st.cpus[0].regs == regs
    assert st.global_events[2] == 2
    assert c_interrupt(st, 1, 200) == "dropped"


def test_barrier_execute_is_noop(st):
    ticks(st, 1, 80)
    assert c_execute(st, 1) == "noop"


def test_invariant_c2_wait_count(st):
    st.wait_count = 1
    assert "c2" in c_invariants(st)


def test_invariant_c3_all_waiting(st):
    for c in st.cpus:
        c.in_barrier = True
    st.wait_count = 2
    assert "c3" in c_invariants(st)


def test_invariant_c1_frame_overrun(st):
    for c in st.cpus:
        c.tsc = 80
    assert "c1" in c_invariants(st)


def test_machine_wrapper(art):
    m = ConcreteMachine(art.params_concrete, art.image.data, art.pts)
    assert m.step(OperationCall("init")) == "ok"
    assert m.step(OperationCall("interrupt", (1, 33))) == "routed(2)"
    assert m.step(OperationCall("exec", 1)) == "ok"
    assert m.state.cpus[1].regs.ir == 2
