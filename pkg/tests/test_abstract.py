import pytest

from skrefine import isa, synth, toolchain
from skrefine.abstract import (
    ERROR_HALT,
    AbstractMachine,
    a_execute,
    a_init,
    a_interrupt,
    a_invariants,
    a_tick,
)
from skrefine.isa import Instruction, Opcode
from skrefine.refinement import OperationCall


@pytest.fixture
def art():
    return toolchain.generate(synth.two_cpu_policy())


@pytest.fixture
def st(art):
    return a_init(art.params_abstract, art.read_file)


def ticks(st, cpu, n):
    for _ in range(n):
        a_tick(st, cpu)


def test_init_state(st, art):
    assert st.maj_fp == st.cycles == 0
    assert [st.active_subject(c) for c in range(2)] == [0, 2]
    assert st.regs[0].ip == 0x10000
    assert bytes(st.vmem[0][0x10][: 8]) == art.policy.read_file("code/sub1.bin")[:8]
    assert a_invariants(st) == []


def test_golden_steps(st):
    ticks(st, 0, 40)
    assert st.clocks[0].minor_fp == 1 and st.active_subject(0) == 1
    ticks(st, 1, 80)
    k = st.clocks[1]
    assert k.ideal_maj_fp == 1 and not st.cpu_enabled(1)
    assert st.maj_fp == 0
    ticks(st, 0, 40)
    assert st.maj_fp == 1 and st.cycles == 0
    assert st.cpu_enabled(0) and st.cpu_enabled(1)
    assert st.active_subject(0) == 0 and st.active_subject(1) == 3
    assert a_invariants(st) == []


def test_full_cycle_returns_to_frame_zero(st):
    for _ in range(2):
        ticks(st, 0, 200)
        ticks(st, 1, 200)
    assert (st.maj_fp, st.cycles) == (0, 2)
    assert all(k.ticks == 0 and k.ideal_cycles == 2 for k in st.clocks)
    assert a_invariants(st) == []


def test_disabled_cpu_execute_is_noop(st):
    ticks(st, 1, 80)
    before = st.snapshot_json()
    assert a_execute(st, 1) == "noop"
    assert st.snapshot_json() == before


def test_execute_stores_into_own_page(st):
    for insn in (Instruction(Opcode.MOVI, 1, 0, 0x77), Instruction(Opcode.MOVI, 3, 0, 0x20005), Instruction(Opcode.STOREB, 3, 1, 0)):
        assert a_execute(st, 0, insn) == "ok"
    assert st.vmem[0][0x20][5] == 0x77
    assert st.dirty == {(0, 0x20)}


def test_channel_write_visible_to_reader(st):
    for insn in (Instruction(Opcode.MOVI, 1, 0, 9), Instruction(Opcode.MOVI, 3, 0, 0x40010), Instruction(Opcode.STOREB, 3, 1, 0)):
        a_execute(st, 0, insn)
    assert st.page_bytes(2, 0x40)[0x10] == 9
    a_execute(st, 1, Instruction(Opcode.MOVI, 3, 0, 0x40010))
    a_execute(st, 1, Instruction(Opcode.LOADB, 0, 3, 0))
    assert st.regs[2].gp[0] == 9


def test_write_to_read_only_channel_halts(st):
    a_execute(st, 1, Instruction(Opcode.MOVI, 3, 0, 0x40000))
    assert a_execute(st, 1, Instruction(Opcode.STOREB, 3, 0, 0)) == "halted"
    assert st.mode == ERROR_HALT
    assert a_tick(st, 0) == "halted"


def test_interrupt_routing(st):
    assert a_interrupt(st, 33) == "routed(2)"
    assert st.pending[2] == 1 << 1
    assert a_interrupt(st, 34) == "dropped"
    # injected on the next exec of the target
    a_execute(st, 1)
    assert st.pending[2] == 0
    assert st.regs[2].ir == 1 + 1  # vector v is held as v + 1


def test_invariant_ticks_at_cycle_length(st):
    st.clocks[0].ticks = st.params.sched.cycle_length
    assert "i4" in a_invariants(st)


def test_invariant_all_disabled(st):
    for k in st.clocks:
        k.ideal_maj_fp = 1
    assert "i19" in a_invariants(st)


def test_machine_wrapper(art):
    m = AbstractMachine(art.params_abstract, art.read_file)
    assert m.step(OperationCall("init")) == "ok"
    assert m.step(OperationCall("interrupt", (0, 33))) == "routed(2)"
    assert m.step(OperationCall("tick", 0)) == "ok"
    with pytest.raises(ValueError):
        m.step(OperationCall("reboot"))
