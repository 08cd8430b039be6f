import pytest
from hypothesis import given, strategies as st

from skrefine import isa
from skrefine.isa import Instruction, Opcode, RegisterFile


class FlatMemory:
    def __init__(self, size=0x2000, writable=True):
        self.buf = bytearray(size)
        self.writable = writable

    def fetch(self, addr):
        return bytes(self.buf[addr : addr + 8]) if addr + 8 <= len(self.buf) else None

    def load(self, addr):
        return self.buf[addr] if addr < len(self.buf) else None

    def store(self, addr, value):
        if not self.writable or addr >= len(self.buf):
            return False
        self.buf[addr] = value
        return True


def test_movi_encoding_bytes():
    assert isa.encode(Instruction(Opcode.MOVI, 1, 0, 7)) == bytes([1, 1, 0, 0, 7, 0, 0, 0])


def test_unknown_opcode_is_illegal():
    with pytest.raises(isa.IllegalInstruction):
        isa.decode(bytes([0xFF, 0, 0, 0, 0, 0, 0, 0]))


def test_storeb_round_trip():
    i = Instruction(Opcode.STOREB, 2, 0, 0)
    assert isa.decode(isa.encode(i)) == i


@given(st.sampled_from(list(Opcode)), st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_codec_round_trip(op, r1, r2, imm):
    i = Instruction(op, r1, r2, imm)
    assert isa.decode(isa.encode(i)) == i


def test_instruction_field_ranges():
    with pytest.raises(ValueError):
        Instruction(Opcode.MOVI, 4, 0, 0)
    with pytest.raises(ValueError):
        Instruction(Opcode.MOVI, 0, 0, 2**32)


def run(program, mem=None, steps=None, regs=None):
    mem = mem or FlatMemory()
    code = isa.assemble(program)
    mem.buf[: len(code)] = code
    regs = regs or RegisterFile()
    results = [isa.step(regs, mem) for _ in range(steps or len(program))]
    return regs, mem, results


def test_register_ops():
    regs, _, res = run([Instruction(Opcode.MOVI, 0, 0, 7), Instruction(Opcode.ADD, 0, 0, 1)])
    assert regs.gp[0] == 15 and regs.ip == 16 and res == ["ok", "ok"]


def test_add_wraps_at_64_bits():
    regs = RegisterFile(gp=[isa.MASK64, 1, 0, 0])
    _, _, _ = run([Instruction(Opcode.ADD, 0, 1, 0)], regs=regs)
    assert regs.gp[0] == 0


def test_load_store_byte_semantics():
    prog = [
        Instruction(Opcode.MOVI, 0, 0, 0x1234),
        Instruction(Opcode.MOVI, 3, 0, 0x1000),
        Instruction(Opcode.STOREB, 3, 0, 5),
        Instruction(Opcode.MOVI, 1, 0, 0xAB00),
        Instruction(Opcode.LOADB, 1, 3, 5),
    ]
    regs, mem, _ = run(prog)
    assert mem.buf[0x1005] == 0x34
    assert regs.gp[1] == 0xAB34  # upper bits preserved


def test_store_fault():
    _, _, res = run([Instruction(Opcode.STOREB, 0, 0, 0x100)], mem=FlatMemory(writable=False))
    assert res == ["fault"]


def test_jmp_rdir_vmcall_hlt():
    prog = [Instruction(Opcode.JMP, 0, 0, 16), Instruction(Opcode.HLT, 0, 0, 0), Instruction(Opcode.VMCALL, 0, 0, 0)]
    regs, _, res = run(prog, steps=2)
    assert res == ["ok", "vmcall"] and regs.ip == 24
    regs = RegisterFile(ip=8)
    regs, _, res = run(prog, regs=regs, steps=3)
    assert regs.ip == 8  # halted until an event arrives
    regs.ir = 3
    isa.step(regs, FlatMemory())  # fetches zeros: illegal
    regs = RegisterFile(ir=5)
    run([Instruction(Opcode.RDIR, 2, 0, 0)], regs=regs)
    assert regs.gp[2] == 5 and regs.ir == 0


def test_misaligned_ip_faults():
    assert isa.step(RegisterFile(ip=3), FlatMemory()) == "fault"


def test_injected_instruction_bypasses_fetch():
    regs = RegisterFile(ip=0x5000)
    assert isa.step(regs, FlatMemory(), Instruction(Opcode.MOVI, 1, 0, 9)) == "ok"
    assert regs.gp[1] == 9 and regs.ip == 0x5008


def test_inject_pending_lowest_bit_when_free():
    regs = RegisterFile()
    assert isa.inject_pending(regs, 0b1100) == 0b1000 and regs.ir == 3
    assert isa.inject_pending(regs, 0b1000) == 0b1000 and regs.ir == 3  # ir busy
