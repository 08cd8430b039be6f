"""Eight-instruction byte-addressed guest ISA shared by both machine models.

Every instruction is 8 bytes: opcode, reg1, reg2, pad, imm (u32 little-endian).

=======  ==========================================================
MOVI     reg1 := imm
LOADB    low byte of reg1 := mem[reg2 + imm]
STOREB   mem[reg1 + imm] := low byte of reg2
ADD      reg1 := reg1 + reg2 + imm  (mod 2**64)
JMP      ip := imm
RDIR     reg1 := ir; ir := 0
VMCALL   hypercall; no architectural effect besides ip += 8
HLT      wait: ip stays put until an event is pending in ir
=======  ==========================================================
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Protocol

MASK64 = (1 << 64) - 1
INSN_SIZE = 8
NREGS = 4

_FMT = struct.Struct("<BBBxI")


class Opcode(IntEnum):
    MOVI = 0x01
    LOADB = 0x02
    STOREB = 0x03
    ADD = 0x04
    JMP = 0x05
    RDIR = 0x06
    VMCALL = 0x07
    HLT = 0x08


class IllegalInstruction(Exception):
    """Raised when an 8-byte word does not decode to a known instruction."""


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    reg1: int = 0
    reg2: int = 0
    imm: int = 0

    def __post_init__(self):
        if not (0 <= self.reg1 < NREGS and 0 <= self.reg2 < NREGS):
            raise ValueError("register index out of range")
        if not 0 <= self.imm <= 0xFFFFFFFF:
            raise ValueError("immediate does not fit in 32 bits")

    def __str__(self):
        return f"{self.opcode.name} r{self.reg1}, r{self.reg2}, {self.imm:#x}"


def encode(insn: Instruction) -> bytes:
    return _FMT.pack(int(insn.opcode), insn.reg1, insn.reg2, insn.imm)


def decode(raw: bytes) -> Instruction:
    if len(raw) != INSN_SIZE:
        raise IllegalInstruction(f"need {INSN_SIZE} bytes, got {len(raw)}")
    op, r1, r2, imm = _FMT.unpack(raw)
    try:
        opcode = Opcode(op)
    except ValueError:
        raise IllegalInstruction(f"unknown opcode {op:#04x}") from None
    if r1 >= NREGS or r2 >= NREGS:
        raise IllegalInstruction(f"bad register operand in {raw.hex()}")
    return Instruction(opcode, r1, r2, imm)


def assemble(program) -> bytes:
    return b"".join(encode(i) for i in program)


@dataclass(slots=True)
class RegisterFile:
    gp: list = field(default_factory=lambda: [0] * NREGS)
    ip: int = 0
    sp: int = 0
    ir: int = 0

    def copy(self) -> "RegisterFile":
        return RegisterFile(list(self.gp), self.ip, self.sp, self.ir)

    def as_tuple(self):
        return (*self.gp, self.ip, self.sp, self.ir)

    def to_json(self):
        return {"gp": list(self.gp), "ip": self.ip, "sp": self.sp, "ir": self.ir}


class GuestMemory(Protocol):
    """Memory view of the running subject. Returns None / False on a fault."""

    def fetch(self, addr: int) -> bytes | None: ...

    def load(self, addr: int) -> int | None: ...

    def store(self, addr: int, value: int) -> bool: ...


# step results
OK = "ok"
FAULT = "fault"
VMCALL = "vmcall"


def inject_pending(regs: RegisterFile, pending: int) -> int:
    """Deliver the lowest pending vector into ``ir`` if the subject can take it.

    Returns the pending bit-vector after delivery.
    """
    if pending and regs.ir == 0:
        v = (pending & -pending).bit_length() - 1
        regs.ir = v + 1
        return pending & ~(1 << v)
    return pending


def step(regs: RegisterFile, mem: GuestMemory, insn: Instruction | None = None) -> str:
    """Execute one instruction on ``regs``/``mem``.

    When ``insn`` is given it replaces the fetched instruction (used by
    property tests to force a particular access); ip still advances.
    """
    if insn is None:
        if regs.ip % INSN_SIZE:
            return FAULT
        raw = mem.fetch(regs.ip)
        if raw is None:
            return FAULT
        try:
            insn = decode(raw)
        except IllegalInstruction:
            return FAULT

    op = insn.opcode
    gp = regs.gp
    nxt = (regs.ip + INSN_SIZE) & MASK64
    result = OK
    if op is Opcode.MOVI:
        gp[insn.reg1] = insn.imm
    elif op is Opcode.LOADB:
        b = mem.load((gp[insn.reg2] + insn.imm) & MASK64)
        if b is None:
            return FAULT
        gp[insn.reg1] = (gp[insn.reg1] & ~0xFF) | b
    elif op is Opcode.STOREB:
        if not mem.store((gp[insn.reg1] + insn.imm) & MASK64, gp[insn.reg2] & 0xFF):
            return FAULT
    elif op is Opcode.ADD:
        gp[insn.reg1] = (gp[insn.reg1] + gp[insn.reg2] + insn.imm) & MASK64
    elif op is Opcode.JMP:
        nxt = insn.imm
    elif op is Opcode.RDIR:
        gp[insn.reg1] = regs.ir
        regs.ir = 0
    elif op is Opcode.VMCALL:
        result = VMCALL
    elif op is Opcode.HLT:
        if regs.ir == 0:
            nxt = regs.ip
    regs.ip = nxt
    return result
