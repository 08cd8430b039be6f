"""Concrete kernel model: one physical memory, page tables, VMCSs and per-CPU VT-x state.

The handler semantics follow the generated kernel: a VMX preemption timer
per CPU ends each minor frame; at the end of a major frame the CPU waits in
a sense-reversal barrier, and the last CPU to arrive releases everyone,
moving the major-frame start (cmsc) forward.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

from . import isa
from .isa import RegisterFile
from .paging import PageTableCorruption, PagingStructureFile
from .policy import PAGE
from .refinement import OperationCall
from .toolchain import ParamsConcrete

RUNNING = "running"
ERROR_HALT = "error_halt"
OPERATIONS = frozenset({"init", "exec", "tick", "interrupt"})
MASK32 = (1 << 32) - 1
MASK64 = (1 << 64) - 1

# model-level fault switch for temporal-separation tests
CONCRETE_FAULTS = ("skip_register_save",)


@dataclass
class Vmcs:
    regs: RegisterFile
    pt_id: int


@dataclass
class CpuState:
    vmptr: int | None
    eptp: int | None
    vmx_timer: int
    tsc: int = 0
    in_barrier: bool = False
    minor_frame: int = 0
    regs: RegisterFile = field(default_factory=RegisterFile)  # live guest registers


@dataclass
class ConcreteState:
    params: ParamsConcrete
    pmem: bytearray
    pts: list
    vmcss: list
    cpus: list
    subject_descs: list
    cmsc: int = 0
    current_major_frame: int = 0
    current_cycle: int = 0
    wait_count: int = 0
    global_events: list = field(default_factory=list)
    mode: str = RUNNING
    fault: str | None = None
    dirty: set = field(default_factory=set)  # physical page numbers written
    _tlb: list = field(default_factory=list, repr=False)

    def active_subject(self, c: int) -> int:
        cpu = self.cpus[c]
        return self.params.sched_plans[self.current_major_frame][c][cpu.minor_frame][0]

    def deadline(self, c: int) -> int:
        return self.params.sched_plans[self.current_major_frame][c][self.cpus[c].minor_frame][1]

    def translate(self, s: int, va: int):
        """(physical page base, Permissions) for ``va`` under subject ``s``'s tables, or None."""
        page = va // PAGE
        tlb = self._tlb[s]
        if page not in tlb:
            try:
                _, pa, perm = self.pts[s].walk(page * PAGE)
            except (PageTableCorruption, ValueError):
                pa, perm = None, None
            tlb[page] = None if pa is None or pa + PAGE > len(self.pmem) else (pa, perm)
        return tlb[page]

    def clear_dirty(self):
        self.dirty.clear()

    def copy(self) -> "ConcreteState":
        params, pts = self.params, self.pts
        self.params, self.pts = None, None
        try:
            dup = copy.deepcopy(self)
        finally:
            self.params, self.pts = params, pts
        dup.params, dup.pts = params, pts
        return dup

    def snapshot(self) -> dict:
        return {
            "mode": self.mode,
            "cmsc": self.cmsc,
            "current_major_frame": self.current_major_frame,
            "current_cycle": self.current_cycle,
            "wait_count": self.wait_count,
            "global_events": list(self.global_events),
            "subject_descs": [r.to_json() for r in self.subject_descs],
            "cpus": [
                {
                    "vmptr": c.vmptr,
                    "eptp": c.eptp,
                    "vmx_timer": c.vmx_timer,
                    "tsc": c.tsc,
                    "in_barrier": c.in_barrier,
                    "minor_frame": c.minor_frame,
                    "regs": c.regs.to_json(),
                }
                for c in self.cpus
            ],
            "pmem": hashlib.sha256(self.pmem).hexdigest()[:16],
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))


class _GuestView:
    """isa.GuestMemory through subject ``s``'s paging structures."""

    def __init__(self, st: ConcreteState, s: int):
        self.st, self.s = st, s

    def _pa(self, addr, need_w=False, need_x=False):
        t = self.st.translate(self.s, addr)
        if t is None:
            return None
        base, perm = t
        if (need_w and not perm.w) or (need_x and not perm.x):
            return None
        return base + addr % PAGE

    def fetch(self, addr):
        pa = self._pa(addr, need_x=True)
        return None if pa is None else bytes(self.st.pmem[pa : pa + isa.INSN_SIZE])

    def load(self, addr):
        pa = self._pa(addr)
        return None if pa is None else self.st.pmem[pa]

    def store(self, addr, value):
        pa = self._pa(addr, need_w=True)
        if pa is None:
            return False
        self.st.pmem[pa] = value
        self.st.dirty.add(pa // PAGE)
        return True


def c_init(v: ParamsConcrete, image: bytes, pts: list, fault: str | None = None) -> ConcreteState:
    if fault is not None and fault not in CONCRETE_FAULTS:
        raise ValueError(f"unknown concrete fault {fault!r}")
    if len(pts) != v.nsubs:
        raise ValueError(f"{len(pts)} paging-structure files for {v.nsubs} subjects")
    vmcss = [Vmcs(RegisterFile(ip=s.ip, sp=s.sp), s.pt_id) for s in v.subject_specs]
    descs = [RegisterFile(ip=s.ip, sp=s.sp) for s in v.subject_specs]
    cpus = []
    for c in range(v.ncpus):
        s, deadline = v.sched_plans[0][c][0]
        cpus.append(CpuState(s, vmcss[s].pt_id, deadline, regs=descs[s].copy()))
    return ConcreteState(
        params=v,
        pmem=bytearray(image),
        pts=list(pts),
        vmcss=vmcss,
        cpus=cpus,
        subject_descs=descs,
        global_events=[0] * v.nsubs,
        fault=fault,
        _tlb=[{} for _ in range(v.nsubs)],
    )


def _vm_exit(st: ConcreteState, c: int):
    """Save live guest registers to the VMCS and the subject descriptor."""
    cpu = st.cpus[c]
    s = cpu.vmptr
    st.vmcss[s].regs = cpu.regs.copy()
    if st.fault != "skip_register_save":
        st.subject_descs[s] = cpu.regs.copy()


def _launch(st: ConcreteState, c: int):
    """Load the scheduled subject of CPU ``c``'s current minor frame and arm the timer."""
    cpu = st.cpus[c]
    s = st.active_subject(c)
    cpu.vmptr = s
    cpu.eptp = st.vmcss[s].pt_id
    st.vmcss[s].regs = st.subject_descs[s].copy()
    cpu.regs = st.subject_descs[s].copy()
    cpu.vmx_timer = (st.deadline(c) - (cpu.tsc - st.cmsc)) & MASK32


def _enter_barrier(st: ConcreteState, c: int):
    st.cpus[c].in_barrier = True
    st.cpus[c].vmptr = None
    st.wait_count += 1


def _release(st: ConcreteState):
    """Last CPU arrived: advance the major frame and relaunch every CPU."""
    v = st.params
    while st.wait_count == v.ncpus:
        st.wait_count = 0
        st.cmsc += v.major_frames[st.current_major_frame]
        st.current_major_frame += 1
        if st.current_major_frame == len(v.major_frames):
            st.current_major_frame = 0
            st.current_cycle += 1
        length = v.major_frames[st.current_major_frame]
        for c, cpu in enumerate(st.cpus):
            cpu.in_barrier = False
            elapsed = cpu.tsc - st.cmsc
            if elapsed >= length:
                cpu.minor_frame = len(v.sched_plans[st.current_major_frame][c]) - 1
                _enter_barrier(st, c)
                continue
            cpu.minor_frame = 0
            while st.deadline(c) <= elapsed:
                cpu.minor_frame += 1
            _launch(st, c)


def c_execute(st: ConcreteState, cpu: int, insn: isa.Instruction | None = None) -> str:
    if st.mode != RUNNING:
        return "halted"
    c = st.cpus[cpu]
    if c.in_barrier:
        return "noop"
    s = c.vmptr
    st.global_events[s] = isa.inject_pending(c.regs, st.global_events[s])
    if isa.step(c.regs, _GuestView(st, s), insn) == isa.FAULT:
        st.mode = ERROR_HALT
        return "halted"
    return "ok"


def c_tick(st: ConcreteState, cpu: int) -> str:
    if st.mode != RUNNING:
        return "halted"
    c = st.cpus[cpu]
    c.tsc = (c.tsc + 1) & MASK64
    if c.in_barrier:
        return "ok"
    c.vmx_timer -= 1
    if c.vmx_timer > 0:
        return "ok"
    _vm_exit(st, cpu)
    plan = st.params.sched_plans[st.current_major_frame][cpu]
    if c.minor_frame + 1 < len(plan):
        c.minor_frame += 1
        _launch(st, cpu)
    else:
        _enter_barrier(st, cpu)
        _release(st)
    return "ok"


def c_interrupt(st: ConcreteState, cpu: int, vector: int) -> str:
    if st.mode != RUNNING:
        return "halted"
    c = st.cpus[cpu]
    if not c.in_barrier:
        # exit and resume the interrupted guest unchanged
        _vm_exit(st, cpu)
        c.regs = st.vmcss[c.vmptr].regs.copy()
    route = st.params.vector_routing.get(vector)
    if route is None:
        return "dropped"
    s, dv = route
    st.global_events[s] |= 1 << dv
    return f"routed({s})"


def c_invariants(st: ConcreteState) -> list[str]:
    """Violated concrete invariant ids: c1-c3, plus c4 (armed timer on running CPUs)."""
    v = st.params
    bad = []
    if min(c.tsc - st.cmsc for c in st.cpus) >= v.major_frames[st.current_major_frame]:
        bad.append("c1")
    if st.wait_count != sum(c.in_barrier for c in st.cpus):
        bad.append("c2")
    if all(c.in_barrier for c in st.cpus):
        bad.append("c3")
    if any(not c.in_barrier and c.vmx_timer <= 0 for c in st.cpus):
        bad.append("c4")
    return bad


class ConcreteMachine:
    operations = OPERATIONS

    def __init__(self, params: ParamsConcrete, image: bytes, pts: list, fault: str | None = None):
        self.params = params
        self.image = bytes(image)
        self.pts = [p if isinstance(p, PagingStructureFile) else PagingStructureFile(*p) for p in pts]
        self.fault = fault
        self.state: ConcreteState | None = None

    def step(self, call: OperationCall):
        if call.name == "init":
            self.state = c_init(self.params, self.image, self.pts, self.fault)
            return "ok"
        if call.name == "exec":
            return c_execute(self.state, call.input)
        if call.name == "tick":
            return c_tick(self.state, call.input)
        if call.name == "interrupt":
            cpu, vector = call.input
            return c_interrupt(self.state, cpu, vector)
        raise ValueError(call.name)
