"""Abstract machine: one processor per subject plus a supervisor.

Each subject owns its registers and a sparse page map of its own memory;
channel pages are redirected into a shared ``chmem`` array.  The supervisor
keeps, per logical CPU, an ideal clock that runs freely, and a global
(major-frame, cycle) pointer that only advances once every CPU has finished
the current major frame.  A CPU is enabled when its ideal position equals
the global one.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

from . import isa
from .isa import RegisterFile
from .policy import PAGE, content_bytes, sched_violations
from .refinement import OperationCall
from .toolchain import ParamsAbstract

RUNNING = "running"
ERROR_HALT = "error_halt"
OPERATIONS = frozenset({"init", "exec", "tick", "interrupt"})


def routed(s: int) -> str:
    return f"routed({s})"


@dataclass
class CpuClock:
    ticks: int = 0
    min_ticks: int = 0
    ideal_maj_fp: int = 0
    minor_fp: int = 0
    ideal_cycles: int = 0


@dataclass
class AbstractState:
    params: ParamsAbstract
    regs: list
    vmem: list  # per subject: page number -> bytearray(PAGE), non-channel pages only
    chmem: bytearray
    pending: list
    clocks: list
    maj_fp: int = 0
    cycles: int = 0
    mode: str = RUNNING
    # pages written since the last clear_dirty(): (subject, page) and chmem page offsets
    dirty: set = field(default_factory=set)
    dirty_ch: set = field(default_factory=set)

    # --- scheduling views -----------------------------------------------------

    def cpu_enabled(self, c: int) -> bool:
        k = self.clocks[c]
        return k.ideal_cycles == self.cycles and k.ideal_maj_fp == self.maj_fp

    def active_subject(self, c: int) -> int:
        """Subject of CPU ``c``'s current ideal minor frame."""
        k = self.clocks[c]
        return self.params.sched.plans[k.ideal_maj_fp][c][k.minor_fp][0]

    def enabled_subjects(self) -> set:
        return {self.active_subject(c) for c in range(self.params.ncpus) if self.cpu_enabled(c)}

    def perms(self, s: int, page: int):
        return self.params.subjects[s].pages.get(page)

    def page_bytes(self, s: int, page: int) -> bytes:
        """Current contents of subject ``s``'s valid page, through the channel map if needed."""
        off = self.params.subjects[s].channel_pages.get(page)
        if off is not None:
            return bytes(self.chmem[off : off + PAGE])
        return bytes(self.vmem[s][page])

    def clear_dirty(self):
        self.dirty.clear()
        self.dirty_ch.clear()

    def copy(self) -> "AbstractState":
        params, self.params = self.params, None
        try:
            dup = copy.deepcopy(self)
        finally:
            self.params = params
        dup.params = params
        return dup

    def snapshot(self) -> dict:
        """Canonical JSON-ready summary: registers, clocks, pending events, page hashes."""
        return {
            "mode": self.mode,
            "maj_fp": self.maj_fp,
            "cycles": self.cycles,
            "clocks": [vars(k).copy() for k in self.clocks],
            "regs": [r.to_json() for r in self.regs],
            "pending": list(self.pending),
            "vmem": [
                {str(p): hashlib.sha256(b).hexdigest()[:16] for p, b in sorted(pages.items())} for pages in self.vmem
            ],
            "chmem": hashlib.sha256(self.chmem).hexdigest()[:16],
        }

    def snapshot_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))


class _SubjectMemory:
    """isa.GuestMemory view of one subject's address space."""

    def __init__(self, st: AbstractState, s: int):
        self.st, self.s = st, s
        self.pages = st.params.subjects[s].pages
        self.chpages = st.params.subjects[s].channel_pages

    def _locate(self, addr, need):
        page, off = divmod(addr, PAGE)
        perm = self.pages.get(page)
        if perm is None or not getattr(perm, need):
            return None, None, None
        ch = self.chpages.get(page)
        if ch is not None:
            return self.st.chmem, ch + off, ("ch", ch)
        return self.st.vmem[self.s][page], off, ("v", page)

    def fetch(self, addr):
        buf, off, _ = self._locate(addr, "x")
        return None if buf is None else bytes(buf[off : off + isa.INSN_SIZE])

    def load(self, addr):
        buf, off, _ = self._locate(addr, "r")
        return None if buf is None else buf[off]

    def store(self, addr, value):
        buf, off, where = self._locate(addr, "w")
        if buf is None:
            return False
        buf[off] = value
        if where[0] == "ch":
            self.st.dirty_ch.add(where[1])
        else:
            self.st.dirty.add((self.s, where[1]))
        return True


def a_init(u: ParamsAbstract, read_file) -> AbstractState:
    """Initial abstract state; ``read_file`` resolves file content sources."""
    regs, vmem = [], []
    for sub in u.subjects:
        regs.append(RegisterFile(ip=sub.ip, sp=sub.sp))
        pages = {}
        for addr, size, src in sub.components:
            data = content_bytes(src, size, read_file)
            for off in range(0, size, PAGE):
                pages[(addr + off) // PAGE] = bytearray(data[off : off + PAGE])
        vmem.append(pages)
    return AbstractState(
        params=u,
        regs=regs,
        vmem=vmem,
        chmem=bytearray(u.chmem_size),
        pending=[0] * u.nsubs,
        clocks=[CpuClock() for _ in range(u.ncpus)],
    )


def a_execute(st: AbstractState, cpu: int, insn: isa.Instruction | None = None) -> str:
    if st.mode != RUNNING:
        return "halted"
    if not st.cpu_enabled(cpu):
        return "noop"
    s = st.active_subject(cpu)
    regs = st.regs[s]
    st.pending[s] = isa.inject_pending(regs, st.pending[s])
    if isa.step(regs, _SubjectMemory(st, s), insn) == isa.FAULT:
        st.mode = ERROR_HALT
        return "halted"
    return "ok"


def a_tick(st: AbstractState, cpu: int) -> str:
    if st.mode != RUNNING:
        return "halted"
    sd = st.params.sched
    k = st.clocks[cpu]
    k.ticks += 1
    if k.ticks == sd.cycle_length:
        k.ticks = 0
        k.ideal_cycles += 1
    k.min_ticks += 1
    plan = sd.plans[k.ideal_maj_fp][cpu]
    if k.min_ticks == plan[k.minor_fp][1]:
        k.minor_fp += 1
    if k.min_ticks == sd.major_frames[k.ideal_maj_fp]:
        k.min_ticks = 0
        k.minor_fp = 0
        k.ideal_maj_fp = (k.ideal_maj_fp + 1) % len(sd.major_frames)
    nmf = len(sd.major_frames)
    while all(c.ideal_cycles * nmf + c.ideal_maj_fp > st.cycles * nmf + st.maj_fp for c in st.clocks):
        st.maj_fp += 1
        if st.maj_fp == nmf:
            st.maj_fp = 0
            st.cycles += 1
    return "ok"


def a_interrupt(st: AbstractState, vector: int) -> str:
    if st.mode != RUNNING:
        return "halted"
    route = st.params.routing.get(vector)
    if route is None:
        return "dropped"
    s, dv = route
    st.pending[s] |= 1 << dv
    return routed(s)


def a_invariants(st: AbstractState) -> list[str]:
    """Violated abstract invariant ids (i1-i19; i5 is implied by i7)."""
    sd = st.params.sched
    L = sd.cycle_length
    nmf = len(sd.major_frames)
    bad = set(sched_violations(sd))
    same_cycle = [k for k in st.clocks if k.ideal_cycles == st.cycles]
    if any(k.ideal_cycles < st.cycles for k in st.clocks):
        bad.add("i1")
    if not same_cycle or st.maj_fp != min(k.ideal_maj_fp for k in same_cycle):
        bad.add("i2")
    for c, k in enumerate(st.clocks):
        if not 0 <= k.ideal_maj_fp < nmf:
            bad.update({"i3", "i6", "i7", "i15", "i16"})
            continue
        end = sd.major_frame_ends[k.ideal_maj_fp]
        start = sd.frame_start(k.ideal_maj_fp)
        plan = sd.plans[k.ideal_maj_fp][c]
        if not 0 <= k.min_ticks < sd.major_frames[k.ideal_maj_fp]:
            bad.add("i3")
        if not 0 <= k.ticks < L:
            bad.add("i4")
        if not 0 <= k.minor_fp <= len(plan):
            bad.add("i6")
        if k.ticks % L != (start + k.min_ticks) % L:
            bad.add("i7")
        if not start <= k.ticks < end:
            bad.add("i15")
        lo = plan[k.minor_fp - 1][1] if 0 < k.minor_fp <= len(plan) else 0
        if k.minor_fp >= len(plan) or not lo <= k.min_ticks < plan[k.minor_fp][1]:
            bad.add("i16")
    if not any(st.cpu_enabled(c) for c in range(st.params.ncpus)):
        bad.add("i19")
    return sorted(bad, key=lambda s: int(s[1:]))


class AbstractMachine:
    """Machine wrapper: ``init`` builds the state, then exec/tick/interrupt step it.

    ``exec`` takes a cpu, ``tick`` a cpu, ``interrupt`` a (cpu, vector) pair;
    the abstract supervisor ignores the receiving CPU of an interrupt.
    """

    operations = OPERATIONS

    def __init__(self, params: ParamsAbstract, read_file):
        self.params = params
        self.read_file = read_file
        self.state: AbstractState | None = None

    def step(self, call: OperationCall):
        if call.name == "init":
            self.state = a_init(self.params, self.read_file)
            return "ok"
        if call.name == "exec":
            return a_execute(self.state, call.input)
        if call.name == "tick":
            return a_tick(self.state, call.input)
        if call.name == "interrupt":
            return a_interrupt(self.state, call.input[1])
        raise ValueError(call.name)
