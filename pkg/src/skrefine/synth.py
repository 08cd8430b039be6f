"""Random and hand-built policies for tests, benchmarks and the fuzz command.

Every subject gets one executable code page holding a random guest program
that only touches its own readable/writable pages, so clean runs never hit
a memory fault and keep both machines in the running mode.
"""

from __future__ import annotations

import numpy as np

from .isa import Instruction, Opcode, assemble
from .policy import (
    PAGE,
    ChannelRef,
    ChannelSpec,
    ContentSource,
    MajorFrameSpec,
    MemorySpec,
    MinorFrameSpec,
    Policy,
    Subject,
    VectorRoutingEntry,
    ZERO,
    parse_policy,
)

R3 = 3  # address register of generated programs


def _pick(rng, spec) -> int:
    if isinstance(spec, tuple):
        lo, hi = spec
        return int(rng.integers(lo, hi + 1))
    return int(spec)


def random_program(rng, code_base: int, readable, writable, length: int = 24) -> bytes:
    """Random straight-line loop over R0-R2 with loads/stores through R3.

    ``readable``/``writable`` are lists of (address, size) ranges.  A prologue
    stores a nonzero byte at the start of every writable range, so each
    writable component is touched on the first pass.
    """
    prog = [Instruction(Opcode.MOVI, 0, 0, int(rng.integers(1, 256)))]
    for a, _ in writable:
        prog.append(Instruction(Opcode.MOVI, R3, 0, a))
        prog.append(Instruction(Opcode.STOREB, R3, 0, 0))

    def addr_in(ranges):
        a, n = ranges[int(rng.integers(len(ranges)))]
        return a + int(rng.integers(n))

    for _ in range(length):
        r = int(rng.integers(3))
        roll = rng.random()
        if roll < 0.25:
            prog.append(Instruction(Opcode.MOVI, r, 0, int(rng.integers(1, 1 << 32))))
        elif roll < 0.45:
            prog.append(Instruction(Opcode.ADD, r, int(rng.integers(3)), int(rng.integers(256))))
        elif roll < 0.65 and readable:
            prog.append(Instruction(Opcode.MOVI, R3, 0, addr_in(readable)))
            prog.append(Instruction(Opcode.LOADB, r, R3, 0))
        elif roll < 0.9 and writable:
            prog.append(Instruction(Opcode.MOVI, R3, 0, addr_in(writable)))
            prog.append(Instruction(Opcode.STOREB, R3, r, 0))
        elif roll < 0.96:
            prog.append(Instruction(Opcode.RDIR, r, 0, 0))
        elif roll < 0.99:
            prog.append(Instruction(Opcode.VMCALL, 0, 0, 0))
        else:
            prog.append(Instruction(Opcode.HLT, 0, 0, 0))
    prog.append(Instruction(Opcode.JMP, 0, 0, code_base))
    code = assemble(prog)
    if len(code) > PAGE:
        raise ValueError("program does not fit one page")
    return code


class _VaAllocator:
    """Hands out non-overlapping page-aligned virtual ranges for one subject."""

    def __init__(self, rng, bound: int | None, scatter: bool):
        self.rng, self.bound, self.scatter = rng, bound, scatter
        self.taken = []
        self.cursor = PAGE * int(rng.integers(1, 16))

    def take(self, size: int) -> int:
        if self.scatter:
            pages = self.bound // PAGE
            for _ in range(1000):
                a = int(self.rng.integers(0, pages - size // PAGE + 1)) * PAGE
                if all(a + size <= s or e <= a for s, e in self.taken):
                    self.taken.append((a, a + size))
                    return a
            raise ValueError("cannot place component below bound")
        a = self.cursor
        self.cursor += size + PAGE * int(self.rng.integers(0, 4))
        if self.rng.random() < 0.1:
            # jump to a fresh 2 MiB region to exercise more paging structures
            self.cursor = -(-self.cursor // (1 << 21)) * (1 << 21)
        if self.bound is not None and a + size > self.bound:
            raise ValueError("virtual layout exceeds bound")
        self.taken.append((a, a + size))
        return a


def _schedule(rng, ncpus, cpu_subjects, nmajor, frame_ticks):
    frames = []
    for m in range(nmajor):
        length = _pick(rng, frame_ticks)
        cpus = []
        for c in range(ncpus):
            subs = cpu_subjects[c]
            k = min(length, max(_pick(rng, (1, 4)), len(subs) if m == 0 else 1))
            cuts = sorted(rng.choice(np.arange(1, length), size=k - 1, replace=False).tolist()) if k > 1 else []
            bounds = [0, *cuts, length]
            order = list(rng.permutation(subs)) if m == 0 else []
            minors = []
            for i in range(k):
                s = int(order[i]) if i < len(order) else int(rng.choice(subs))
                minors.append(MinorFrameSpec(s, bounds[i + 1] - bounds[i]))
            cpus.append(minors)
        frames.append(MajorFrameSpec(cpus))
    return frames


def random_policy(
    rng,
    ncpus=(2, 4),
    nsubs=(4, 16),
    nchannels=(1, 3),
    data_pages=(1, 3),
    nmajor=(1, 3),
    frame_ticks=(4, 40),
    nroutes=(0, 3),
    program_len=(8, 40),
    va_bound: int | None = None,
    scatter: bool = False,
    data_size: int | None = None,
) -> Policy:
    """A random policy that passes validation.

    Integer arguments are exact; (lo, hi) tuples are inclusive ranges.
    ``scatter`` places components at random addresses below ``va_bound``.
    """
    ncpus = _pick(rng, ncpus)
    nsubs = max(_pick(rng, nsubs), ncpus)
    nchannels = _pick(rng, nchannels) if nsubs >= 2 else 0
    files = {}
    subjects = []
    allocs = []
    for i in range(nsubs):
        cpu = i if i < ncpus else int(rng.integers(ncpus))
        s = Subject(f"s{i}", i, cpu)
        alloc = _VaAllocator(rng, va_bound, scatter)
        allocs.append(alloc)
        code = alloc.take(PAGE)
        s.memory.append(MemorySpec("code", code, PAGE, "r-x", ContentSource("file", path=f"code/s{i}.bin")))
        size = data_size if data_size is not None else _pick(rng, data_pages) * PAGE
        s.memory.append(MemorySpec("data", alloc.take(size), size, "rw-", ZERO))
        if rng.random() < 0.5:
            s.memory.append(MemorySpec("rodata", alloc.take(PAGE), PAGE, "r--", ContentSource("fill", fill=int(rng.integers(256)))))
        if rng.random() < 0.3:
            n = int(rng.integers(1, 3)) * PAGE
            files[f"blobs/s{i}.bin"] = rng.integers(0, 256, size=int(rng.integers(1, n + 1)), dtype=np.uint8).tobytes()
            s.memory.append(MemorySpec("blob", alloc.take(n), n, "rw-", ContentSource("file", path=f"blobs/s{i}.bin")))
        s.ip = code
        subjects.append(s)

    channels = []
    for k in range(nchannels):
        size = int(rng.integers(1, 3)) * PAGE
        ch = ChannelSpec(f"ch{k}", size)
        channels.append(ch)
        ends = rng.choice(nsubs, size=min(nsubs, int(rng.integers(2, 4))), replace=False)
        for j, sid in enumerate(ends):
            subjects[sid].channels.append(ChannelRef(ch.name, allocs[sid].take(size), j == 0))

    cpu_subjects = [[s.id for s in subjects if s.cpu == c] for c in range(ncpus)]
    schedule = _schedule(rng, ncpus, cpu_subjects, _pick(rng, nmajor), frame_ticks)

    vectors = rng.choice(np.arange(32, 256), size=_pick(rng, nroutes), replace=False)
    routing = [VectorRoutingEntry(int(v), int(rng.integers(nsubs)), int(rng.integers(64))) for v in vectors]

    p = Policy(10000, ncpus, subjects, channels, schedule, routing, files=files)
    add_programs(p, rng, program_len)
    return p


def add_programs(p: Policy, rng, program_len=(8, 40)) -> None:
    """Generate each subject's code-page program from its own memory layout."""
    sizes = {c.name: c.size for c in p.channels}
    for s in p.subjects:
        readable = [(m.address, m.size) for m in s.memory if m.logical != "code"]
        writable = [(m.address, m.size) for m in s.memory if "w" in m.rwe]
        readable += [(r.address, sizes[r.channel]) for r in s.channels]
        writable += [(r.address, sizes[r.channel]) for r in s.channels if r.writable]
        code = next(m for m in s.memory if m.logical == "code")
        path = code.content.path
        p.files[path] = random_program(rng, code.address, readable, writable, _pick(rng, program_len))


def micro_policy(rng) -> Policy:
    """Small config for the brute-force oracle: at most 3 subjects and 16 pages each below 4 MiB."""
    return random_policy(
        rng,
        ncpus=(1, 2),
        nsubs=(1, 3),
        nchannels=(0, 2),
        data_pages=(1, 4),
        nmajor=(1, 2),
        frame_ticks=(2, 12),
        nroutes=(0, 2),
        va_bound=1 << 22,
        scatter=True,
    )


TWO_CPU_SCHEDULE = """\
<scheduling tick_rate="10000">
 <major_frame>
  <cpu id="0">
   <minor_fr sub_id="1" ticks="40"/>
   <minor_fr sub_id="2" ticks="40"/>
  </cpu>
  <cpu id="1">
   <minor_fr sub_id="3" ticks="80"/>
  </cpu>
 </major_frame>
 <major_frame>
  <cpu id="0">
   <minor_fr sub_id="1" ticks="80"/>
   <minor_fr sub_id="2" ticks="40"/>
  </cpu>
  <cpu id="1">
   <minor_fr sub_id="4" ticks="60"/>
   <minor_fr sub_id="3" ticks="60"/>
  </cpu>
 </major_frame>
</scheduling>
"""


def two_cpu_policy(seed: int = 0) -> Policy:
    """The four-subject, two-CPU reference schedule with code, data and one channel added."""
    rng = np.random.default_rng(seed)
    p = parse_policy(TWO_CPU_SCHEDULE, validate=False)
    for s in p.subjects:
        path = f"code/{s.name}.bin"
        s.memory = [
            MemorySpec("code", 0x10000, PAGE, "r-x", ContentSource("file", path=path)),
            MemorySpec("data", 0x20000, 2 * PAGE, "rw-", ZERO),
        ]
        s.ip = 0x10000
    p.channels = [ChannelSpec("link", PAGE)]
    p.subjects[0].channels.append(ChannelRef("link", 0x40000, True))
    p.subjects[2].channels.append(ChannelRef("link", 0x40000, False))
    p.routing = [VectorRoutingEntry(33, 2, 1)]
    add_programs(p, rng)
    return p


def throughput_policy(seed: int = 0, nsubs: int = 16, ncpus: int = 4, data_size: int = 2 << 20) -> Policy:
    """Sixteen subjects on four CPUs with at least 32 MiB of mapped memory in total."""
    rng = np.random.default_rng(seed)
    return random_policy(rng, ncpus=ncpus, nsubs=nsubs, nchannels=4, data_size=data_size)


def single_subject_policy(npages: int) -> Policy:
    """One subject on one CPU mapping ``npages`` data pages (for scaling measurements)."""
    rng = np.random.default_rng(npages)
    s = Subject("s0", 0, 0)
    s.memory = [
        MemorySpec("code", 0x10000, PAGE, "r-x", ContentSource("file", path="code/s0.bin")),
        MemorySpec("data", 0x200000, npages * PAGE, "rw-", ZERO),
    ]
    s.ip = 0x10000
    p = Policy(10000, 1, [s], [], [MajorFrameSpec([[MinorFrameSpec(0, 10)]])])
    add_programs(p, rng)
    return p
