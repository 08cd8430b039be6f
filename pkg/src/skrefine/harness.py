"""Pairs the abstract and concrete machines and checks the gluing relation.

Seven conjuncts tie the two states together:

g1  registers: an enabled subject's abstract registers are the live CPU
    registers; a disabled subject's are its saved subject descriptor
g2  memory: every valid page reads the same in the abstract view and in
    physical memory at the page-table translation
g3  clocks: tsc - cmsc equals how far the ideal clock is past the start of
    the global major frame
g4  frames: major frame and cycle agree, minor pointers agree on enabled CPUs
g5  timer: vmx_timer + min_ticks is the current minor deadline on enabled CPUs
g6  barrier: a CPU waits in the barrier exactly when it is disabled
g7  events: pending event tables agree
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import isa
from .abstract import AbstractMachine, AbstractState, a_execute, a_invariants, a_tick, a_interrupt
from .checker import ConditionReport, check_artifacts
from .concrete import ConcreteMachine, ConcreteState, c_execute, c_invariants, c_tick, c_interrupt
from .isa import Instruction, Opcode
from .policy import PAGE, Policy
from .refinement import OperationCall, Verdict, check_lockstep
from .toolchain import Artifacts, generate

CONJUNCTS = ("g1", "g2", "g3", "g4", "g5", "g6", "g7")
DEFAULT_WEIGHTS = (0.70, 0.25, 0.05)


class ConditionRFailed(Exception):
    """Refinement is only claimed for artifacts that satisfy condition R."""

    def __init__(self, report: ConditionReport):
        self.report = report
        super().__init__(f"condition R fails: {sorted(report.failed_conditions())}")


@dataclass
class GluingReport:
    results: dict = field(default_factory=lambda: dict.fromkeys(CONJUNCTS, True))
    detail: str = ""
    invariants: list = field(default_factory=list)

    def fail(self, g: str, detail: str):
        if self.results[g] and not self.detail:
            self.detail = f"{g}: {detail}"
        self.results[g] = False

    @property
    def failed(self) -> list:
        return [g for g in CONJUNCTS if not self.results[g]]

    @property
    def kind(self) -> str:
        return "glue" if self.failed else "invariant"

    def __bool__(self):
        return not self.failed and not self.invariants

    def __str__(self):
        if self:
            return "glue ok"
        parts = []
        if self.failed:
            parts.append(f"{','.join(self.failed)} failed ({self.detail})")
        if self.invariants:
            parts.append(f"invariants violated: {','.join(self.invariants)}")
        return "; ".join(parts)

    def summary(self) -> dict:
        return {**self.results, "detail": self.detail, "invariants": list(self.invariants)}


class MemoryIndex:
    """Inverse maps from physical and channel pages to the (subject, page) pairs that see them."""

    def __init__(self, a: AbstractState, c: ConcreteState):
        self.by_pa, self.by_ch = {}, {}
        for s, sub in enumerate(a.params.subjects):
            for page in sub.pages:
                t = c.translate(s, page * PAGE)
                if t is not None:
                    self.by_pa.setdefault(t[0] // PAGE, []).append((s, page))
            for page, off in sub.channel_pages.items():
                self.by_ch.setdefault(off // PAGE * PAGE, []).append((s, page))

    def dirty_pages(self, a: AbstractState, c: ConcreteState) -> set:
        out = set(a.dirty)
        for off in a.dirty_ch:
            out.update(self.by_ch.get(off // PAGE * PAGE, ()))
        for pa in c.dirty:
            out.update(self.by_pa.get(pa, ()))
        return out


def _glue_memory(rep: GluingReport, a: AbstractState, c: ConcreteState, pages):
    for s, page in sorted(pages):
        t = c.translate(s, page * PAGE)
        if t is None:
            rep.fail("g2", f"subject {s} page {page * PAGE:#x} not translatable")
            return
        if a.page_bytes(s, page) != bytes(c.pmem[t[0] : t[0] + PAGE]):
            rep.fail("g2", f"subject {s} page {page * PAGE:#x} differs from pmem {t[0]:#x}")
            return


def glue_check(a: AbstractState, c: ConcreteState, pages=None) -> GluingReport:
    """Evaluate g1-g7.  ``pages`` restricts g2 to the given (subject, page) pairs."""
    rep = GluingReport()
    sd = a.params.sched
    L = sd.cycle_length
    ncpus = a.params.ncpus

    enabled_on = {}
    for cpu in range(ncpus):
        if a.cpu_enabled(cpu):
            enabled_on[a.active_subject(cpu)] = cpu
    for s, regs in enumerate(a.regs):
        cpu = enabled_on.get(s)
        if cpu is None:
            if regs != c.subject_descs[s]:
                rep.fail("g1", f"subject {s} descriptor {c.subject_descs[s]} vs abstract {regs}")
        else:
            cs = c.cpus[cpu]
            if cs.in_barrier or cs.vmptr != s or cs.regs != regs:
                rep.fail("g1", f"cpu {cpu} live registers {cs.regs} vs abstract subject {s} {regs}")

    if pages is None:
        pages = [(s, page) for s, sub in enumerate(a.params.subjects) for page in sub.pages]
    _glue_memory(rep, a, c, pages)

    global_start = a.cycles * L + sd.frame_start(a.maj_fp)
    for cpu, (k, cs) in enumerate(zip(a.clocks, c.cpus)):
        if cs.tsc - c.cmsc != (k.ideal_cycles * L + k.ticks) - global_start:
            rep.fail("g3", f"cpu {cpu}: tsc-cmsc={cs.tsc - c.cmsc}, ideal offset {(k.ideal_cycles * L + k.ticks) - global_start}")

    if c.current_major_frame != a.maj_fp or c.current_cycle != a.cycles:
        rep.fail("g4", f"concrete frame {c.current_major_frame}/{c.current_cycle} vs {a.maj_fp}/{a.cycles}")
    for cpu, (k, cs) in enumerate(zip(a.clocks, c.cpus)):
        enabled = a.cpu_enabled(cpu)
        if enabled and cs.minor_frame != k.minor_fp:
            rep.fail("g4", f"cpu {cpu} minor frame {cs.minor_frame} vs {k.minor_fp}")
        if enabled and not cs.in_barrier:
            deadline = sd.plans[a.maj_fp][cpu][k.minor_fp][1]
            if cs.vmx_timer + k.min_ticks != deadline:
                rep.fail("g5", f"cpu {cpu}: timer {cs.vmx_timer} + min_ticks {k.min_ticks} != {deadline}")
        if cs.in_barrier == enabled:
            rep.fail("g6", f"cpu {cpu}: in_barrier={cs.in_barrier}, enabled={enabled}")

    if c.global_events != a.pending:
        rep.fail("g7", f"global events {c.global_events} vs pending {a.pending}")
    return rep


# --- building and running the pair ----------------------------------------------------


def build_machines(art: Artifacts, concrete_fault: str | None = None):
    am = AbstractMachine(art.params_abstract, art.read_file)
    cm = ConcreteMachine(art.params_concrete, bytes(art.image.data), art.pts, concrete_fault)
    return am, cm


def random_trace(rng, ncpus: int, steps: int, vectors=(), weights=DEFAULT_WEIGHTS) -> list[OperationCall]:
    """Random exec/tick/interrupt calls.

    Half of the interrupts use a routed vector from ``vectors`` when there
    are any, so that injection is exercised; the rest are uniform over 0-255.
    """
    vectors = sorted(vectors)
    kinds = rng.choice(3, size=steps, p=np.asarray(weights) / sum(weights))
    cpus = rng.integers(ncpus, size=steps)
    trace = []
    for kind, cpu in zip(kinds.tolist(), cpus.tolist()):
        if kind == 0:
            trace.append(OperationCall("exec", cpu))
        elif kind == 1:
            trace.append(OperationCall("tick", cpu))
        else:
            if vectors and rng.random() < 0.5:
                v = vectors[int(rng.integers(len(vectors)))]
            else:
                v = int(rng.integers(256))
            trace.append(OperationCall("interrupt", (cpu, v)))
    return trace


class LockstepGlue:
    """Glue predicate for check_lockstep: g1-g7 plus both machines' invariants.

    Memory (g2) is compared in full at init and every ``full_every`` steps,
    and otherwise only on pages written since the previous step.
    """

    def __init__(self, full_every: int = 512):
        self.full_every = full_every
        self.index = None
        self.count = 0

    def __call__(self, am: AbstractMachine, cm: ConcreteMachine) -> GluingReport:
        a, c = am.state, cm.state
        if self.index is None:
            self.index = MemoryIndex(a, c)
        full = self.count % self.full_every == 0
        pages = None if full else self.index.dirty_pages(a, c)
        self.count += 1
        rep = glue_check(a, c, pages)
        rep.invariants = a_invariants(a) + c_invariants(c)
        a.clear_dirty()
        c.clear_dirty()
        return rep

    def final(self, am, cm) -> GluingReport:
        rep = glue_check(am.state, cm.state)
        rep.invariants = a_invariants(am.state) + c_invariants(cm.state)
        return rep


def lockstep_run(
    art: Artifacts,
    trace=None,
    steps: int = 10_000,
    seed: int = 0,
    force: bool = False,
    full_every: int = 512,
    observer=None,
    concrete_fault: str | None = None,
    machines: list | None = None,
) -> Verdict:
    """Run both machines in lock-step over ``trace`` (or a random one) and check glue each step.

    Refuses with ConditionRFailed when the artifacts fail condition R, unless
    ``force``.  ``machines``, if a list, receives the machine pair.
    """
    if not force:
        report = check_artifacts(art)
        if not report.ok:
            raise ConditionRFailed(report)
    if trace is None:
        rng = np.random.default_rng(seed)
        trace = random_trace(rng, art.policy.ncpus, steps, art.params_abstract.routing)
    am, cm = build_machines(art, concrete_fault)
    if machines is not None:
        machines.extend([am, cm])
    glue = LockstepGlue(full_every)
    verdict = check_lockstep(am, cm, trace, glue, observer)
    if verdict:
        rep = glue.final(am, cm)
        if not rep:
            return Verdict(False, len(verdict.outputs), rep.kind, f"final check: {rep}", verdict.outputs)
    return verdict


def _artifacts(target, seed: int, fault: str | None) -> Artifacts:
    if isinstance(target, Artifacts):
        return target
    return generate(target, fault, rng=np.random.default_rng(seed))


# --- security properties ------------------------------------------------------------------


def _private_pages(a: AbstractState, s: int, need: str):
    sub = a.params.subjects[s]
    return [p for p, perm in sorted(sub.pages.items()) if p not in sub.channel_pages and getattr(perm, need)]


def _concrete_private(c: ConcreteState, a: AbstractState, s: int) -> tuple:
    out = []
    for page in _private_pages(a, s, "r"):
        t = c.translate(s, page * PAGE)
        out.append(None if t is None else bytes(c.pmem[t[0] : t[0] + PAGE]))
    return tuple(out)


def _abstract_private(a: AbstractState, s: int) -> tuple:
    return tuple(a.page_bytes(s, p) for p in _private_pages(a, s, "r"))


def _step_pair(a, c, call):
    if call.name == "exec":
        return a_execute(a, call.input), c_execute(c, call.input)
    if call.name == "tick":
        return a_tick(a, call.input), c_tick(c, call.input)
    cpu, v = call.input
    return a_interrupt(a, v), c_interrupt(c, cpu, v)


def _active(a: AbstractState, c: ConcreteState):
    """(cpu, subject) pairs runnable in both machines."""
    out = []
    for cpu in range(a.params.ncpus):
        if a.cpu_enabled(cpu) and not c.cpus[cpu].in_barrier:
            out.append((cpu, a.active_subject(cpu)))
    return out


def _probe_steps(rng, steps, probes):
    return {0} | set(rng.integers(1, max(steps, 2), size=probes).tolist())


def _init_pair(art, concrete_fault=None):
    am, cm = build_machines(art, concrete_fault)
    am.step(OperationCall("init"))
    cm.step(OperationCall("init"))
    return am.state, cm.state


def no_exfiltration(target, seed: int, steps: int = 200, probes: int = 4, fault: str | None = None) -> Verdict:
    """A subject's writes to its own non-channel pages leave every other subject's state unchanged."""
    art = _artifacts(target, seed, fault)
    rng = np.random.default_rng(seed)
    a, c = _init_pair(art)
    trace = random_trace(rng, art.policy.ncpus, steps, art.params_abstract.routing)
    probe_at = _probe_steps(rng, steps, probes)
    nsubs = art.params_abstract.nsubs
    for k, call in enumerate(trace):
        if k in probe_at and a.mode == "running" and c.mode == "running":
            for cpu, s in _active(a, c):
                others = [t for t in range(nsubs) if t != s]
                before_a = [(a.regs[t].copy(), _abstract_private(a, t)) for t in others]
                before_c = [_concrete_private(c, a, t) for t in others]
                for page in _private_pages(a, s, "w"):
                    addr = page * PAGE + int(rng.integers(PAGE))
                    value = int(rng.integers(1, 256))
                    for insn in (
                        Instruction(Opcode.MOVI, 2, 0, value),
                        Instruction(Opcode.MOVI, 3, 0, addr),
                        Instruction(Opcode.STOREB, 3, 2, 0),
                    ):
                        a_execute(a, cpu, insn)
                        c_execute(c, cpu, insn)
                for t, (regs, mem), cmem in zip(others, before_a, before_c):
                    if a.regs[t] != regs or _abstract_private(a, t) != mem:
                        return Verdict(False, k, "exfiltration", f"abstract subject {t} changed by writes of {s}")
                    if _concrete_private(c, a, t) != cmem:
                        return Verdict(False, k, "exfiltration", f"concrete subject {t} memory changed by writes of {s}")
        _step_pair(a, c, call)
    return Verdict(True)


def _perturb(a: AbstractState, c: ConcreteState, s: int, rng):
    """Randomize every subject's private state except ``s``'s, in both machines."""
    for t in range(a.params.nsubs):
        if t == s:
            continue
        for page in _private_pages(a, t, "r"):
            noise = rng.integers(0, 256, size=PAGE, dtype=np.uint8).tobytes()
            a.vmem[t][page][:] = noise
            tr = c.translate(t, page * PAGE)
            if tr is not None:
                c.pmem[tr[0] : tr[0] + PAGE] = noise
        regs = isa.RegisterFile([int(x) for x in rng.integers(0, 1 << 32, size=isa.NREGS)], a.regs[t].ip, a.regs[t].sp)
        a.regs[t] = regs.copy()
        c.subject_descs[t] = regs.copy()
        for cpu in c.cpus:
            if cpu.vmptr == t and not cpu.in_barrier:
                cpu.regs = regs.copy()
        bits = int(rng.integers(0, 1 << 63))
        a.pending[t] = bits
        c.global_events[t] = bits


def no_infiltration(target, seed: int, steps: int = 200, probes: int = 4, fault: str | None = None) -> Verdict:
    """A subject's reads of its own pages do not depend on other subjects' private state."""
    art = _artifacts(target, seed, fault)
    rng = np.random.default_rng(seed)
    a, c = _init_pair(art)
    trace = random_trace(rng, art.policy.ncpus, steps, art.params_abstract.routing)
    probe_at = _probe_steps(rng, steps, probes)
    for k, call in enumerate(trace):
        if k in probe_at and a.mode == "running" and c.mode == "running":
            for cpu, s in _active(a, c):
                a2, c2 = a.copy(), c.copy()
                _perturb(a2, c2, s, rng)
                for page in _private_pages(a, s, "r"):
                    offsets = rng.integers(PAGE, size=4).tolist()
                    for off in offsets:
                        for insn in (
                            Instruction(Opcode.MOVI, 3, 0, page * PAGE + off),
                            Instruction(Opcode.LOADB, 0, 3, 0),
                        ):
                            outs = (
                                a_execute(a, cpu, insn),
                                a_execute(a2, cpu, insn),
                                c_execute(c, cpu, insn),
                                c_execute(c2, cpu, insn),
                            )
                            if outs[0] != outs[1] or outs[2] != outs[3]:
                                return Verdict(False, k, "infiltration", f"subject {s} outputs differ: {outs}")
                        if a.regs[s] != a2.regs[s]:
                            return Verdict(False, k, "infiltration", f"abstract subject {s} read differs at {page * PAGE + off:#x}")
                        if c.cpus[cpu].regs != c2.cpus[cpu].regs:
                            return Verdict(False, k, "infiltration", f"concrete subject {s} read differs at {page * PAGE + off:#x}")
        _step_pair(a, c, call)
    return Verdict(True)


def _schedule_oracle(sd, ncpus: int, tscs: list) -> list:
    """Expected (running, subject) per CPU from tick counts alone.

    A CPU's frame count is how many major frames its tick count has passed;
    the system frame is the minimum, and only CPUs at it run.
    """
    L, nmf = sd.cycle_length, len(sd.major_frames)
    frames = []
    for t in tscs:
        cycles, r = divmod(t, L)
        m = sum(1 for e in sd.major_frame_ends if e <= r)
        frames.append((cycles * nmf + m, r - sd.frame_start(m)))
    g = min(f for f, _ in frames)
    out = []
    for cpu, (f, off) in enumerate(frames):
        if f != g:
            out.append((False, None))
            continue
        plan = sd.plans[f % nmf][cpu]
        minor = next(i for i, (_, d) in enumerate(plan) if off < d)
        out.append((True, plan[minor][0]))
    return out


def temporal_separation(
    target, seed: int, cycles: int = 1, fault: str | None = None, concrete_fault: str | None = None
) -> Verdict:
    """Over whole schedule cycles: the right subject runs, and idle subjects keep their state.

    Checked on both machines: (a) runnable CPUs and their subjects match a
    schedule oracle computed from tick counts; (b) a subject's registers and
    private memory change only in steps where it executes.
    """
    art = _artifacts(target, seed, fault)
    rng = np.random.default_rng(seed)
    a, c = _init_pair(art, concrete_fault)
    sd = a.params.sched
    ncpus = a.params.ncpus
    nsubs = a.params.nsubs
    target_ticks = cycles * sd.cycle_length

    def views():
        live = {cs.vmptr: cs.regs for cs in c.cpus if not cs.in_barrier}
        return (
            [(a.regs[s].copy(), _abstract_private(a, s)) for s in range(nsubs)],
            [((live.get(s) or c.subject_descs[s]).copy(), _concrete_private(c, a, s)) for s in range(nsubs)],
        )

    last_a, last_c = views()
    k = 0
    while min(cs.tsc for cs in c.cpus) < target_ticks:
        k += 1
        cpu = int(rng.integers(ncpus))
        call = OperationCall("exec" if rng.random() < 0.6 else "tick", cpu)
        executing = set()
        if call.name == "exec":
            if a.cpu_enabled(cpu):
                executing.add(("a", a.active_subject(cpu)))
            if not c.cpus[cpu].in_barrier:
                executing.add(("c", c.cpus[cpu].vmptr))
        _step_pair(a, c, call)
        if a.mode != "running" or c.mode != "running":
            return Verdict(False, k, "temporal", "machine halted")

        expect = _schedule_oracle(sd, ncpus, [cs.tsc for cs in c.cpus])
        for q, (runs, subj) in enumerate(expect):
            got_a = (a.cpu_enabled(q), a.active_subject(q) if a.cpu_enabled(q) else None)
            cs = c.cpus[q]
            got_c = (not cs.in_barrier, None if cs.in_barrier else cs.vmptr)
            if got_a != (runs, subj) or got_c != (runs, subj):
                return Verdict(False, k, "temporal", f"cpu {q}: expected {(runs, subj)}, abstract {got_a}, concrete {got_c}")

        now_a, now_c = views()
        for s in range(nsubs):
            if ("a", s) not in executing and now_a[s] != last_a[s]:
                return Verdict(False, k, "temporal", f"abstract subject {s} changed while not executing")
            if ("c", s) not in executing and now_c[s] != last_c[s]:
                return Verdict(False, k, "temporal", f"concrete subject {s} changed while not executing ({call})")
        last_a, last_c = now_a, now_c
    return Verdict(True)


# names used in the property descriptions; not pytest tests themselves
test_no_exfiltration = no_exfiltration
test_no_infiltration = no_infiltration
test_temporal_separation = temporal_separation
for _f in (no_exfiltration, no_infiltration, temporal_separation):
    _f.__test__ = False
