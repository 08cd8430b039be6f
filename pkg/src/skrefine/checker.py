"""Checks that generated artifacts satisfy conditions R1-R5.

R1  injectivity: physical components disjoint, no illegal sharing between
    virtual components, page tables agree with the B-policy layout
R2  page-table permissions agree with the B-policy
R3  no paging-structure entry is present unless a valid page uses it
R4  the image holds every component's initial content
R5  the concrete kernel parameters agree with ones recomputed from the policy

The fast path runs in time proportional to used pages plus table size.
``naive_check`` walks every page below a bound and serves as an oracle.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .paging import PagingStructureFile
from .policy import PAGE, BPolicy, Permissions, Policy, content_bytes, derive_sched
from .toolchain import ParamsConcrete

CONDITIONS = ("R1", "R2", "R3", "R4", "R5")

ILLEGAL_SHARING = "Illegal sharing detected."
ADDRESS_MISMATCH = "Address mismatch"
RWE_MISMATCH = "Rd/Write/Exec mismatch."
INVALID_ENTRY = "Invalid Page Table Entry"


@dataclass
class Finding:
    condition: str
    message: str
    subject: str | None = None
    component: str | None = None
    address: int | None = None
    entry: int | None = None

    def __str__(self):
        locus = []
        if self.subject is not None:
            locus.append(f"subject={self.subject}")
        if self.component is not None:
            locus.append(f"component={self.component}")
        if self.address is not None:
            locus.append(f"address={self.address:#x}")
        if self.entry is not None:
            locus.append(f"entry={self.entry}")
        return f"[{self.condition}] {self.message}" + (f" ({', '.join(locus)})" if locus else "")


@dataclass
class ConditionReport:
    findings: list = field(default_factory=list)
    millis: dict = field(default_factory=dict)
    checked: tuple = CONDITIONS

    @property
    def passed(self) -> dict:
        failed = {f.condition for f in self.findings}
        return {c: c not in failed for c in self.checked}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def failed_conditions(self) -> set:
        return {c for c, ok in self.passed.items() if not ok}

    def to_json(self):
        return {
            c: {
                "pass": self.passed[c],
                "findings": [asdict(f) for f in self.findings if f.condition == c],
                "millis": round(self.millis.get(c, 0.0), 3),
            }
            for c in self.checked
        }


# --- R1: overlap ------------------------------------------------------------


def _overlapping_pairs(spans):
    """Yield intersecting pairs of half-open spans (start, end, item) by sort and sweep."""
    spans = sorted(spans, key=lambda t: (t[0], t[1]))
    for i, (_, end, a) in enumerate(spans):
        for start, _, b in spans[i + 1 :]:
            if start >= end:
                break
            yield a, b


def check_phys_overlap(b: BPolicy) -> list[Finding]:
    spans = [(c.address, c.address + c.size, c) for c in b.physical]
    return [
        Finding("R1", ILLEGAL_SHARING, component=f"{x.name}/{y.name}", address=max(x.address, y.address))
        for x, y in _overlapping_pairs(spans)
    ]


def check_virt_overlap(b: BPolicy) -> list[Finding]:
    phys = b.phys_by_name()
    spans = []
    for s in b.subjects:
        for v in s.virt:
            if v.physical in phys:
                pa = phys[v.physical].address
                spans.append((pa, pa + v.size, (s.name, v, pa)))
    out = []
    for (sa, va, pa), (sb, vb, pb) in _overlapping_pairs(spans):
        if va.channel and vb.channel:
            continue
        if va.writable or vb.writable:
            out.append(
                Finding(
                    "R1",
                    ILLEGAL_SHARING,
                    subject=f"{sa}/{sb}",
                    component=f"{va.logical}/{vb.logical}",
                    address=max(pa, pb),
                )
            )
    return out


# --- page-table checks ------------------------------------------------------


def _pages(b: BPolicy, s):
    """Arrays (va, expected pa, perm bits) over every page of ``s`` plus component labels."""
    phys = b.phys_by_name()
    vas, pas, perms, labels = [], [], [], []
    for v in s.virt:
        if v.physical not in phys:
            continue
        n = v.size // PAGE
        vas.append(np.arange(n, dtype=np.uint64) * np.uint64(PAGE) + np.uint64(v.address))
        pas.append(np.arange(n, dtype=np.uint64) * np.uint64(PAGE) + np.uint64(phys[v.physical].address))
        p = Permissions.parse(v.rwe)
        bits = (_kernels.P_R if p.r else 0) | (_kernels.P_W if p.w else 0) | (_kernels.P_X if p.x else 0)
        perms.append(np.full(n, bits, dtype=np.uint8))
        labels.extend([v.logical] * n)
    if not vas:
        empty = np.zeros(0, dtype=np.uint64)
        return empty, empty, np.zeros(0, dtype=np.uint8), labels
    return np.concatenate(vas), np.concatenate(pas), np.concatenate(perms), labels


def _pts_for(b: BPolicy, pts) -> list:
    if isinstance(pts, dict):
        return [pts[s.name] for s in b.subjects]
    return list(pts)


def _walk(b, s, ptf):
    vas, pas, perms, labels = _pages(b, s)
    pa, perm, status, used = ptf.walk_many(vas)
    return vas, pas, perms, labels, pa, perm, status, used


def check_pt_match(b: BPolicy, pts) -> list[Finding]:
    out = []
    for s, ptf in zip(b.subjects, _pts_for(b, pts)):
        vas, pas, _, labels, pa, _, status, _ = _walk(b, s, ptf)
        bad = np.flatnonzero((status != _kernels.ST_OK) | (pa != pas))
        for i in bad:
            note = {_kernels.ST_NOT_PRESENT: " (not present)", _kernels.ST_CORRUPT: " (page table corrupt)"}.get(
                int(status[i]), ""
            )
            out.append(Finding("R1", ADDRESS_MISMATCH + note, s.name, labels[i], int(vas[i])))
    return out


def check_permissions(b: BPolicy, pts) -> list[Finding]:
    out = []
    for s, ptf in zip(b.subjects, _pts_for(b, pts)):
        vas, _, perms, labels, _, perm, status, _ = _walk(b, s, ptf)
        bad = np.flatnonzero((status == _kernels.ST_OK) & (perm != perms))
        out.extend(Finding("R2", RWE_MISMATCH, s.name, labels[i], int(vas[i])) for i in bad)
    return out


def check_validity(b: BPolicy, pts) -> list[Finding]:
    out = []
    for s, ptf in zip(b.subjects, _pts_for(b, pts)):
        vas, *_ = _pages(b, s)
        _, _, _, used = ptf.walk_many(vas)
        for i in _kernels.unmarked_present(ptf.words, used):
            out.append(Finding("R3", f"{INVALID_ENTRY} {int(i)}", s.name, entry=int(i)))
    return out


# --- R4 / R5 -----------------------------------------------------------------------


def check_content(b: BPolicy, image, read_file=None) -> list[Finding]:
    read_file = read_file or b.read_file
    img = np.frombuffer(bytes(image.data) if hasattr(image, "data") else bytes(image), dtype=np.uint8)
    out = []
    for c in b.physical:
        if c.address + c.size > img.size:
            out.append(Finding("R4", "component extends beyond image", component=c.name, address=c.address))
            continue
        region = img[c.address : c.address + c.size]
        if c.content.kind == "fill":
            diff = np.flatnonzero(region != c.content.fill)
        else:
            try:
                expected = np.frombuffer(content_bytes(c.content, c.size, read_file), dtype=np.uint8)
            except (OSError, ValueError) as exc:
                out.append(Finding("R4", f"content source unavailable: {exc}", component=c.name))
                continue
            diff = np.flatnonzero(region != expected)
        if diff.size:
            out.append(Finding("R4", "content mismatch", component=c.name, address=c.address + int(diff[0])))
    return out


def check_structures(p: Policy, params: ParamsConcrete) -> list[Finding]:
    """Recompute the kernel structures from the policy and compare field by field."""
    out = []

    def diff(what, msg):
        out.append(Finding("R5", f"{what}: {msg}", component=what.split("[")[0]))

    if params.nsubs != len(p.subjects):
        diff("nsubs", f"{params.nsubs} != {len(p.subjects)}")
    if params.ncpus != p.ncpus:
        diff("ncpus", f"{params.ncpus} != {p.ncpus}")

    sd = derive_sched(p)
    if len(params.sched_plans) != len(sd.plans):
        diff("sched_plans", f"{len(params.sched_plans)} major frames, expected {len(sd.plans)}")
    for m, (got_mf, want_mf) in enumerate(zip(params.sched_plans, sd.plans)):
        if len(got_mf) != len(want_mf):
            diff(f"sched_plans[{m}]", f"{len(got_mf)} cpus, expected {len(want_mf)}")
        for c, (got, want) in enumerate(zip(got_mf, want_mf)):
            if len(got) != len(want):
                diff(f"sched_plans[{m}][{c}]", f"{len(got)} minor frames, expected {len(want)}")
            for k, (g, w) in enumerate(zip(got, want)):
                if tuple(g) != tuple(w):
                    diff(f"sched_plans[{m}][{c}][{k}]", f"(subject, deadline) {tuple(g)} != {tuple(w)}")
    if list(params.major_frames) != list(sd.major_frames):
        diff("major_frames", f"{params.major_frames} != {sd.major_frames}")

    want_routing = {r.vector: (r.subject, r.dest_vector) for r in p.routing}
    for v in sorted(set(want_routing) | set(params.vector_routing)):
        g, w = params.vector_routing.get(v), want_routing.get(v)
        if g is None or w is None or tuple(g) != tuple(w):
            diff(f"vector_routing[{v}]", f"{g} != {w}")

    if len(params.subject_specs) != len(p.subjects):
        diff("subject_specs", f"{len(params.subject_specs)} entries, expected {len(p.subjects)}")
    for i, (spec, s) in enumerate(zip(params.subject_specs, p.subjects)):
        want = (s.name, s.cpu, s.id, s.id, s.ip, s.sp)
        got = (spec.name, spec.cpu, spec.pt_id, spec.vmcs_id, spec.ip, spec.sp)
        if got != want:
            diff(f"subject_specs[{i}]", f"{got} != {want}")
    return out


# --- aggregate ------------------------------------------------------------------------


def check_all(policy: Policy, bpolicy: BPolicy, pts, image, params: ParamsConcrete, read_file=None) -> ConditionReport:
    report = ConditionReport()
    stages = {
        "R1": lambda: check_phys_overlap(bpolicy) + check_virt_overlap(bpolicy) + check_pt_match(bpolicy, pts),
        "R2": lambda: check_permissions(bpolicy, pts),
        "R3": lambda: check_validity(bpolicy, pts),
        "R4": lambda: check_content(bpolicy, image, read_file),
        "R5": lambda: check_structures(policy, params),
    }
    for cond, run in stages.items():
        t0 = time.perf_counter()
        report.findings.extend(run())
        report.millis[cond] = (time.perf_counter() - t0) * 1e3
    return report


def check_artifacts(art) -> ConditionReport:
    return check_all(art.policy, art.bpolicy, art.pts, art.image, art.params_concrete, art.read_file)


# --- brute-force oracle -----------------------------------------------------------------

NAIVE_MAX_BOUND = 1 << 25


def _naive_translate(data: bytes, pt_base: int, va: int):
    """Independent 4-level walk over raw bytes: None, "corrupt", or (pa, w, x)."""
    base_off = 0
    w, x = True, True
    for level in range(4):
        index = (va >> (39 - 9 * level)) & 0x1FF
        pos = base_off + index * 8
        raw = int.from_bytes(data[pos : pos + 8], "little")
        if raw & 1 == 0:
            return None
        w &= bool(raw >> 1 & 1)
        x &= not raw >> 63
        addr = raw & 0x000F_FFFF_FFFF_F000
        if level == 3:
            return addr + (va & 0xFFF), w, x
        base_off = addr - pt_base
        if base_off < 0 or base_off + 4096 > len(data):
            return "corrupt"
    return None


def naive_check(b: BPolicy, pts, image, bound: int, read_file=None) -> ConditionReport:
    """Evaluate R1-R4 by visiting every page-aligned address below ``bound``."""
    if bound > NAIVE_MAX_BOUND:
        raise ValueError(f"naive bound {bound:#x} exceeds {NAIVE_MAX_BOUND:#x}")
    read_file = read_file or b.read_file
    img = bytes(image.data) if hasattr(image, "data") else bytes(image)
    phys = b.phys_by_name()
    report = ConditionReport(checked=("R1", "R2", "R3", "R4"))
    add = report.findings.append

    # R1 (a): every physical page claimed by at most one component
    owner = {}
    for c in b.physical:
        for page in range(c.address // PAGE, (c.address + c.size) // PAGE):
            if page in owner:
                add(Finding("R1", ILLEGAL_SHARING, component=f"{owner[page]}/{c.name}", address=page * PAGE))
            else:
                owner[page] = c.name

    mapped = {}  # pa page -> list of (subject, va, channel, writable)
    for s, ptf in zip(b.subjects, _pts_for(b, pts)):
        valid = {}
        for v in s.virt:
            c = phys[v.physical]
            for off in range(0, v.size, PAGE):
                if v.address + off >= bound:
                    raise ValueError(f"{s.name}.{v.logical} reaches beyond the naive bound {bound:#x}")
                valid[v.address + off] = (c.address + off, v)
        data = ptf.data
        for va in range(0, bound, PAGE):
            t = _naive_translate(data, ptf.pt_base, va)
            if va not in valid:
                if t is not None:
                    add(Finding("R3", "invalid address mapped", s.name, address=va))
                continue
            want_pa, v = valid[va]
            if t is None or t == "corrupt" or t[0] != want_pa:
                add(Finding("R1", ADDRESS_MISMATCH, s.name, v.logical, va))
                continue
            pa, w, x = t
            want = Permissions.parse(v.rwe)
            if (w, x) != (want.w, want.x):
                add(Finding("R2", RWE_MISMATCH, s.name, v.logical, va))
            mapped.setdefault(pa // PAGE, []).append((s.name, va, v.channel, v.writable))

    # R1 (b), (c): distinct addresses share a frame only as a declared channel or read-only
    for page, users in mapped.items():
        for i, (s1, a1, ch1, w1) in enumerate(users):
            for s2, a2, ch2, w2 in users[i + 1 :]:
                if not (ch1 and ch2) and (w1 or w2):
                    add(Finding("R1", ILLEGAL_SHARING, f"{s1}/{s2}", address=page * PAGE))

    # R4: component contents, page by page
    for c in b.physical:
        try:
            expected = content_bytes(c.content, c.size, read_file)
        except (OSError, ValueError) as exc:
            add(Finding("R4", f"content source unavailable: {exc}", component=c.name))
            continue
        for off in range(0, c.size, PAGE):
            if img[c.address + off : c.address + off + PAGE] != expected[off : off + PAGE]:
                add(Finding("R4", "content mismatch", component=c.name, address=c.address + off))
                break
    return report
