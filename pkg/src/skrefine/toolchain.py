"""Desk-scale system generator: physical layout, page tables, image, parameters.

Fault switches let tests produce artifacts that break exactly one of the
checker's conditions:

==================  ====  ==============================================
switch              cond  effect
==================  ====  ==============================================
overlap             R1    move a zero-filled component onto another
undeclared_sharing  R1    drop the channel flag of a writable attachment
pt_redirect         R1    point one leaf at another subject's page
pt_clear_present    R1    clear the present bit of one valid leaf
perm_write          R2    clear the writable bit of one rw leaf
perm_nx             R2    clear NX on one non-executable leaf
spurious_present    R3    set a present bit in an unused leaf slot
spurious_pdpt       R3    set a present bit in an unused PDPT slot
image_byte          R4    flip one byte of a component in the image
sched_deadline      R5    bump one minor-frame deadline by one tick
routing             R5    reroute one vector to a different subject
==================  ====  ==============================================
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import paging
from .paging import ENTRIES, PRESENT, WRITABLE, NO_EXECUTE, PagingStructureFile
from .policy import (
    PAGE,
    BPolicy,
    BSubject,
    ContentSource,
    Permissions,
    PhysComponent,
    Policy,
    PolicyError,
    SchedDerived,
    VirtComponent,
    ZERO,
    content_bytes,
    derive_sched,
    serialize_bpolicy,
    write_policy,
    validate_policy,
)

DEFAULT_CAP = 64 << 20
FIRST_ADDRESS = 0x1000

FAULTS = {
    "overlap": "R1",
    "undeclared_sharing": "R1",
    "pt_redirect": "R1",
    "pt_clear_present": "R1",
    "perm_write": "R2",
    "perm_nx": "R2",
    "spurious_present": "R3",
    "spurious_pdpt": "R3",
    "image_byte": "R4",
    "sched_deadline": "R5",
    "routing": "R5",
}
# the six switches covered by the fault-detection acceptance test
PRIMARY_FAULTS = ("overlap", "undeclared_sharing", "pt_redirect", "spurious_present", "image_byte", "sched_deadline")


class GenerationError(Exception):
    pass


class FaultNotApplicable(GenerationError):
    pass


def _blob_path(subject: str, logical: str) -> str:
    return f"content/{subject}.{logical}.bin"


def pt_path(subject: str) -> str:
    return f"pts/{subject}.pt"


# --- layout -------------------------------------------------------------------


def _virtual_pages(p: Policy, s) -> list[int]:
    return [a + off for _, a, size, *_ in s.vmem_components(p) for off in range(0, size, PAGE)]


def layout(p: Policy, cap: int = DEFAULT_CAP) -> BPolicy:
    """Place every component in physical memory.

    Order: subject components by (subject id, declaration order), then
    channels, then each subject's paging structures, starting at 0x1000.
    """
    physical, subjects = [], []
    cursor = FIRST_ADDRESS
    files = {}

    def place(name, size, content):
        nonlocal cursor
        comp = PhysComponent(name, cursor, size, content)
        physical.append(comp)
        cursor += size
        return comp

    for s in p.subjects:
        for m in s.memory:
            content = m.content
            if content.kind == "file":
                path = _blob_path(s.name, m.logical)
                data = p.read_file(content.path)
                if len(data) > m.size:
                    raise GenerationError(f"{content.path}: {len(data)} bytes exceed component {m.logical!r}")
                files[path] = data
                content = ContentSource("file", path=path)
            place(f"{s.name}.{m.logical}", m.size, content)
    for c in p.channels:
        place(c.name, c.size, ZERO)
    pt_bases = []
    for s in p.subjects:
        nbytes = sum(paging.structure_count(_virtual_pages(p, s))) * paging.STRUCT_BYTES
        pt_bases.append(place(f"{s.name}.pt", nbytes, ContentSource("file", path=pt_path(s.name))).address)
    if cursor > cap:
        raise GenerationError(f"physical layout needs {cursor:#x} bytes, cap is {cap:#x}")

    names = [c.name for c in physical]
    if len(set(names)) != len(names):
        raise GenerationError("physical component names collide")
    for s, base in zip(p.subjects, pt_bases):
        bs = BSubject(s.name, base)
        for m in s.memory:
            bs.virt.append(VirtComponent(m.logical, m.address, m.size, m.rwe, f"{s.name}.{m.logical}", False))
        for ref in s.channels:
            size = next(c.size for c in p.channels if c.name == ref.channel)
            rwe = "rw-" if ref.writable else "r--"
            bs.virt.append(VirtComponent(ref.channel, ref.address, size, rwe, ref.channel, True))
        subjects.append(bs)
    return BPolicy(physical, subjects, files=files)


# --- page tables ----------------------------------------------------------------


def subject_pages(b: BPolicy, s: BSubject):
    """Yield (va, pa, Permissions, virt) for every 4 KiB page of ``s``."""
    for v, pa in b.resolved(s):
        perm = Permissions.parse(v.rwe)
        for off in range(0, v.size, PAGE):
            yield v.address + off, pa + off, perm, v


def gen_page_tables(b: BPolicy, s: int | str) -> PagingStructureFile:
    bs = b.subjects[s] if isinstance(s, int) else b.subject(s)
    return paging.build_tables(((va, pa, perm) for va, pa, perm, _ in subject_pages(b, bs)), bs.pt_base)


# --- image ----------------------------------------------------------------------


@dataclass
class Image:
    data: bytearray

    def __len__(self):
        return len(self.data)


def build_image(b: BPolicy, pts=None, cap: int = DEFAULT_CAP) -> Image:
    """Fill every physical component's bytes into an identity-mapped image.

    ``pts`` (subject name -> PagingStructureFile) supplies paging-structure
    contents not yet present as files.
    """
    overlay = dict(b.files)
    for name, ptf in (pts or {}).items():
        overlay[pt_path(name)] = ptf.data

    def read(path):
        if path in overlay:
            return overlay[path]
        return b.read_file(path)

    end = max((c.address + c.size for c in b.physical), default=0)
    end = -(-end // PAGE) * PAGE
    if end > cap:
        raise GenerationError(f"image of {end:#x} bytes exceeds cap {cap:#x}")
    img = np.zeros(end, dtype=np.uint8)
    for c in b.physical:
        if c.content.kind == "fill":
            img[c.address : c.address + c.size] = c.content.fill
        else:
            try:
                data = content_bytes(c.content, c.size, read)
            except OSError as exc:
                raise GenerationError(f"cannot read content of {c.name!r}: {exc}") from exc
            except ValueError as exc:
                raise GenerationError(str(exc)) from exc
            img[c.address : c.address + c.size] = np.frombuffer(data, dtype=np.uint8)
    return Image(bytearray(img.tobytes()))


# --- parameter bundles --------------------------------------------------------------


@dataclass
class AbstractSubject:
    name: str
    cpu: int
    ip: int
    sp: int
    pages: dict  # page number -> Permissions
    components: list  # (address, size, ContentSource) of non-channel memory
    channel_pages: dict  # page number -> chmem offset


@dataclass
class ParamsAbstract:
    nsubs: int
    ncpus: int
    subjects: list
    chmem_size: int
    sched: SchedDerived
    routing: dict  # vector -> (subject, dest_vector)

    def to_json(self):
        return {
            "nsubs": self.nsubs,
            "ncpus": self.ncpus,
            "chmem_size": self.chmem_size,
            "sched": self.sched.to_json(),
            "routing": {str(k): list(v) for k, v in self.routing.items()},
            "subjects": [
                {
                    "name": s.name,
                    "cpu": s.cpu,
                    "ip": s.ip,
                    "sp": s.sp,
                    "pages": {str(k): str(v) for k, v in s.pages.items()},
                    "components": [[a, n, str(c)] for a, n, c in s.components],
                    "channel_pages": {str(k): v for k, v in s.channel_pages.items()},
                }
                for s in self.subjects
            ],
        }

    @classmethod
    def from_json(cls, d) -> "ParamsAbstract":
        subjects = [
            AbstractSubject(
                s["name"],
                s["cpu"],
                s["ip"],
                s["sp"],
                {int(k): Permissions.parse(v) for k, v in s["pages"].items()},
                [(a, n, ContentSource.parse(c)) for a, n, c in s["components"]],
                {int(k): v for k, v in s["channel_pages"].items()},
            )
            for s in d["subjects"]
        ]
        return cls(
            d["nsubs"],
            d["ncpus"],
            subjects,
            d["chmem_size"],
            SchedDerived.from_json(d["sched"]),
            {int(k): tuple(v) for k, v in d["routing"].items()},
        )


@dataclass
class SubjectSpec:
    name: str
    cpu: int
    pt_id: int
    pt_base: int
    vmcs_id: int
    ip: int
    sp: int


@dataclass
class ParamsConcrete:
    nsubs: int
    ncpus: int
    subject_specs: list
    sched_plans: list  # [major][cpu] -> list of (subject, deadline)
    major_frames: list
    vector_routing: dict  # vector -> (subject, dest_vector)
    image: str = "image.bin"
    pt_files: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "nsubs": self.nsubs,
            "ncpus": self.ncpus,
            "subject_specs": [vars(s) for s in self.subject_specs],
            "sched_plans": [[[list(e) for e in cpu] for cpu in mf] for mf in self.sched_plans],
            "major_frames": list(self.major_frames),
            "vector_routing": {str(k): list(v) for k, v in self.vector_routing.items()},
            "image": self.image,
            "pt_files": dict(self.pt_files),
        }

    @classmethod
    def from_json(cls, d) -> "ParamsConcrete":
        return cls(
            d["nsubs"],
            d["ncpus"],
            [SubjectSpec(**s) for s in d["subject_specs"]],
            [[[tuple(e) for e in cpu] for cpu in mf] for mf in d["sched_plans"]],
            list(d["major_frames"]),
            {int(k): tuple(v) for k, v in d["vector_routing"].items()},
            d["image"],
            dict(d["pt_files"]),
        )


def abstract_params(p: Policy, blob_paths: dict | None = None) -> ParamsAbstract:
    """Abstract parameters straight from the policy.

    ``blob_paths`` maps (subject, logical) to the path a file content source
    should be read from, when the generator relocated it.
    """
    offsets, total = {}, 0
    for c in p.channels:
        offsets[c.name] = total
        total += c.size
    subjects = []
    for s in p.subjects:
        pages, comps, chpages = {}, [], {}
        for m in s.memory:
            perm = Permissions.parse(m.rwe)
            for off in range(0, m.size, PAGE):
                pages[(m.address + off) // PAGE] = perm
            content = m.content
            if content.kind == "file" and blob_paths:
                content = ContentSource("file", path=blob_paths.get((s.name, m.logical), content.path))
            comps.append((m.address, m.size, content))
        for ref in s.channels:
            size = next(c.size for c in p.channels if c.name == ref.channel)
            perm = Permissions(True, ref.writable, False)
            for off in range(0, size, PAGE):
                pages[(ref.address + off) // PAGE] = perm
                chpages[(ref.address + off) // PAGE] = offsets[ref.channel] + off
        subjects.append(AbstractSubject(s.name, s.cpu, s.ip, s.sp, pages, comps, chpages))
    routing = {r.vector: (r.subject, r.dest_vector) for r in p.routing}
    return ParamsAbstract(len(p.subjects), p.ncpus, subjects, total, derive_sched(p), routing)


def concrete_params(p: Policy, b: BPolicy) -> ParamsConcrete:
    sd = derive_sched(p)
    specs = [
        SubjectSpec(s.name, s.cpu, s.id, b.subject(s.name).pt_base, s.id, s.ip, s.sp) for s in p.subjects
    ]
    return ParamsConcrete(
        len(p.subjects),
        p.ncpus,
        specs,
        [[list(plan) for plan in mf] for mf in sd.plans],
        list(sd.major_frames),
        {r.vector: (r.subject, r.dest_vector) for r in p.routing},
        "image.bin",
        {s.name: pt_path(s.name) for s in p.subjects},
    )


def gen_parameters(p: Policy, b: BPolicy) -> tuple[ParamsAbstract, ParamsConcrete]:
    blob_paths = {(s.name, m.logical): _blob_path(s.name, m.logical) for s in p.subjects for m in s.memory}
    return abstract_params(p, blob_paths), concrete_params(p, b)


# --- the whole pipeline ---------------------------------------------------------------


@dataclass
class Artifacts:
    policy: Policy
    bpolicy: BPolicy
    pts: list  # by subject id
    image: Image
    params_abstract: ParamsAbstract
    params_concrete: ParamsConcrete
    fault: str | None = None
    fault_detail: str = ""

    @property
    def files(self) -> dict:
        out = dict(self.bpolicy.files)
        for s, ptf in zip(self.policy.subjects, self.pts):
            out[pt_path(s.name)] = ptf.data
        return out

    def pts_by_name(self) -> dict:
        return {s.name: ptf for s, ptf in zip(self.policy.subjects, self.pts)}

    def read_file(self, path: str) -> bytes:
        files = self.files
        if path in files:
            return files[path]
        return self.bpolicy.read_file(path)


def generate(p: Policy, fault: str | None = None, cap: int = DEFAULT_CAP, rng=None) -> Artifacts:
    """Run layout, page-table generation, image assembly and parameter generation."""
    diags = validate_policy(p)
    if diags:
        raise PolicyError(diags)
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault switch {fault!r}; choose from {sorted(FAULTS)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    detail = ""

    b = layout(p, cap)
    if fault == "overlap":
        detail = _fault_overlap(b)
    elif fault == "undeclared_sharing":
        detail = _fault_undeclared_sharing(b)

    pts = [gen_page_tables(b, i) for i in range(len(b.subjects))]
    if fault in ("pt_redirect", "pt_clear_present", "perm_write", "perm_nx", "spurious_present", "spurious_pdpt"):
        detail = _PT_FAULTS[fault](p, b, pts, rng)

    image = build_image(b, {s.name: ptf for s, ptf in zip(b.subjects, pts)}, cap)
    if fault == "image_byte":
        detail = _fault_image_byte(b, image, rng)

    pa, pc = gen_parameters(p, b)
    if fault == "sched_deadline":
        m, c = 0, int(rng.integers(p.ncpus))
        subj, d = pc.sched_plans[m][c][0]
        pc.sched_plans[m][c][0] = (subj, d + 1)
        detail = f"sched_plans[{m}][{c}][0] deadline {d} -> {d + 1}"
    elif fault == "routing":
        if not pc.vector_routing or pc.nsubs < 2:
            raise FaultNotApplicable("routing fault needs a routed vector and two subjects")
        v = min(pc.vector_routing)
        subj, dv = pc.vector_routing[v]
        pc.vector_routing[v] = ((subj + 1) % pc.nsubs, dv)
        detail = f"vector {v} rerouted from subject {subj}"
    return Artifacts(p, b, pts, image, pa, pc, fault, detail)


def write_artifacts(art: Artifacts, outdir: str) -> None:
    """Write policy.xml, bpolicy.xml, pts/*.pt, content/*, image.bin, params.json."""
    os.makedirs(os.path.join(outdir, "pts"), exist_ok=True)
    for rel, data in art.files.items():
        dst = os.path.join(outdir, rel)
        os.makedirs(os.path.dirname(dst), exist_ok=True)
        with open(dst, "wb") as fh:
            fh.write(data)
    relocated = _relocated_policy(art.policy)
    write_policy(relocated, outdir)
    with open(os.path.join(outdir, "bpolicy.xml"), "w") as fh:
        fh.write(serialize_bpolicy(art.bpolicy))
    with open(os.path.join(outdir, "image.bin"), "wb") as fh:
        fh.write(art.image.data)
    with open(os.path.join(outdir, "params.json"), "w") as fh:
        json.dump(
            {"abstract": art.params_abstract.to_json(), "concrete": art.params_concrete.to_json(), "fault": art.fault},
            fh,
            indent=1,
        )


def _relocated_policy(p: Policy) -> Policy:
    """Copy of ``p`` whose file contents point at the generator's content/ copies."""
    import copy

    q = copy.deepcopy(p)
    q.files = {}
    for s in q.subjects:
        for m in s.memory:
            if m.content.kind == "file":
                m.content = ContentSource("file", path=_blob_path(s.name, m.logical))
    return q


def load_params(path: str) -> tuple[ParamsAbstract, ParamsConcrete]:
    with open(path) as fh:
        d = json.load(fh)
    return ParamsAbstract.from_json(d["abstract"]), ParamsConcrete.from_json(d["concrete"])


# --- fault switches ------------------------------------------------------------


def _zero_components(b: BPolicy):
    """Zero-filled, writable, non-channel components with their owning subject."""
    phys = b.phys_by_name()
    out = []
    for s in b.subjects:
        for v in s.virt:
            c = phys[v.physical]
            if not v.channel and v.writable and c.content == ZERO:
                out.append((s.name, v, c))
    return out


def _fault_overlap(b: BPolicy) -> str:
    zc = _zero_components(b)
    for sa, va, ca in zc:
        for sb, vb, cb in zc:
            if sa != sb and ca.size <= cb.size:
                ca.address = cb.address
                return f"{ca.name} moved onto {cb.name} at {cb.address:#x}"
    raise FaultNotApplicable("overlap fault needs zero-filled writable components in two subjects")


def _fault_undeclared_sharing(b: BPolicy) -> str:
    for s in b.subjects:
        for v in s.virt:
            if v.channel and v.writable:
                v.channel = False
                return f"{s.name}.{v.logical} no longer flagged as channel"
    raise FaultNotApplicable("undeclared_sharing fault needs a writable channel attachment")


def _leaf_slot(ptf: PagingStructureFile, va: int) -> int:
    used, _, _ = ptf.walk(va)
    return used[3]


def _patch(pts, i, slot, raw):
    ptf = pts[i]
    words = ptf.words.copy()
    words[slot] = raw
    pts[i] = PagingStructureFile(words.tobytes(), ptf.pt_base, ptf.levels)


def _first_scheduled(p: Policy) -> list[int]:
    """Subject ids ordered so the subject that runs first on cpu 0 comes first."""
    first = p.schedule[0].cpus[0][0].subject
    return [first] + [s.id for s in p.subjects if s.id != first]


def _fault_pt_redirect(p, b, pts, rng):
    zc = _zero_components(b)
    phys = b.phys_by_name()
    for i in _first_scheduled(p):
        s = b.subjects[i]
        for v in s.virt:
            if v.channel or not v.writable or phys[v.physical].content != ZERO:
                continue
            for owner, _, target in zc:
                if owner != s.name:
                    slot = _leaf_slot(pts[i], v.address)
                    old = pts[i].entries[slot]
                    _patch(pts, i, slot, (old & ~paging.ADDR_MASK) | target.address)
                    return f"{s.name} va {v.address:#x} now maps {target.name} at {target.address:#x}"
    # fallback: redirect the first page of the first subject one page up
    s = b.subjects[0]
    v = s.virt[0]
    slot = _leaf_slot(pts[0], v.address)
    old = pts[0].entries[slot]
    _patch(pts, 0, slot, old + PAGE)
    return f"{s.name} va {v.address:#x} redirected one page up"


def _pick_page(b, pts, rng, want):
    cands = [
        (i, va)
        for i, s in enumerate(b.subjects)
        for va, _pa, perm, v in subject_pages(b, s)
        if want(perm, v)
    ]
    if not cands:
        raise FaultNotApplicable("no page matches the fault's requirements")
    return cands[int(rng.integers(len(cands)))]


def _fault_pt_clear_present(p, b, pts, rng):
    i, va = _pick_page(b, pts, rng, lambda perm, v: True)
    slot = _leaf_slot(pts[i], va)
    _patch(pts, i, slot, 0)
    return f"{b.subjects[i].name} va {va:#x} leaf cleared"


def _fault_perm_write(p, b, pts, rng):
    i, va = _pick_page(b, pts, rng, lambda perm, v: perm.w)
    slot = _leaf_slot(pts[i], va)
    _patch(pts, i, slot, pts[i].entries[slot] & ~WRITABLE)
    return f"{b.subjects[i].name} va {va:#x} writable bit cleared"


def _fault_perm_nx(p, b, pts, rng):
    i, va = _pick_page(b, pts, rng, lambda perm, v: not perm.x)
    slot = _leaf_slot(pts[i], va)
    _patch(pts, i, slot, pts[i].entries[slot] & ~NO_EXECUTE)
    return f"{b.subjects[i].name} va {va:#x} NX cleared"


def _fault_spurious(level):
    def fault(p, b, pts, rng):
        cands = []
        for i, ptf in enumerate(pts):
            regions = ptf.level_regions()
            start, stop = regions[level]
            for struct in range(start, stop):
                row = ptf.words[struct * ENTRIES : (struct + 1) * ENTRIES]
                free = np.flatnonzero(row == 0)
                if free.size:
                    cands.append((i, struct * ENTRIES + int(free[0])))
        if not cands:
            raise FaultNotApplicable("no free paging-structure slot")
        i, slot = cands[int(rng.integers(len(cands)))]
        # a present non-leaf entry aimed back at the PML4 keeps the walk in bounds
        raw = PRESENT if level == 3 else pts[i].pt_base | PRESENT | WRITABLE
        _patch(pts, i, slot, raw)
        return f"{b.subjects[i].name} entry {slot} spuriously present"

    return fault


_PT_FAULTS = {
    "pt_redirect": _fault_pt_redirect,
    "pt_clear_present": _fault_pt_clear_present,
    "perm_write": _fault_perm_write,
    "perm_nx": _fault_perm_nx,
    "spurious_present": _fault_spurious(3),
    "spurious_pdpt": _fault_spurious(1),
}


def _fault_image_byte(b: BPolicy, image: Image, rng) -> str:
    tables = {f"{s.name}.pt" for s in b.subjects}
    comps = [c for c in b.physical if c.name not in tables]
    c = comps[int(rng.integers(len(comps)))]
    off = int(rng.integers(c.size))
    image.data[c.address + off] ^= 0xFF
    return f"image byte {c.address + off:#x} in {c.name} flipped"


def load_artifacts(
    policy_path: str,
    bpolicy_path: str,
    ptdir: str,
    image_path: str,
    params_path: str,
) -> Artifacts:
    """Read generated artifacts back from disk.

    Paging structures are taken from ``ptdir/<subject>.pt`` and serve as the
    content of the subjects' page-table components.
    """
    from .policy import load_bpolicy, load_policy

    p = load_policy(policy_path)
    b = load_bpolicy(bpolicy_path)
    pts = []
    for s in b.subjects:
        with open(os.path.join(ptdir, f"{s.name}.pt"), "rb") as fh:
            pts.append(PagingStructureFile(fh.read(), s.pt_base))
    with open(image_path, "rb") as fh:
        image = Image(bytearray(fh.read()))
    pa, pc = load_params(params_path)
    with open(params_path) as fh:
        fault = json.load(fh).get("fault")
    return Artifacts(p, b, pts, image, pa, pc, fault)


def load_config(directory: str) -> Artifacts:
    """load_artifacts for a directory written by write_artifacts."""
    j = lambda *parts: os.path.join(directory, *parts)  # noqa: E731
    return load_artifacts(j("policy.xml"), j("bpolicy.xml"), j("pts"), j("image.bin"), j("params.json"))
