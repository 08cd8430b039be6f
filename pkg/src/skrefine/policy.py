"""System policy and B-policy: data model, XML codec, validation, schedule derivation."""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from xml.parsers import expat
from xml.sax.saxutils import quoteattr

PAGE = 4096
MAX_TICKS = 1 << 32
MAX_VA = 1 << 48


class PolicyError(Exception):
    """Raised when a policy cannot be parsed or fails validation."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    line: int | None = None

    def __str__(self):
        where = f"line {self.line}: " if self.line is not None else ""
        return f"{where}{self.message} [{self.code}]"


# --- minimal XML tree with source lines ------------------------------------


@dataclass
class _Node:
    tag: str
    attrib: dict
    line: int
    children: list = field(default_factory=list)


def _parse_xml(text: str) -> _Node:
    parser = expat.ParserCreate()
    stack: list[_Node] = []
    root: list[_Node] = []

    def start(tag, attrs):
        node = _Node(tag, dict(attrs), parser.CurrentLineNumber)
        if stack:
            stack[-1].children.append(node)
        else:
            root.append(node)
        stack.append(node)

    def end(tag):
        stack.pop()

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise PolicyError([Diagnostic("xml", f"malformed XML: {expat.ErrorString(exc.code)}", exc.lineno)])
    return root[0]


def _attr(node: _Node, name: str, conv=str, default=None):
    if name not in node.attrib:
        if default is not None:
            return default
        raise PolicyError([Diagnostic("missing-attribute", f"<{node.tag}> lacks attribute {name!r}", node.line)])
    raw = node.attrib[name]
    try:
        return conv(raw)
    except ValueError:
        raise PolicyError([Diagnostic("bad-attribute", f"<{node.tag}> {name}={raw!r} is invalid", node.line)])


def _int(text: str) -> int:
    return int(text, 0)


def _bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(text)


def _unknown(node: _Node) -> PolicyError:
    return PolicyError([Diagnostic("unknown-element", f"unexpected element <{node.tag}>", node.line)])


# --- policy model -----------------------------------------------------------


@dataclass(frozen=True)
class ContentSource:
    kind: str  # "file" | "fill"
    path: str = ""
    fill: int = 0

    @classmethod
    def parse(cls, text: str) -> "ContentSource":
        kind, _, value = text.partition(":")
        if kind == "file" and value:
            return cls("file", path=value)
        if kind == "fill":
            b = int(value, 16)
            if not 0 <= b <= 0xFF:
                raise ValueError(text)
            return cls("fill", fill=b)
        raise ValueError(text)

    def __str__(self):
        return f"file:{self.path}" if self.kind == "file" else f"fill:{self.fill:#04x}"


ZERO = ContentSource("fill", fill=0)


@dataclass(frozen=True)
class Permissions:
    r: bool
    w: bool
    x: bool

    @classmethod
    def parse(cls, rwe: str) -> "Permissions":
        if len(rwe) != 3 or rwe[0] not in "r-" or rwe[1] not in "w-" or rwe[2] not in "xe-":
            raise ValueError(rwe)
        return cls(rwe[0] == "r", rwe[1] == "w", rwe[2] != "-")

    def __str__(self):
        return ("r" if self.r else "-") + ("w" if self.w else "-") + ("x" if self.x else "-")


@dataclass
class MemorySpec:
    logical: str
    address: int
    size: int
    rwe: str
    content: ContentSource = ZERO


@dataclass
class ChannelRef:
    channel: str
    address: int
    writable: bool


@dataclass
class Subject:
    name: str
    id: int
    cpu: int
    ip: int = 0
    sp: int = 0
    memory: list = field(default_factory=list)
    channels: list = field(default_factory=list)

    def vmem_components(self, policy: "Policy"):
        """Yield (logical, address, size, rwe, content, channel-name-or-None)."""
        for m in self.memory:
            yield m.logical, m.address, m.size, m.rwe, m.content, None
        sizes = {c.name: c.size for c in policy.channels}
        for ref in self.channels:
            rwe = "rw-" if ref.writable else "r--"
            yield ref.channel, ref.address, sizes.get(ref.channel, 0), rwe, ZERO, ref.channel


@dataclass
class ChannelSpec:
    name: str
    size: int


@dataclass
class MinorFrameSpec:
    subject: int
    ticks: int


@dataclass
class MajorFrameSpec:
    cpus: list  # cpus[c] -> list[MinorFrameSpec]


@dataclass
class VectorRoutingEntry:
    vector: int
    subject: int
    dest_vector: int


@dataclass
class Policy:
    tick_rate: int
    ncpus: int
    subjects: list
    channels: list = field(default_factory=list)
    schedule: list = field(default_factory=list)
    routing: list = field(default_factory=list)
    base_dir: str = field(default=".", compare=False, repr=False)
    files: dict = field(default_factory=dict, compare=False, repr=False)

    def subject_by_name(self, name: str) -> Subject:
        for s in self.subjects:
            if s.name == name:
                return s
        raise KeyError(name)

    def attachments(self, channel: str):
        return [(s.id, ref) for s in self.subjects for ref in s.channels if ref.channel == channel]

    def read_file(self, path: str) -> bytes:
        if path in self.files:
            return self.files[path]
        with open(os.path.join(self.base_dir, path), "rb") as fh:
            return fh.read()


def content_bytes(src: ContentSource, size: int, read_file) -> bytes:
    """Materialize ``src`` to exactly ``size`` bytes (files are zero-padded)."""
    if src.kind == "fill":
        return bytes([src.fill]) * size
    data = read_file(src.path)
    if len(data) > size:
        raise ValueError(f"{src.path}: {len(data)} bytes exceed component size {size}")
    return data + bytes(size - len(data))


# --- policy XML -------------------------------------------------------------


def _parse_schedule(node: _Node, ncpus_hint=None):
    frames, lines = [], []
    for mf in node.children:
        if mf.tag != "major_frame":
            raise _unknown(mf)
        cpus = {}
        for cpu in mf.children:
            if cpu.tag != "cpu":
                raise _unknown(cpu)
            cid = _attr(cpu, "id", _int)
            if cid in cpus:
                raise PolicyError([Diagnostic("duplicate-cpu", f"cpu {cid} listed twice in major frame", cpu.line)])
            minors = []
            for mn in cpu.children:
                if mn.tag != "minor_fr":
                    raise _unknown(mn)
                minors.append((MinorFrameSpec(_attr(mn, "sub_id", _int), _attr(mn, "ticks", _int)), mn.line))
            cpus[cid] = minors
        frames.append(cpus)
        lines.append(mf.line)
    if not frames:
        raise PolicyError([Diagnostic("no-major-frames", "no major frames", node.line)])
    return frames, lines


def parse_policy(xml_text: str, base_dir: str = ".", validate: bool = True) -> Policy:
    """Parse a policy document.

    A bare ``<scheduling>`` fragment is accepted too: subjects ``sub<k>`` are
    then synthesized from the 1-based ``sub_id`` values, without memory.
    """
    root = _parse_xml(xml_text)
    if root.tag == "scheduling":
        return _policy_from_schedule(root, validate)
    if root.tag != "system":
        raise _unknown(root)

    tick_rate = _attr(root, "tick_rate", _int, default=0)
    ncpus = _attr(root, "ncpus", _int)
    subjects, channels, routing_nodes, sched_node = [], [], [], None
    names = {}
    for child in root.children:
        if child.tag == "subject":
            name = _attr(child, "name")
            if name in names:
                raise PolicyError([Diagnostic("duplicate-subject", f"duplicate subject name {name!r}", child.line)])
            names[name] = len(subjects)
            subj = Subject(
                name,
                len(subjects),
                _attr(child, "cpu", _int),
                _attr(child, "ip", _int, default=0),
                _attr(child, "sp", _int, default=0),
            )
            for m in child.children:
                if m.tag == "memory":
                    subj.memory.append(
                        MemorySpec(
                            _attr(m, "logical"),
                            _attr(m, "virtual_address", _int),
                            _attr(m, "size", _int),
                            _attr(m, "rwe"),
                            _attr(m, "content", ContentSource.parse, default=ZERO),
                        )
                    )
                elif m.tag == "channel_ref":
                    subj.channels.append(
                        ChannelRef(_attr(m, "name"), _attr(m, "virtual_address", _int), _attr(m, "writable", _bool))
                    )
                else:
                    raise _unknown(m)
            subjects.append(subj)
        elif child.tag == "channels":
            for ch in child.children:
                if ch.tag != "channel":
                    raise _unknown(ch)
                channels.append(ChannelSpec(_attr(ch, "name"), _attr(ch, "size", _int)))
        elif child.tag == "scheduling":
            sched_node = child
            tick_rate = _attr(child, "tick_rate", _int, default=tick_rate)
        elif child.tag == "routing":
            routing_nodes.extend(child.children)
        else:
            raise _unknown(child)

    if sched_node is None:
        raise PolicyError([Diagnostic("no-major-frames", "no major frames", root.line)])
    frames, mf_lines = _parse_schedule(sched_node)
    schedule = []
    for cpus, line in zip(frames, mf_lines):
        per_cpu = [[] for _ in range(ncpus)]
        for cid, minors in cpus.items():
            if not 0 <= cid < ncpus:
                raise PolicyError([Diagnostic("bad-cpu", f"cpu {cid} outside 0..{ncpus - 1}", line)])
            for mn, mline in minors:
                if not 1 <= mn.subject <= len(subjects):
                    raise PolicyError(
                        [Diagnostic("unknown-subject", f"minor frame references unknown subject {mn.subject}", mline)]
                    )
                per_cpu[cid].append(MinorFrameSpec(mn.subject - 1, mn.ticks))
        schedule.append(MajorFrameSpec(per_cpu))

    routing = []
    for irq in routing_nodes:
        if irq.tag != "irq":
            raise _unknown(irq)
        sname = _attr(irq, "subject")
        if sname not in names:
            raise PolicyError([Diagnostic("unknown-subject", f"routing targets unknown subject {sname!r}", irq.line)])
        routing.append(VectorRoutingEntry(_attr(irq, "vector", _int), names[sname], _attr(irq, "dest_vector", _int)))

    policy = Policy(tick_rate, ncpus, subjects, channels, schedule, routing, base_dir=base_dir)
    if validate:
        diags = validate_policy(policy)
        if diags:
            raise PolicyError(diags)
    return policy


def _policy_from_schedule(root: _Node, validate: bool) -> Policy:
    frames, _ = _parse_schedule(root)
    ncpus = 1 + max(cid for cpus in frames for cid in cpus)
    sub_cpu = {}
    for cpus in frames:
        for cid, minors in cpus.items():
            for mn, line in minors:
                if mn.subject < 1:
                    raise PolicyError([Diagnostic("unknown-subject", f"bad sub_id {mn.subject}", line)])
                sub_cpu.setdefault(mn.subject, cid)
    nsubs = max(sub_cpu)
    subjects = [Subject(f"sub{k}", k - 1, sub_cpu.get(k, 0)) for k in range(1, nsubs + 1)]
    schedule = []
    for cpus in frames:
        per_cpu = [[] for _ in range(ncpus)]
        for cid, minors in cpus.items():
            per_cpu[cid] = [MinorFrameSpec(mn.subject - 1, mn.ticks) for mn, _ in minors]
        schedule.append(MajorFrameSpec(per_cpu))
    policy = Policy(_attr(root, "tick_rate", _int, default=0), ncpus, subjects, [], schedule, [])
    if validate:
        diags = validate_policy(policy)
        if diags:
            raise PolicyError(diags)
    return policy


def serialize_policy(p: Policy) -> str:
    out = [f'<system tick_rate="{p.tick_rate}" ncpus="{p.ncpus}">']
    for s in p.subjects:
        out.append(f'  <subject name={quoteattr(s.name)} cpu="{s.cpu}" ip="{s.ip:#x}" sp="{s.sp:#x}">')
        for m in s.memory:
            out.append(
                f"    <memory logical={quoteattr(m.logical)} virtual_address=\"{m.address:#x}\""
                f' size="{m.size:#x}" rwe="{m.rwe}" content={quoteattr(str(m.content))}/>'
            )
        for c in s.channels:
            out.append(
                f'    <channel_ref name={quoteattr(c.channel)} virtual_address="{c.address:#x}"'
                f' writable="{str(c.writable).lower()}"/>'
            )
        out.append("  </subject>")
    out.append("  <channels>")
    for c in p.channels:
        out.append(f'    <channel name={quoteattr(c.name)} size="{c.size:#x}"/>')
    out.append("  </channels>")
    out.append(f'  <scheduling tick_rate="{p.tick_rate}">')
    for mf in p.schedule:
        out.append("    <major_frame>")
        for cid, minors in enumerate(mf.cpus):
            out.append(f'      <cpu id="{cid}">')
            for mn in minors:
                out.append(f'        <minor_fr sub_id="{mn.subject + 1}" ticks="{mn.ticks}"/>')
            out.append("      </cpu>")
        out.append("    </major_frame>")
    out.append("  </scheduling>")
    out.append("  <routing>")
    for r in p.routing:
        out.append(
            f'    <irq vector="{r.vector}" subject={quoteattr(p.subjects[r.subject].name)}'
            f' dest_vector="{r.dest_vector}"/>'
        )
    out.append("  </routing>")
    out.append("</system>")
    return "\n".join(out) + "\n"


def write_policy(p: Policy, directory: str, name: str = "policy.xml") -> str:
    os.makedirs(directory, exist_ok=True)
    for rel, data in p.files.items():
        dst = os.path.join(directory, rel)
        os.makedirs(os.path.dirname(dst) or ".", exist_ok=True)
        with open(dst, "wb") as fh:
            fh.write(data)
    path = os.path.join(directory, name)
    with open(path, "w") as fh:
        fh.write(serialize_policy(p))
    return path


def load_policy(path: str, validate: bool = True) -> Policy:
    with open(path) as fh:
        return parse_policy(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)), validate=validate)


# --- validation -------------------------------------------------------------


def _aligned(x: int) -> bool:
    return x % PAGE == 0


def validate_policy(p: Policy) -> list[Diagnostic]:
    """Return every structural problem in ``p``; empty means valid."""
    diags: list[Diagnostic] = []

    def bad(code, msg):
        diags.append(Diagnostic(code, msg))

    if p.ncpus < 1:
        bad("ncpus", "ncpus must be positive")
    names = [s.name for s in p.subjects]
    for name in {n for n in names if names.count(n) > 1}:
        bad("duplicate-subject", f"duplicate subject name {name!r}")
    for idx, s in enumerate(p.subjects):
        if s.id != idx:
            bad("subject-id", f"subject {s.name!r} has id {s.id}, expected {idx}")
        if not 0 <= s.cpu < p.ncpus:
            bad("bad-cpu", f"subject {s.name!r} assigned to cpu {s.cpu} outside 0..{p.ncpus - 1}")

    channels = {c.name: c for c in p.channels}
    if len(channels) != len(p.channels):
        bad("duplicate-channel", "duplicate channel name")
    for c in p.channels:
        if c.size <= 0 or not _aligned(c.size):
            bad("alignment", f"channel {c.name!r} size {c.size:#x} not a positive page multiple")
        att = p.attachments(c.name)
        if len(att) < 2:
            bad("channel-attachments", f"channel {c.name!r} has {len(att)} attachment(s), needs at least 2")

    for s in p.subjects:
        spans = []
        logicals = [m.logical for m in s.memory]
        for name in {n for n in logicals if logicals.count(n) > 1}:
            bad("duplicate-component", f"subject {s.name!r} declares {name!r} twice")
        for ref in s.channels:
            if ref.channel not in channels:
                bad("unknown-channel", f"subject {s.name!r} references unknown channel {ref.channel!r}")
        for logical, addr, size, rwe, _content, _ch in s.vmem_components(p):
            if not (_aligned(addr) and _aligned(size)) or size <= 0:
                bad("alignment", f"{s.name}.{logical}: address {addr:#x}/size {size:#x} not page aligned")
            if addr + size > MAX_VA:
                bad("address-range", f"{s.name}.{logical}: beyond 48-bit virtual address space")
            try:
                perm = Permissions.parse(rwe)
                if not perm.r:
                    bad("permissions", f"{s.name}.{logical}: components must be readable ({rwe})")
            except ValueError:
                bad("permissions", f"{s.name}.{logical}: malformed rwe {rwe!r}")
            spans.append((addr, addr + size, logical))
        spans.sort()
        for (a0, a1, n0), (b0, b1, n1) in zip(spans, spans[1:]):
            if b0 < a1:
                bad("virtual-overlap", f"subject {s.name!r}: components {n0!r} and {n1!r} overlap")

    if not p.schedule:
        bad("no-major-frames", "no major frames")
    for m, mf in enumerate(p.schedule):
        if len(mf.cpus) != p.ncpus:
            bad("missing-cpu", f"major frame {m} lists {len(mf.cpus)} cpus, expected {p.ncpus}")
        totals = []
        for cid, minors in enumerate(mf.cpus):
            if not minors:
                bad("missing-cpu", f"major frame {m} has no minor frames for cpu {cid}")
            for mn in minors:
                if not 0 < mn.ticks < MAX_TICKS:
                    bad("ticks-range", f"ticks out of range: major frame {m} cpu {cid} has {mn.ticks}")
                if not 0 <= mn.subject < len(p.subjects):
                    bad("unknown-subject", f"major frame {m} cpu {cid} references unknown subject {mn.subject}")
                elif p.subjects[mn.subject].cpu != cid:
                    bad(
                        "subject-cpu",
                        f"subject {p.subjects[mn.subject].name!r} scheduled on cpu {cid} "
                        f"but assigned to cpu {p.subjects[mn.subject].cpu}",
                    )
            totals.append(sum(mn.ticks for mn in minors))
        if len(set(totals)) > 1:
            bad("major-frame-length", f"major frame length mismatch in frame {m}: per-cpu totals {totals}")

    vectors = [r.vector for r in p.routing]
    for v in {v for v in vectors if vectors.count(v) > 1}:
        bad("duplicate-vector", f"vector {v} routed twice")
    for r in p.routing:
        if not 0 <= r.vector <= 255:
            bad("vector-range", f"source vector {r.vector} outside 0..255")
        if not 0 <= r.dest_vector <= 63:
            bad("vector-range", f"destination vector {r.dest_vector} outside 0..63")
        if not 0 <= r.subject < len(p.subjects):
            bad("unknown-subject", f"vector {r.vector} routed to unknown subject {r.subject}")
    return diags


# --- derived scheduling structures -----------------------------------------


@dataclass
class SchedDerived:
    plans: list  # plans[major][cpu] -> list of (subject, cumulative deadline)
    major_frames: list
    major_frame_ends: list
    cycle_length: int

    def to_json(self):
        return {
            "plans": [[[list(e) for e in cpu] for cpu in mf] for mf in self.plans],
            "major_frames": list(self.major_frames),
            "major_frame_ends": list(self.major_frame_ends),
            "cycle_length": self.cycle_length,
        }

    @classmethod
    def from_json(cls, d) -> "SchedDerived":
        plans = [[[tuple(e) for e in cpu] for cpu in mf] for mf in d["plans"]]
        return cls(plans, list(d["major_frames"]), list(d["major_frame_ends"]), d["cycle_length"])

    def frame_start(self, major: int) -> int:
        return self.major_frame_ends[major - 1] if major > 0 else 0


def derive_sched(p: Policy) -> SchedDerived:
    plans = []
    for mf in p.schedule:
        plans.append(
            [
                list(zip([mn.subject for mn in minors], itertools.accumulate(mn.ticks for mn in minors)))
                for minors in mf.cpus
            ]
        )
    major_frames = [mf[0][-1][1] for mf in plans]
    ends = list(itertools.accumulate(major_frames))
    return SchedDerived(plans, major_frames, ends, ends[-1])


def sched_violations(sd: SchedDerived) -> list[str]:
    """Structural invariants of the derived schedule, as violated item ids."""
    bad = []
    for m, mf in enumerate(sd.plans):
        for plan in mf:
            ds = [d for _, d in plan]
            if not ds or any(d <= 0 for d in ds):
                bad.append("i8")
            if any(b <= a for a, b in zip(ds, ds[1:])):
                bad.extend(["i9", "i17"])
            if ds and ds[-1] != sd.major_frames[m]:
                bad.append("i12")
    if any(x <= 0 for x in sd.major_frames) or any(x <= 0 for x in sd.major_frame_ends):
        bad.append("i10")
    if any(b <= a for a, b in zip(sd.major_frame_ends, sd.major_frame_ends[1:])):
        bad.extend(["i11", "i18"])
    diffs = [sd.major_frame_ends[0]] + [b - a for a, b in zip(sd.major_frame_ends, sd.major_frame_ends[1:])]
    if diffs != list(sd.major_frames):
        bad.append("i13")
    if sd.cycle_length != sd.major_frame_ends[-1]:
        bad.append("i14")
    return sorted(set(bad), key=lambda s: int(s[1:]))


# --- B-policy ---------------------------------------------------------------


@dataclass
class PhysComponent:
    name: str
    address: int
    size: int
    content: ContentSource = ZERO


@dataclass
class VirtComponent:
    logical: str
    address: int
    size: int
    rwe: str
    physical: str
    channel: bool = False

    @property
    def writable(self) -> bool:
        return self.rwe[1] == "w"


@dataclass
class BSubject:
    name: str
    pt_base: int
    virt: list = field(default_factory=list)


@dataclass
class BPolicy:
    physical: list
    subjects: list
    base_dir: str = field(default=".", compare=False, repr=False)
    files: dict = field(default_factory=dict, compare=False, repr=False)

    def phys_by_name(self) -> dict:
        return {c.name: c for c in self.physical}

    def subject(self, name: str) -> BSubject:
        for s in self.subjects:
            if s.name == name:
                return s
        raise KeyError(name)

    def read_file(self, path: str) -> bytes:
        if path in self.files:
            return self.files[path]
        with open(os.path.join(self.base_dir, path), "rb") as fh:
            return fh.read()

    def resolved(self, s: BSubject):
        """Yield (virt, physical address) for subject ``s``."""
        phys = self.phys_by_name()
        for v in s.virt:
            yield v, phys[v.physical].address


def validate_bpolicy(b: BPolicy) -> list[Diagnostic]:
    diags = []
    phys = {}
    for c in b.physical:
        if c.name in phys:
            diags.append(Diagnostic("duplicate-physical", f"duplicate physical name {c.name!r}"))
        phys[c.name] = c
        if not (_aligned(c.address) and _aligned(c.size)) or c.size <= 0:
            diags.append(Diagnostic("alignment", f"physical {c.name!r} not page aligned"))
    for s in b.subjects:
        if not _aligned(s.pt_base):
            diags.append(Diagnostic("alignment", f"subject {s.name!r} pt_base {s.pt_base:#x} not page aligned"))
        for v in s.virt:
            if v.physical not in phys:
                diags.append(
                    Diagnostic("dangling-physical", f"{s.name}.{v.logical} references unknown physical {v.physical!r}")
                )
            elif phys[v.physical].size != v.size:
                diags.append(
                    Diagnostic(
                        "size-mismatch",
                        f"{s.name}.{v.logical} size {v.size:#x} != physical {v.physical!r} size "
                        f"{phys[v.physical].size:#x}",
                    )
                )
            if not (_aligned(v.address) and _aligned(v.size)):
                diags.append(Diagnostic("alignment", f"{s.name}.{v.logical} not page aligned"))
    return diags


def parse_bpolicy(xml_text: str, base_dir: str = ".", validate: bool = True) -> BPolicy:
    root = _parse_xml(xml_text)
    if root.tag != "bpolicy":
        raise _unknown(root)
    physical, subjects = [], []
    for child in root.children:
        if child.tag == "physical":
            physical.append(
                PhysComponent(
                    _attr(child, "name"),
                    _attr(child, "address", _int),
                    _attr(child, "size", _int),
                    _attr(child, "content", ContentSource.parse, default=ZERO),
                )
            )
        elif child.tag == "subject":
            s = BSubject(_attr(child, "name"), _attr(child, "pt_base", _int))
            for v in child.children:
                if v.tag != "virt":
                    raise _unknown(v)
                s.virt.append(
                    VirtComponent(
                        _attr(v, "logical"),
                        _attr(v, "virtual_address", _int),
                        _attr(v, "size", _int),
                        _attr(v, "rwe"),
                        _attr(v, "physical"),
                        _attr(v, "channel", _bool, default=False),
                    )
                )
            subjects.append(s)
        else:
            raise _unknown(child)
    b = BPolicy(physical, subjects, base_dir=base_dir)
    if validate:
        diags = validate_bpolicy(b)
        if diags:
            raise PolicyError(diags)
    return b


def serialize_bpolicy(b: BPolicy) -> str:
    out = ["<bpolicy>"]
    for c in b.physical:
        out.append(
            f'  <physical name={quoteattr(c.name)} address="{c.address:#x}" size="{c.size:#x}"'
            f" content={quoteattr(str(c.content))}/>"
        )
    for s in b.subjects:
        out.append(f'  <subject name={quoteattr(s.name)} pt_base="{s.pt_base:#x}">')
        for v in s.virt:
            out.append(
                f'    <virt logical={quoteattr(v.logical)} virtual_address="{v.address:#x}" size="{v.size:#x}"'
                f' rwe="{v.rwe}" physical={quoteattr(v.physical)} channel="{str(v.channel).lower()}"/>'
            )
        out.append("  </subject>")
    out.append("</bpolicy>")
    return "\n".join(out) + "\n"


def load_bpolicy(path: str, validate: bool = True) -> BPolicy:
    with open(path) as fh:
        return parse_bpolicy(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)), validate=validate)
