"""Machines as named operations over state, and lock-step refinement checking.

A machine is any object with an ``operations`` set of names and a
``step(call)`` method returning the operation's output.  Two machines are
checked in lock-step against a gluing predicate: after ``init`` and after
every joint step the predicate must hold and the outputs must be equal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Protocol, Sequence


@dataclass(frozen=True)
class OperationCall:
    name: str
    input: Any = None

    def __str__(self):
        return self.name if self.input is None else f"{self.name}({self.input})"


INIT = OperationCall("init")


class Machine(Protocol):
    operations: frozenset

    def step(self, call: OperationCall) -> Any: ...


class UnknownOperation(ValueError):
    pass


class MachineTypeError(TypeError):
    """The two machines do not share a machine type."""


@dataclass
class Verdict:
    passed: bool
    step: int | None = None
    kind: str | None = None  # "output" | "glue" | "invariant"
    reason: str = ""
    outputs: list = field(default_factory=list)

    def __bool__(self):
        return self.passed

    def __str__(self):
        if self.passed:
            return "pass"
        return f"fail(step {self.step}, {self.kind}: {self.reason})"


def _normalize(machine: Machine, trace: Iterable[OperationCall]) -> list[OperationCall]:
    trace = list(trace)
    for call in trace:
        if call.name not in machine.operations:
            raise UnknownOperation(f"operation {call.name!r} not in {sorted(machine.operations)}")
    if not trace or trace[0].name != "init":
        trace.insert(0, INIT)
    return trace


def run_trace(machine: Machine, trace: Iterable[OperationCall]) -> list:
    """Apply ``trace`` to ``machine`` (prepending init if absent) and collect outputs."""
    return [machine.step(call) for call in _normalize(machine, trace)]


def check_lockstep(
    abstract: Machine,
    concrete: Machine,
    trace: Iterable[OperationCall],
    glue: Callable[[Machine, Machine], Any],
    observer: Callable[[int, OperationCall, Any, Any, Any], None] | None = None,
) -> Verdict:
    """Run both machines jointly and check outputs and the gluing predicate.

    Steps are numbered from 1, with ``init`` as step 1.  ``glue`` may return a
    plain bool or a report object whose truth value is the verdict; a falsy
    report's ``str`` becomes the failure reason and its optional ``kind``
    attribute the failure kind.
    """
    if frozenset(abstract.operations) != frozenset(concrete.operations):
        raise MachineTypeError(
            f"operation sets differ: {sorted(abstract.operations)} vs {sorted(concrete.operations)}"
        )
    calls = _normalize(abstract, trace)
    outputs = []
    for k, call in enumerate(calls, start=1):
        out_c = concrete.step(call)
        out_a = abstract.step(call)
        outputs.append(out_a)
        report = glue(abstract, concrete)
        if observer is not None:
            observer(k, call, out_a, out_c, report)
        if out_a != out_c:
            return Verdict(False, k, "output", f"{call}: concrete {out_c!r} vs abstract {out_a!r}", outputs)
        if not report:
            kind = getattr(report, "kind", "glue")
            return Verdict(False, k, kind, f"{call}: {report}", outputs)
    return Verdict(True, outputs=outputs)


# --- the set-machine example -----------------------------------------------


class SetMachine:
    """Concrete parametric set machine over universe 0..usize-1, storing x at S[T[x]]."""

    operations = frozenset({"init", "add", "elem"})

    def __init__(self, usize: int, t: Sequence[int]):
        if len(t) != usize or any(not 0 <= v < usize for v in t):
            raise ValueError("t must map 0..usize-1 into 0..usize-1")
        self.usize = usize
        self.t = list(t)
        self.s = [False] * usize

    def step(self, call):
        if call.name == "init":
            self.s = [False] * self.usize
            return "ok"
        x = call.input
        if not 0 <= x < self.usize:
            raise ValueError(f"{x} outside universe")
        if call.name == "add":
            self.s[self.t[x]] = True
            return "ok"
        return self.s[self.t[x]]

    def state(self):
        return tuple(self.s)


class AbstractSetMachine:
    operations = frozenset({"init", "add", "elem"})

    def __init__(self, usize: int):
        self.usize = usize
        self.s = [False] * usize

    def step(self, call):
        if call.name == "init":
            self.s = [False] * self.usize
            return "ok"
        if call.name == "add":
            self.s[call.input] = True
            return "ok"
        return self.s[call.input]

    def state(self):
        return tuple(self.s)


def set_glue(a: AbstractSetMachine, c: SetMachine) -> bool:
    return all(c.s[c.t[x]] == a.s[x] for x in range(a.usize))


@dataclass(frozen=True)
class SetMachineParams:
    usize: int
    t: tuple


def check_set_condition(params: SetMachineParams, abs_usize: int) -> bool:
    """Condition R for the set example: equal sizes and an injective T."""
    return params.usize == abs_usize and len(set(params.t)) == len(params.t) == params.usize
