"""Static checks performed by the integration layer before a choreography runs.

Two questions are answered for every phase: does the adapter that will run it
hold the privileges for exactly the data it declares, and is every declared
input guaranteed to exist on every path that reaches the phase.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .errors import SwarmError
from .model import ActorClass, AdapterIdentity, SwarmDescriptor, validate_descriptor


class ViolationKind(str, Enum):
    NO_ADAPTER_FOR_ROLE = "NO_ADAPTER_FOR_ROLE"
    MISSING_RUN_GRANT = "MISSING_RUN_GRANT"
    CATEGORY_DENIED = "CATEGORY_DENIED"
    UNSOURCED_INPUT = "UNSOURCED_INPUT"
    HUMAN_IN_AUTOMATED_FLOW = "HUMAN_IN_AUTOMATED_FLOW"


_KIND_ORDER = {k: i for i, k in enumerate(ViolationKind)}


@dataclass(frozen=True)
class Violation:
    phase: str
    kind: ViolationKind
    detail: str

    def line(self) -> str:
        return f"{self.phase}\t{self.kind.value}\t{self.detail}"


@dataclass
class VerificationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def lines(self) -> list[str]:
        return [v.line() for v in self.violations]


@dataclass(frozen=True)
class AbstractFieldState:
    per_phase: dict[str, frozenset[str]]

    def __getitem__(self, phase: str) -> frozenset[str]:
        return self.per_phase[phase]


def reachable_phases(d: SwarmDescriptor) -> list[str]:
    """Phases reachable from the entry phase, in topological order."""
    seen: set[str] = set()
    order: list[str] = []

    def visit(n: str) -> None:
        seen.add(n)
        for m in d.successors(n):
            if m not in seen:
                visit(m)
        order.append(n)

    visit(d.entry_phase)
    order.reverse()
    return order


def _require_valid(d: SwarmDescriptor) -> None:
    result = validate_descriptor(d)
    if not result.ok:
        raise SwarmError("INVALID_DESCRIPTOR", "; ".join(result.errors))


def propagate_fields(d: SwarmDescriptor, launch_fields: Optional[Iterable[str]] = None) -> AbstractFieldState:
    """Must-availability of fields on entry to each phase.

    A field counts as available at a phase only if every path from the entry
    phase supplies it. Phases that no path reaches get the full declared field
    set (an empty intersection).
    """
    _require_valid(d)
    launch = frozenset(d.launch_fields if launch_fields is None else launch_fields)
    undeclared = launch - d.field_names
    if undeclared:
        raise SwarmError("UNDECLARED_LAUNCH_FIELD", ",".join(sorted(undeclared)))

    order = reachable_phases(d)
    live = set(order)
    preds: dict[str, list[str]] = {n: [] for n in order}
    for n in order:
        for m in d.successors(n):
            preds[m].append(n)

    avail: dict[str, frozenset[str]] = {}
    for n in order:
        if n == d.entry_phase:
            avail[n] = launch
            continue
        acc: Optional[frozenset[str]] = None
        for q in preds[n]:
            incoming = avail[q] | d.phase(q).output_fields
            acc = incoming if acc is None else acc & incoming
        avail[n] = acc if acc is not None else launch

    for p in d.phases:
        if p.name not in live:
            avail[p.name] = d.field_names
    return AbstractFieldState(avail)


def verify(
    d: SwarmDescriptor,
    adapters: Iterable[AdapterIdentity],
    launch_fields: Optional[Iterable[str]] = None,
) -> VerificationReport:
    """Check every phase of ``d`` against the registered ``adapters``.

    Violations are collected exhaustively and sorted by phase declaration
    order, then kind, then detail.
    """
    adapters = list(adapters)
    state = propagate_fields(d, launch_fields)
    found: set[Violation] = set()

    for p in d.phases:
        serving = [a for a in adapters if a.role == p.target_role]
        if not serving:
            found.add(Violation(p.name, ViolationKind.NO_ADAPTER_FOR_ROLE, p.target_role))
        for a in serving:
            if a.actor_class is ActorClass.HUMAN:
                found.add(Violation(p.name, ViolationKind.HUMAN_IN_AUTOMATED_FLOW, a.adapter_id))
            if not a.may_run(d.name, p.name):
                found.add(Violation(p.name, ViolationKind.MISSING_RUN_GRANT, a.adapter_id))
            denied = sorted(f for f in p.input_fields if d.category(f) not in a.readable_categories)
            if denied:
                detail = f"{a.adapter_id}: " + ",".join(f"{f}({d.category(f).value})" for f in denied)
                found.add(Violation(p.name, ViolationKind.CATEGORY_DENIED, detail))
        missing = sorted(p.input_fields - state[p.name])
        if missing:
            found.add(Violation(p.name, ViolationKind.UNSOURCED_INPUT, ",".join(missing)))

    phase_names = {p.name for p in d.phases}
    for a in adapters:
        if a.actor_class is not ActorClass.HUMAN:
            continue
        for desc, phase in a.run_grants:
            if desc == d.name and phase in phase_names:
                found.add(Violation(phase, ViolationKind.HUMAN_IN_AUTOMATED_FLOW, a.adapter_id))

    index = {p.name: i for i, p in enumerate(d.phases)}
    ordered = sorted(found, key=lambda v: (index[v.phase], _KIND_ORDER[v.kind], v.detail))
    return VerificationReport(ordered)


def adapter_may_serve(d: SwarmDescriptor, phase: str, a: AdapterIdentity) -> bool:
    """Runtime re-check of one (phase, adapter) pair, same rules as ``verify``."""
    p = d.phase(phase)
    return (
        a.role == p.target_role
        and a.actor_class is ActorClass.SOFTWARE
        and a.may_run(d.name, phase)
        and all(d.category(f) in a.readable_categories for f in p.input_fields)
    )
