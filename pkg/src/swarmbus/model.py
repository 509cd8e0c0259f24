"""Value types shared across the bus: descriptors, instances, identities.

Everything here is an immutable value object. "Changing" an instance means
building a new one with :func:`dataclasses.replace`.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Union

from . import envelope
from .errors import SwarmError

IDENT = re.compile(r"[a-z][a-z0-9_]*")
# phase, role and descriptor names are looser than field names
NAME = re.compile(r"[A-Za-z][A-Za-z0-9_.-]*")


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class DataCategory(str, Enum):
    IDENTITY = "identity"
    EMPLOYMENT = "employment"
    INCOME = "income"
    TAX = "tax"
    DIVIDEND = "dividend"
    MEDICAL = "medical"
    CONTACT = "contact"
    DECISION = "decision"


class Sensitivity(str, Enum):
    PERSONAL = "personal"
    NON_PERSONAL = "non-personal"


class ActorClass(str, Enum):
    SOFTWARE = "software"
    HUMAN = "human"


class Outcome(str, Enum):
    ISSUED = "ISSUED"
    DENIED = "DENIED"
    FAILED = "FAILED"


class Status(str, Enum):
    RUNNING = "RUNNING"
    ISSUED = "ISSUED"
    DENIED = "DENIED"
    FAILED = "FAILED"
    CANCELLED = "CANCELLED"

    @property
    def terminal(self) -> bool:
        return self is not Status.RUNNING


@dataclass(frozen=True)
class FieldSpec:
    name: str
    category: DataCategory
    sensitivity: Sensitivity = Sensitivity.PERSONAL

    def __post_init__(self):
        object.__setattr__(self, "category", DataCategory(self.category))
        object.__setattr__(self, "sensitivity", Sensitivity(self.sensitivity))


GuardValue = Union[bool, str]


@dataclass(frozen=True)
class Guard:
    """``field == value`` evaluated by the bus on the merged payload."""

    field: str
    value: GuardValue

    def holds(self, payload: Mapping[str, Any]) -> bool:
        if self.field not in payload:
            return False
        current = payload[self.field]
        # True == 1 in Python; guards compare exact types
        return type(current) is type(self.value) and current == self.value


@dataclass(frozen=True)
class Transition:
    """A guarded edge. ``guard=None`` means ALWAYS.

    Exactly one of ``target`` (next phase) and ``outcome`` (terminal) is set.
    """

    guard: Optional[Guard]
    target: Optional[str] = None
    outcome: Optional[Outcome] = None

    def __post_init__(self):
        if self.outcome is not None:
            object.__setattr__(self, "outcome", Outcome(self.outcome))


@dataclass(frozen=True)
class PhaseSpec:
    name: str
    target_role: str
    input_fields: frozenset[str] = frozenset()
    output_fields: frozenset[str] = frozenset()
    purpose: str = ""
    transitions: tuple[Transition, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "input_fields", frozenset(self.input_fields))
        object.__setattr__(self, "output_fields", frozenset(self.output_fields))
        object.__setattr__(self, "transitions", tuple(self.transitions))

    def next_step(self, payload: Mapping[str, Any]) -> Optional[Transition]:
        """First transition whose guard holds, in declaration order."""
        for tr in self.transitions:
            if tr.guard is None or tr.guard.holds(payload):
                return tr
        return None


@dataclass(frozen=True)
class SwarmDescriptor:
    name: str
    version: int
    fields: tuple[FieldSpec, ...]
    phases: tuple[PhaseSpec, ...]
    entry_phase: str
    launch_fields: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        object.__setattr__(self, "phases", tuple(self.phases))
        object.__setattr__(self, "launch_fields", frozenset(self.launch_fields))

    @property
    def key(self) -> tuple[str, int]:
        return (self.name, self.version)

    @property
    def field_names(self) -> frozenset[str]:
        return frozenset(f.name for f in self.fields)

    def phase(self, name: str) -> PhaseSpec:
        for p in self.phases:
            if p.name == name:
                return p
        raise SwarmError("UNKNOWN_PHASE", name)

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise SwarmError("UNKNOWN_FIELD", name)

    def category(self, field_name: str) -> DataCategory:
        return self.field(field_name).category

    def successors(self, phase_name: str) -> list[str]:
        out: list[str] = []
        for tr in self.phase(phase_name).transitions:
            if tr.target is not None and tr.target not in out:
                out.append(tr.target)
        return out

    def to_envelope(self) -> dict:
        return {
            "name": self.name,
            "version": self.version,
            "fields": [
                {"name": f.name, "category": f.category.value, "sensitivity": f.sensitivity.value}
                for f in self.fields
            ],
            "phases": [_phase_to_envelope(p) for p in self.phases],
            "entryPhase": self.entry_phase,
            "launchFields": sorted(self.launch_fields),
        }

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "SwarmDescriptor":
        try:
            return cls(
                name=doc["name"],
                version=doc["version"],
                fields=tuple(
                    FieldSpec(f["name"], f["category"], f.get("sensitivity", "personal"))
                    for f in doc["fields"]
                ),
                phases=tuple(_phase_from_envelope(p) for p in doc["phases"]),
                entry_phase=doc["entryPhase"],
                launch_fields=frozenset(doc.get("launchFields", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SwarmError("MALFORMED_DESCRIPTOR", str(exc)) from exc


def _phase_to_envelope(p: PhaseSpec) -> dict:
    transitions = []
    for tr in p.transitions:
        item: dict[str, Any] = {
            "guard": None if tr.guard is None else {"field": tr.guard.field, "equals": tr.guard.value}
        }
        if tr.target is not None:
            item["next"] = tr.target
        if tr.outcome is not None:
            item["terminal"] = tr.outcome.value
        transitions.append(item)
    return {
        "name": p.name,
        "targetRole": p.target_role,
        "inputFields": sorted(p.input_fields),
        "outputFields": sorted(p.output_fields),
        "purpose": p.purpose,
        "transitions": transitions,
    }


def _phase_from_envelope(doc: Mapping[str, Any]) -> PhaseSpec:
    transitions = []
    for item in doc.get("transitions", ()):
        g = item.get("guard")
        transitions.append(
            Transition(
                guard=None if g is None else Guard(g["field"], g["equals"]),
                target=item.get("next"),
                outcome=item.get("terminal"),
            )
        )
    return PhaseSpec(
        name=doc["name"],
        target_role=doc["targetRole"],
        input_fields=frozenset(doc.get("inputFields", ())),
        output_fields=frozenset(doc.get("outputFields", ())),
        purpose=doc.get("purpose", ""),
        transitions=tuple(transitions),
    )


@dataclass(frozen=True)
class HopRecord:
    adapter_id: str
    phase: str
    timestamp_utc: int
    fields_read: frozenset[str] = frozenset()
    fields_written: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "fields_read", frozenset(self.fields_read))
        object.__setattr__(self, "fields_written", frozenset(self.fields_written))

    def to_envelope(self) -> dict:
        return {
            "adapterId": self.adapter_id,
            "phase": self.phase,
            "timestampUtc": self.timestamp_utc,
            "fieldsRead": sorted(self.fields_read),
            "fieldsWritten": sorted(self.fields_written),
        }

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "HopRecord":
        return cls(
            doc["adapterId"], doc["phase"], doc["timestampUtc"],
            frozenset(doc["fieldsRead"]), frozenset(doc["fieldsWritten"]),
        )


@dataclass(frozen=True)
class SwarmInstance:
    """The "smart message": payload, phase pointer and provenance.

    ``current_phase`` is ``None`` once the instance is terminal. ``payload``
    is never mutated in place.
    """

    instance_id: str
    descriptor: tuple[str, int]
    current_phase: Optional[str]
    payload: Mapping[str, Any]
    subject_id: str
    hop_trail: tuple[HopRecord, ...] = ()
    status: Status = Status.RUNNING
    consent_token: str = ""
    detail: str = ""

    def __post_init__(self):
        object.__setattr__(self, "descriptor", (self.descriptor[0], self.descriptor[1]))
        object.__setattr__(self, "payload", dict(self.payload))
        object.__setattr__(self, "hop_trail", tuple(self.hop_trail))
        object.__setattr__(self, "status", Status(self.status))

    def to_envelope(self) -> dict:
        return {
            "instanceId": self.instance_id,
            "descriptor": {"name": self.descriptor[0], "version": self.descriptor[1]},
            "currentPhase": self.current_phase,
            "payload": dict(self.payload),
            "subjectId": self.subject_id,
            "hopTrail": [h.to_envelope() for h in self.hop_trail],
            "status": self.status.value,
            "consentToken": self.consent_token,
            "detail": self.detail,
        }

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "SwarmInstance":
        try:
            return cls(
                instance_id=doc["instanceId"],
                descriptor=(doc["descriptor"]["name"], doc["descriptor"]["version"]),
                current_phase=doc["currentPhase"],
                payload=doc["payload"],
                subject_id=doc["subjectId"],
                hop_trail=tuple(HopRecord.from_envelope(h) for h in doc["hopTrail"]),
                status=doc["status"],
                consent_token=doc["consentToken"],
                detail=doc.get("detail", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SwarmError("MALFORMED_INSTANCE", str(exc)) from exc


@dataclass(frozen=True)
class AdapterIdentity:
    adapter_id: str
    role: str
    actor_class: ActorClass = ActorClass.SOFTWARE
    readable_categories: frozenset[DataCategory] = frozenset()
    run_grants: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "actor_class", ActorClass(self.actor_class))
        object.__setattr__(
            self, "readable_categories", frozenset(DataCategory(c) for c in self.readable_categories)
        )
        object.__setattr__(self, "run_grants", frozenset((d, p) for d, p in self.run_grants))

    def may_run(self, descriptor: str, phase: str) -> bool:
        return (descriptor, phase) in self.run_grants

    def to_envelope(self) -> dict:
        return {
            "adapterId": self.adapter_id,
            "role": self.role,
            "actorClass": self.actor_class.value,
            "readableCategories": sorted(c.value for c in self.readable_categories),
            "runGrants": [{"descriptor": d, "phase": p} for d, p in sorted(self.run_grants)],
        }

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "AdapterIdentity":
        return cls(
            adapter_id=doc["adapterId"],
            role=doc["role"],
            actor_class=doc.get("actorClass", "software"),
            readable_categories=frozenset(doc.get("readableCategories", ())),
            run_grants=frozenset((g["descriptor"], g["phase"]) for g in doc.get("runGrants", ())),
        )


@dataclass
class ValidationResult:
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def validate_descriptor(d: SwarmDescriptor) -> ValidationResult:
    """Collect every structural violation of ``d``; never raises."""
    errors: list[str] = []

    if not NAME.fullmatch(d.name or ""):
        errors.append(f"invalid descriptor name: {d.name}")
    if not isinstance(d.version, int) or isinstance(d.version, bool) or d.version < 1:
        errors.append(f"version must be a positive integer: {d.version}")

    declared: set[str] = set()
    for f in d.fields:
        if not IDENT.fullmatch(f.name or ""):
            errors.append(f"invalid field name: {f.name}")
        if f.name in declared:
            errors.append(f"duplicate field: {f.name}")
        declared.add(f.name)

    names: set[str] = set()
    for p in d.phases:
        if not NAME.fullmatch(p.name or ""):
            errors.append(f"invalid phase name: {p.name}")
        if p.name in names:
            errors.append(f"duplicate phase: {p.name}")
        names.add(p.name)

    if d.entry_phase not in names:
        errors.append(f"unknown entry phase: {d.entry_phase}")

    for f in sorted(d.launch_fields - declared):
        errors.append(f"undeclared field: {f} (launch)")

    for p in d.phases:
        for f in sorted((p.input_fields | p.output_fields) - declared):
            errors.append(f"undeclared field: {f} (phase {p.name})")
        if not p.transitions:
            errors.append(f"no transitions: {p.name}")
        if sum(1 for tr in p.transitions if tr.guard is None) > 1:
            errors.append(f"multiple ALWAYS transitions: {p.name}")
        for tr in p.transitions:
            if (tr.target is None) == (tr.outcome is None):
                errors.append(f"transition needs exactly one of next/terminal: {p.name}")
            if tr.target is not None and tr.target not in names:
                errors.append(f"unresolved transition: {tr.target}")
            if tr.guard is not None:
                if tr.guard.field not in declared:
                    errors.append(f"undeclared field: {tr.guard.field} (guard in {p.name})")
                if not isinstance(tr.guard.value, (bool, str)):
                    errors.append(f"guard literal must be boolean or text: {p.name}")

    errors.extend(f"cycle: {','.join(c)}" for c in _cycles(d, names))
    return ValidationResult(errors)


def _cycles(d: SwarmDescriptor, names: set[str]) -> list[list[str]]:
    edges: dict[str, list[str]] = {}
    for p in d.phases:
        edges.setdefault(p.name, [])
        for tr in p.transitions:
            if tr.target in names and tr.target not in edges[p.name]:
                edges[p.name].append(tr.target)

    WHITE, GREY, BLACK = 0, 1, 2
    color = {n: WHITE for n in edges}
    stack: list[str] = []
    found: list[list[str]] = []

    def visit(n: str) -> None:
        color[n] = GREY
        stack.append(n)
        for m in edges[n]:
            if color[m] == GREY:
                found.append(stack[stack.index(m):])
            elif color[m] == WHITE:
                visit(m)
        stack.pop()
        color[n] = BLACK

    for n in edges:
        if color[n] == WHITE:
            visit(n)
    return found


Encodable = Union[SwarmDescriptor, SwarmInstance, Any]


def canonical_encode(x: Encodable) -> bytes:
    """Deterministic bytes for a descriptor, instance or audit entry."""
    if isinstance(x, SwarmDescriptor):
        result = validate_descriptor(x)
        if not result.ok:
            raise SwarmError("INVALID_DESCRIPTOR", "; ".join(result.errors))
    if not hasattr(x, "to_envelope"):
        raise SwarmError("ENCODING", f"cannot encode {type(x).__name__}")
    return envelope.encode(x.to_envelope())


def canonical_decode(data: bytes, cls: type) -> Any:
    return cls.from_envelope(envelope.decode(data))


def load_descriptor(path) -> SwarmDescriptor:
    with open(path, "rb") as fh:
        return canonical_decode(fh.read().rstrip(b"\n"), SwarmDescriptor)


def load_identities(items: Iterable[Mapping[str, Any]]) -> list[AdapterIdentity]:
    return [AdapterIdentity.from_envelope(doc) for doc in items]
