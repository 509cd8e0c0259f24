"""Independent reference implementations used as test oracles.

Each one answers the same question as library code by a different, dumber
method: explicit path enumeration instead of dataflow, Kahn peeling instead
of DFS colouring, a hand-written PBKDF2 loop instead of hashlib's.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import replace
from itertools import chain

from swarmbus.model import (
    ActorClass,
    AdapterIdentity,
    DataCategory,
    FieldSpec,
    Guard,
    Outcome,
    PhaseSpec,
    Sensitivity,
    SwarmDescriptor,
    Transition,
)

CATEGORIES = list(DataCategory)
GUARD_VALUES = [True, False, "a", "b"]


def _subset(rng: random.Random, items) -> frozenset:
    return frozenset(x for x in items if rng.random() < 0.5)


def random_descriptor(rng: random.Random, max_phases: int = 4, max_fields: int = 4, max_roles: int = 3) -> SwarmDescriptor:
    """A valid random DAG descriptor. Declaration order is shuffled and the
    entry phase is not always the root, so some phases can be unreachable."""
    fields = [FieldSpec(f"f{i}", rng.choice(CATEGORIES), rng.choice(list(Sensitivity))) for i in range(rng.randint(1, max_fields))]
    fnames = [f.name for f in fields]
    names = [f"P{i}" for i in range(rng.randint(1, max_phases))]
    roles = [f"r{i}" for i in range(rng.randint(1, max_roles))]
    phases = []
    for i, name in enumerate(names):
        later = names[i + 1:]
        trs = []
        for _ in range(rng.randint(0, 2)):
            guard = Guard(rng.choice(fnames), rng.choice(GUARD_VALUES))
            if later and rng.random() < 0.7:
                trs.append(Transition(guard, target=rng.choice(later)))
            else:
                trs.append(Transition(guard, outcome=rng.choice(list(Outcome))))
        if later and rng.random() < 0.7:
            trs.append(Transition(None, target=rng.choice(later)))
        elif rng.random() < 0.9 or not trs:
            trs.append(Transition(None, outcome=rng.choice(list(Outcome))))
        phases.append(PhaseSpec(name, rng.choice(roles), _subset(rng, fnames), _subset(rng, fnames), f"purpose {name}", tuple(trs)))
    rng.shuffle(phases)
    entry = rng.choice(names[:2])
    return SwarmDescriptor("rand", 1, tuple(fields), tuple(phases), entry, _subset(rng, fnames))


def random_adapters(rng: random.Random, d: SwarmDescriptor, max_adapters: int = 3) -> list[AdapterIdentity]:
    roles = sorted({p.target_role for p in d.phases} | {"r-other"})
    out = []
    for i in range(rng.randint(0, max_adapters)):
        grants = {(d.name, p.name) for p in d.phases if rng.random() < 0.7}
        if rng.random() < 0.1:
            grants.add(("other", "X"))
        out.append(AdapterIdentity(
            f"A{i}", rng.choice(roles),
            ActorClass.HUMAN if rng.random() < 0.15 else ActorClass.SOFTWARE,
            frozenset(c for c in CATEGORIES if rng.random() < 0.6),
            frozenset(grants),
        ))
    return out


def compatible_adapters(d: SwarmDescriptor, per_role: int = 1) -> list[AdapterIdentity]:
    """Software adapters holding exactly what each role's phases need."""
    out = []
    for role in sorted({p.target_role for p in d.phases}):
        mine = [p for p in d.phases if p.target_role == role]
        cats = frozenset(d.category(f) for p in mine for f in p.input_fields)
        grants = frozenset((d.name, p.name) for p in mine)
        out += [AdapterIdentity(f"{role}-{k}", role, ActorClass.SOFTWARE, cats, grants) for k in range(per_role)]
    return out


def sourced(d: SwarmDescriptor) -> SwarmDescriptor:
    """Drop every input that some path does not supply, so UNSOURCED_INPUT cannot fire."""
    avail = availability_by_paths(d)
    phases = tuple(replace(p, input_fields=p.input_fields & avail[p.name]) for p in d.phases)
    return replace(d, phases=phases)


# ---- verifier oracle ----------------------------------------------------------

def all_paths(d: SwarmDescriptor) -> list[list[str]]:
    """Every path that starts at the entry phase (each prefix counted)."""
    succ = {p.name: {t.target for t in p.transitions if t.target} for p in d.phases}
    out: list[list[str]] = []

    def go(path):
        out.append(path)
        for m in sorted(succ[path[-1]]):
            go(path + [m])

    go([d.entry_phase])
    return out


def availability_by_paths(d: SwarmDescriptor) -> dict[str, frozenset]:
    outputs = {p.name: p.output_fields for p in d.phases}
    avail: dict[str, frozenset] = {}
    for path in all_paths(d):
        have = frozenset(d.launch_fields).union(*(outputs[q] for q in path[:-1]))
        end = path[-1]
        avail[end] = have if end not in avail else avail[end] & have
    for p in d.phases:
        avail.setdefault(p.name, frozenset(f.name for f in d.fields))
    return avail


def oracle_violations(d: SwarmDescriptor, adapters: list[AdapterIdentity]) -> set[str]:
    cat = {f.name: f.category for f in d.fields}
    avail = availability_by_paths(d)
    lines = set()
    for p in d.phases:
        serving = [a for a in adapters if a.role == p.target_role]
        if not serving:
            lines.add(f"{p.name}\tNO_ADAPTER_FOR_ROLE\t{p.target_role}")
        for a in serving:
            if a.actor_class is ActorClass.HUMAN:
                lines.add(f"{p.name}\tHUMAN_IN_AUTOMATED_FLOW\t{a.adapter_id}")
            if (d.name, p.name) not in a.run_grants:
                lines.add(f"{p.name}\tMISSING_RUN_GRANT\t{a.adapter_id}")
            bad = [f for f in sorted(p.input_fields) if cat[f] not in a.readable_categories]
            if bad:
                lines.add(f"{p.name}\tCATEGORY_DENIED\t{a.adapter_id}: " + ",".join(f"{f}({cat[f].value})" for f in bad))
        gap = sorted(p.input_fields - avail[p.name])
        if gap:
            lines.add(f"{p.name}\tUNSOURCED_INPUT\t{','.join(gap)}")
    for a in adapters:
        if a.actor_class is ActorClass.HUMAN:
            for desc, ph in a.run_grants:
                if desc == d.name and any(p.name == ph for p in d.phases):
                    lines.add(f"{ph}\tHUMAN_IN_AUTOMATED_FLOW\t{a.adapter_id}")
    return lines


# ---- structural oracles -------------------------------------------------------

def has_cycle_kahn(edges: dict[str, set[str]]) -> bool:
    nodes = set(edges) | set(chain.from_iterable(edges.values()))
    indeg = {n: 0 for n in nodes}
    for n in edges:
        for m in edges[n]:
            indeg[m] += 1
    ready = [n for n in nodes if indeg[n] == 0]
    removed = 0
    while ready:
        n = ready.pop()
        removed += 1
        for m in edges.get(n, ()):
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    return removed != len(nodes)


# ---- SCRAM oracle -------------------------------------------------------------

def pbkdf2_sha1_manual(password: bytes, salt: bytes, iterations: int) -> bytes:
    """Hi() for a single 20-byte block, written out as the iterated HMAC."""
    u = hmac.new(password, salt + b"\x00\x00\x00\x01", hashlib.sha1).digest()
    out = bytearray(u)
    for _ in range(iterations - 1):
        u = hmac.new(password, u, hashlib.sha1).digest()
        out = bytearray(a ^ b for a, b in zip(out, u))
    return bytes(out)
