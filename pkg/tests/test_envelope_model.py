import json
import random
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import has_cycle_kahn, random_descriptor
from swarmbus import envelope
from swarmbus.errors import SwarmError
from swarmbus.healthfuse.institutions import build_issue_ehic_descriptor
from swarmbus.model import (
    FieldSpec,
    Guard,
    HopRecord,
    PhaseSpec,
    Status,
    SwarmDescriptor,
    SwarmInstance,
    Transition,
    canonical_decode,
    canonical_encode,
    load_descriptor,
    validate_descriptor,
)

values = st.recursive(
    st.none() | st.booleans() | st.integers(min_value=-(2**70), max_value=2**70) | st.text(),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=6), inner, max_size=4),
    max_leaves=12,
)


@settings(max_examples=1000, deadline=None)
@given(values)
def test_envelope_round_trip(v):
    data = envelope.encode(v)
    assert envelope.decode(data) == v
    assert envelope.encode(envelope.decode(data)) == data


@settings(max_examples=300, deadline=None)
@given(st.dictionaries(st.text(max_size=5), st.integers(), min_size=2, max_size=5))
def test_key_order_and_whitespace_are_canonical(d):
    pretty = json.dumps(d, indent=1).encode()
    if pretty != envelope.encode(d):
        with pytest.raises(SwarmError) as e:
            envelope.decode(pretty)
        assert e.value.code == "ENCODING"


@pytest.mark.parametrize("raw", [b'{"a":1.5}', b'{"a":1,"a":1}', b'{"b":1,"a":2}', b"[1, 2]", b"NaN", b'"\xff"', b"01", b'{"a":1e3}'])
def test_non_canonical_rejected(raw):
    with pytest.raises(SwarmError) as e:
        envelope.decode(raw)
    assert e.value.code == "ENCODING"


def test_encode_rejects_floats_and_bytes():
    for bad in (1.0, b"x", {1: 2}, float("nan")):
        with pytest.raises(SwarmError):
            envelope.encode(bad)


def test_guard_compares_exact_types():
    g = Guard("f", True)
    assert g.holds({"f": True})
    assert not g.holds({"f": 1})
    assert not g.holds({})
    assert Guard("f", "x").holds({"f": "x"})


def test_first_matching_transition_wins():
    p = PhaseSpec("P", "r", transitions=(
        Transition(Guard("a", True), target="X"),
        Transition(Guard("b", True), target="Y"),
        Transition(None, target="Z"),
    ))
    assert p.next_step({"a": True, "b": True}).target == "X"
    assert p.next_step({"b": True}).target == "Y"
    assert p.next_step({}).target == "Z"


def test_descriptor_round_trip_random():
    rng = random.Random(11)
    for _ in range(300):
        d = random_descriptor(rng)
        data = canonical_encode(d)
        back = canonical_decode(data, SwarmDescriptor)
        assert back == d
        assert canonical_encode(back) == data


def test_shipped_choreography_file_matches_builder():
    path = Path(__file__).resolve().parents[1] / "choreographies" / "issue_ehic.swarm"
    assert load_descriptor(path) == build_issue_ehic_descriptor()


def _with(d, **kw):
    return replace(d, **kw)


def test_validation_reports_every_problem():
    d = build_issue_ehic_descriptor()
    phases = list(d.phases)
    phases[0] = _with(phases[0], transitions=(Transition(None, target="ghost"),))
    phases[1] = _with(phases[1], input_fields=frozenset({"nope"}))
    phases[2] = _with(phases[2], transitions=())
    errors = validate_descriptor(_with(d, phases=tuple(phases))).errors
    assert "unresolved transition: ghost" in errors
    assert "undeclared field: nope (phase employmentProof)" in errors
    assert "no transitions: incomeDeclaration" in errors


def test_canonical_encode_refuses_invalid_descriptor():
    d = build_issue_ehic_descriptor()
    bad = _with(d, entry_phase="missing")
    with pytest.raises(SwarmError) as e:
        canonical_encode(bad)
    assert e.value.code == "INVALID_DESCRIPTOR"


def test_cycle_detection_matches_kahn():
    rng = random.Random(3)
    for _ in range(500):
        n = rng.randint(1, 5)
        names = [f"P{i}" for i in range(n)]
        edges = {a: {b for b in names if rng.random() < 0.3} for a in names}
        phases = tuple(
            PhaseSpec(a, "r", transitions=tuple(Transition(Guard("f", True), target=b) for b in sorted(edges[a]))
                      + (Transition(None, outcome="DENIED"),))
            for a in names
        )
        d = SwarmDescriptor("g", 1, (FieldSpec("f", "identity"),), phases, "P0", frozenset())
        found = any(e.startswith("cycle:") for e in validate_descriptor(d).errors)
        assert found == has_cycle_kahn(edges)


def test_instance_envelope_round_trip():
    inst = SwarmInstance(
        instance_id="i1", descriptor=("issue_ehic", 1), current_phase=None,
        payload={"person_id": "p", "eligible": True}, subject_id="p", status=Status.ISSUED,
        hop_trail=(HopRecord("A", "verifyIdentity", 5, frozenset({"person_id"}), frozenset({"eligible"})),),
    )
    assert canonical_decode(canonical_encode(inst), SwarmInstance) == inst
