from dataclasses import replace

import pytest

from swarmbus.errors import SwarmError
from swarmbus.healthfuse.institutions import build_issue_ehic_descriptor, demo_identities
from swarmbus.model import ActorClass, AdapterIdentity, DataCategory
from swarmbus.verifier import adapter_may_serve, propagate_fields, reachable_phases, verify


@pytest.fixture
def ehic():
    return build_issue_ehic_descriptor()


def test_shipped_descriptor_verifies(ehic):
    assert verify(ehic, demo_identities(ehic)).ok


def test_must_availability_on_join(ehic):
    state = propagate_fields(ehic)
    # issueDecision is reached directly from several checks: only launch fields and eligible survive
    assert {"person_id", "insurance_type", "eligible"} <= state["issueDecision"]
    assert "employment_proof" not in state["issueDecision"]
    assert "income_confirmation" in state["taxReceipt"]
    assert "tax_receipt" in state["dividendStatistics"]


def test_unsourced_input_is_reported(ehic):
    phases = tuple(replace(p, input_fields=p.input_fields | {"tax_receipt"}) if p.name == "issueDecision" else p
                   for p in ehic.phases)
    report = verify(replace(ehic, phases=phases), demo_identities(ehic))
    assert "issueDecision\tUNSOURCED_INPUT\ttax_receipt" in report.lines()


def test_category_denied_names_adapter_and_fields(ehic):
    idents = [replace(i, readable_categories=frozenset({DataCategory.IDENTITY})) if i.role == "fiscal-agency" else i
              for i in demo_identities(ehic)]
    assert verify(ehic, idents).lines() == ["taxReceipt\tCATEGORY_DENIED\tFiscalAgency: income_confirmation(tax)"]


def test_missing_role_and_grant(ehic):
    idents = [i for i in demo_identities(ehic) if i.role != "finance-ministry"]
    idents = [replace(i, run_grants=frozenset()) if i.role == "insurance-agency" else i for i in idents]
    assert verify(ehic, idents).lines() == [
        "dividendStatistics\tNO_ADAPTER_FOR_ROLE\tfinance-ministry",
        "issueDecision\tMISSING_RUN_GRANT\tInsuranceAgency",
    ]


def test_human_adapter_flagged_even_off_role(ehic):
    clerk = AdapterIdentity("Clerk", "front-desk", ActorClass.HUMAN, frozenset(DataCategory),
                            frozenset({("issue_ehic", "verifyIdentity")}))
    assert verify(ehic, demo_identities(ehic) + [clerk]).lines() == ["verifyIdentity\tHUMAN_IN_AUTOMATED_FLOW\tClerk"]


def test_report_is_ordered_by_declaration_then_kind(ehic):
    report = verify(ehic, [])
    assert [v.phase for v in report.violations] == [p.name for p in ehic.phases]


def test_unreachable_phase_counts_as_fully_supplied(ehic):
    d = replace(ehic, entry_phase="taxReceipt", launch_fields=frozenset({"person_id", "income_confirmation", "has_dividends", "insurance_type"}))
    assert "verifyIdentity" not in reachable_phases(d)
    assert propagate_fields(d)["verifyIdentity"] == d.field_names


def test_undeclared_launch_field(ehic):
    with pytest.raises(SwarmError) as e:
        propagate_fields(ehic, ["ghost"])
    assert e.value.code == "UNDECLARED_LAUNCH_FIELD"


def test_runtime_check_agrees_with_verify(ehic):
    for ident in demo_identities(ehic):
        for p in ehic.phases:
            assert adapter_may_serve(ehic, p.name, ident) == (p.target_role == ident.role)
    human = replace(demo_identities(ehic)[0], actor_class=ActorClass.HUMAN)
    assert not any(adapter_may_serve(ehic, p.name, human) for p in ehic.phases)
