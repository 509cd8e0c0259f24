"""The EHIC issuance choreography and the five mock institutions serving it.

The legacy flow has the citizen carry six documents between offices. Here
each check is a phase served by the institution that already holds the data,
and each institution sees only the fields its phase declares.
"""

from __future__ import annotations

import secrets
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Mapping

from ..adapter import Adapter, PhaseResult
from ..model import (
    ActorClass,
    AdapterIdentity,
    DataCategory as C,
    FieldSpec,
    Guard,
    Outcome,
    PhaseSpec,
    Sensitivity,
    SwarmDescriptor,
    Transition,
)

DESCRIPTOR_NAME = "issue_ehic"
LAUNCH_FIELDS = frozenset({"person_id", "insurance_type", "has_dividends"})

# (phase, role, legacy step it replaces)
PHASES = (
    ("verifyIdentity", "identity-registry", "bring the identity card and a copy of it"),
    ("employmentProof", "employment-registry", "supply an employment proof"),
    ("incomeDeclaration", "fiscal-agency", "provide an income declaration and its confirmation"),
    ("taxReceipt", "fiscal-agency", "show the receipt proving all taxes were paid"),
    ("dividendStatistics", "finance-ministry", "bring financial statistics from the Ministry of Finance"),
    ("issueDecision", "insurance-agency", "insurance agency validates the request"),
)
LEGACY_STEPS = tuple(step for _, _, step in PHASES)
# people who handled the paperwork in the legacy flow
LEGACY_HUMAN_HANDLERS = 5

ADAPTER_IDS = {
    "identity-registry": "IdentityRegistry",
    "employment-registry": "EmploymentRegistry",
    "fiscal-agency": "FiscalAgency",
    "finance-ministry": "FinanceMinistry",
    "insurance-agency": "InsuranceAgency",
}

READABLE = {
    "identity-registry": {C.IDENTITY},
    "employment-registry": {C.IDENTITY},
    "fiscal-agency": {C.IDENTITY, C.TAX},
    "finance-ministry": {C.IDENTITY, C.DIVIDEND},
    "insurance-agency": {C.IDENTITY, C.DECISION},
}


def _deny_or(next_phase: str) -> tuple[Transition, ...]:
    return (
        Transition(Guard("eligible", False), target="issueDecision"),
        Transition(None, target=next_phase),
    )


def build_issue_ehic_descriptor(version: int = 1) -> SwarmDescriptor:
    P, N = Sensitivity.PERSONAL, Sensitivity.NON_PERSONAL
    fields = (
        FieldSpec("person_id", C.IDENTITY, P),
        FieldSpec("insurance_type", C.DECISION, N),
        FieldSpec("has_dividends", C.DIVIDEND, P),
        FieldSpec("identity_card", C.IDENTITY, P),
        FieldSpec("employment_proof", C.EMPLOYMENT, P),
        FieldSpec("income_declaration", C.INCOME, P),
        FieldSpec("income_confirmation", C.TAX, P),
        FieldSpec("tax_receipt", C.TAX, P),
        FieldSpec("dividend_statistics", C.DIVIDEND, P),
        FieldSpec("eligible", C.DECISION, P),
        FieldSpec("decision", C.DECISION, P),
        FieldSpec("card_id", C.DECISION, P),
    )
    purposes = {name: step for name, _, step in PHASES}
    roles = {name: role for name, role, _ in PHASES}

    def phase(name, inputs, outputs, transitions):
        return PhaseSpec(name, roles[name], frozenset(inputs), frozenset(outputs), purposes[name], transitions)

    phases = (
        phase("verifyIdentity", {"person_id"}, {"identity_card", "eligible"}, _deny_or("employmentProof")),
        phase("employmentProof", {"person_id"}, {"employment_proof", "eligible"}, _deny_or("incomeDeclaration")),
        phase(
            "incomeDeclaration", {"person_id"},
            {"income_declaration", "income_confirmation", "eligible"}, _deny_or("taxReceipt"),
        ),
        phase(
            "taxReceipt", {"person_id", "income_confirmation"}, {"tax_receipt", "eligible"},
            (
                Transition(Guard("eligible", False), target="issueDecision"),
                Transition(Guard("has_dividends", True), target="dividendStatistics"),
                Transition(None, target="issueDecision"),
            ),
        ),
        phase(
            "dividendStatistics", {"person_id", "has_dividends"}, {"dividend_statistics", "eligible"},
            (Transition(None, target="issueDecision"),),
        ),
        phase(
            "issueDecision", {"person_id", "insurance_type", "eligible"}, {"decision", "card_id"},
            (
                Transition(Guard("decision", "ISSUED"), outcome=Outcome.ISSUED),
                Transition(None, outcome=Outcome.DENIED),
            ),
        ),
    )
    return SwarmDescriptor(DESCRIPTOR_NAME, version, fields, phases, "verifyIdentity", LAUNCH_FIELDS)


def demo_identities(descriptor: SwarmDescriptor = None) -> list[AdapterIdentity]:
    d = descriptor or build_issue_ehic_descriptor()
    out = []
    for role, aid in ADAPTER_IDS.items():
        grants = {(d.name, p.name) for p in d.phases if p.target_role == role}
        out.append(AdapterIdentity(aid, role, ActorClass.SOFTWARE, frozenset(READABLE[role]), frozenset(grants)))
    return out


@dataclass(frozen=True)
class CitizenProfile:
    person_id: str
    identity_valid: bool = True
    employed: bool = True
    income_declared: bool = True
    income_confirmed: bool = True
    taxes_paid: bool = True
    has_dividends: bool = False
    dividend_statistics_ok: bool = True

    def to_envelope(self) -> dict:
        return asdict(self)

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "CitizenProfile":
        return cls(**doc)


def demo_profiles() -> list[CitizenProfile]:
    return [
        CitizenProfile("citizen-ana", has_dividends=True),
        CitizenProfile("citizen-bogdan"),
        CitizenProfile("citizen-carmen", taxes_paid=False, has_dividends=True),
        CitizenProfile("citizen-dan", identity_valid=False),
        CitizenProfile("citizen-elena", has_dividends=True, dividend_statistics_ok=False),
    ]


class Institution(Adapter):
    """A mock registry that answers from a fixture table of profiles."""

    def __init__(self, identity: AdapterIdentity, profiles: Iterable[CitizenProfile], **kw):
        super().__init__(identity, **kw)
        self.profiles = {p.person_id: p for p in profiles}
        for name, role, _ in PHASES:
            if role == identity.role:
                self.handlers[name] = getattr(self, f"_{name}")

    def _profile(self, fields) -> CitizenProfile:
        return self.profiles.get(fields["person_id"]) or CitizenProfile(
            fields["person_id"], identity_valid=False, employed=False, income_declared=False,
            income_confirmed=False, taxes_paid=False, dividend_statistics_ok=False,
        )

    def _verifyIdentity(self, fields):
        p = self._profile(fields)
        if not p.identity_valid:
            return {"eligible": False}
        return {"identity_card": f"ID-{p.person_id}", "eligible": True}

    def _employmentProof(self, fields):
        p = self._profile(fields)
        out = {"eligible": p.employed}
        if p.employed:
            out["employment_proof"] = f"EMP-{p.person_id}"
        return out

    def _incomeDeclaration(self, fields):
        p = self._profile(fields)
        out = {"eligible": p.income_declared and p.income_confirmed}
        if p.income_declared:
            out["income_declaration"] = f"DECL-{p.person_id}"
        if p.income_confirmed:
            out["income_confirmation"] = f"ANAF-{p.person_id}"
        return out

    def _taxReceipt(self, fields):
        p = self._profile(fields)
        confirmed = fields.get("income_confirmation") == f"ANAF-{p.person_id}"
        out = {"eligible": p.taxes_paid and confirmed}
        if p.taxes_paid:
            out["tax_receipt"] = f"RCPT-{p.person_id}"
        return out

    def _dividendStatistics(self, fields):
        p = self._profile(fields)
        out = {"eligible": p.dividend_statistics_ok}
        if p.dividend_statistics_ok:
            out["dividend_statistics"] = f"DIV-{p.person_id}"
        return out

    def _issueDecision(self, fields):
        if fields.get("eligible") is True:
            return PhaseResult({"decision": "ISSUED", "card_id": "EHIC-" + secrets.token_hex(8)}, "ISSUED")
        return PhaseResult({"decision": "DENIED"}, "DENIED")


def build_institutions(profiles: Iterable[CitizenProfile], identities: Iterable[AdapterIdentity] = None) -> list[Institution]:
    profiles = list(profiles)
    return [Institution(ident, profiles) for ident in (identities or demo_identities())]
