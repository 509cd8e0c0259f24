"""Scripted end-to-end runs of the EHIC flow, used by the CLI and the tests.

A script is a list of (actor, operation, arguments, expected outcome) steps.
Operations are the citizen-facing service calls plus a few bus and audit
probes; each returns a short observed outcome that is compared verbatim with
the expectation. Human-actor counts are printed beside the legacy-process
baseline.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

from ..ledger import Action
from ..model import ActorClass
from .institutions import DESCRIPTOR_NAME, LEGACY_HUMAN_HANDLERS, demo_profiles
from .service import Healthfuse, ehic_categories

INSURANCE_TYPE = "ehic-standard"


@dataclass(frozen=True)
class ScenarioStep:
    actor: str
    operation: str
    arguments: Mapping[str, Any]
    expected: str


@dataclass(frozen=True)
class ScenarioScript:
    name: str
    subject: str
    steps: tuple[ScenarioStep, ...]


@dataclass
class StepOutcome:
    step: ScenarioStep
    observed: str

    @property
    def ok(self) -> bool:
        return self.observed == self.step.expected


@dataclass
class ScenarioRun:
    script: ScenarioScript
    service: Healthfuse
    facts: dict[str, Any] = field(default_factory=dict)
    outcomes: list[StepOutcome] = field(default_factory=list)
    lines: list[str] = field(default_factory=list)

    @property
    def subject(self) -> str:
        return self.script.subject

    @property
    def ok(self) -> bool:
        return len(self.outcomes) == len(self.script.steps) and all(o.ok for o in self.outcomes)

    def say(self, line: str) -> None:
        self.lines.append(line)


def independent_walk(data_dir: Path, service: Healthfuse, values: Iterable[str]) -> list[str]:
    """Look for ``values`` everywhere the demo could have put them.

    Reads raw bytes from disk and the in-memory state of bus and adapters
    directly, bypassing the ledger's own residual scan.
    """
    needles = [v.encode() for v in values if v]
    hits = []
    for root, _dirs, files in os.walk(data_dir):
        for name in files:
            path = Path(root) / name
            blob = path.read_bytes()
            hits += [f"{path}: {n.decode()}" for n in needles if n in blob]
    for inst in service.bus.instances():
        text = repr(inst.payload).encode()
        hits += [f"instance {inst.instance_id}: {n.decode()}" for n in needles if n in text]
    for aid, link in service.bus.live_links():
        adapter = getattr(getattr(link, "endpoint", None), "adapter", None)
        if adapter is None:
            continue
        text = repr(adapter.case_files).encode()
        hits += [f"adapter {aid}: {n.decode()}" for n in needles if n in text]
    return hits


# ---- operations -------------------------------------------------------------
# Each takes (run, actor, **arguments) and returns the observed outcome.

def _consent_grant(run: ScenarioRun, actor: str, purpose: str, categories) -> str:
    cats = ehic_categories() if categories == "all-declared" else categories
    run.facts[f"consent:{purpose}"] = run.service.grant_consent(run.subject, purpose, cats)
    run.say(f"{actor} grants consent for {purpose} over {len(cats)} categories")
    return "granted"


def _insurance_request(run: ScenarioRun, actor: str, insurance_type: str) -> str:
    svc = run.service
    iid = svc.request_insurance(run.subject, insurance_type, run.facts["consent:issue_ehic"])
    inst = svc.bus.instance(iid)
    decision = svc.decision(iid)
    run.facts.update(instance_id=iid, status=inst.status, hops=len(inst.hop_trail), decision=decision)
    d = svc.bus.descriptor(DESCRIPTOR_NAME)
    for n, hop in enumerate(inst.hop_trail, 1):
        read = ",".join(sorted(hop.fields_read))
        run.say(f"  hop {n}: {hop.phase:<19} {hop.adapter_id:<19} read {read:<36} [{d.phase(hop.phase).purpose}]")
    observed = f"{decision.outcome.value} hops={len(inst.hop_trail)}"
    if decision.reason_phase:
        observed += f" reasonPhase={decision.reason_phase}"
    run.say(f"{actor} receives {observed}" + (f" card {decision.card_id}" if decision.card_id else ""))
    return observed


def _human_actors(run: ScenarioRun, actor: str) -> str:
    humans = run.service.human_actors(run.subject)
    run.facts.setdefault("human_actors", []).append(len(humans))
    run.say(f"human actors who saw {run.subject}'s data: {len(humans)} (legacy process: {LEGACY_HUMAN_HANDLERS})")
    return str(len(humans))


def _swarm_launch(run: ScenarioRun, actor: str, steps: int) -> str:
    bus = run.service.bus
    profile = run.service.profiles[run.subject]
    payload = {"person_id": run.subject, "insurance_type": INSURANCE_TYPE, "has_dividends": profile.has_dividends}
    iid = bus.launch(DESCRIPTOR_NAME, None, payload, run.subject, run.facts["consent:issue_ehic"])
    for _ in range(steps):
        bus.step(iid)
    inst = bus.instance(iid)
    # person_id is the subject key itself and stays in the audit index
    values = [v for k, v in inst.payload.items() if k != "person_id" and isinstance(v, str)]
    run.facts.update(instance_id=iid, values=values)
    run.say(f"{actor} launches {iid[:8]}; paused at {inst.current_phase} after {len(inst.hop_trail)} hops")
    return inst.status.value


def _swarm_status(run: ScenarioRun, actor: str) -> str:
    status = run.service.bus.status(run.facts["instance_id"]).status
    run.facts["status"] = status
    run.say(f"{actor} sees instance {run.facts['instance_id'][:8]} as {status.value}")
    return status.value


def _gdpr_erase(run: ScenarioRun, actor: str) -> str:
    report = run.service.erase(run.subject)
    run.facts["erasure"] = report
    run.say(f"{actor} erases: {report.items_deleted} items deleted, {len(report.cancelled_instances)} cancelled, "
            f"{len(report.residual_findings)} residual findings")
    return "success" if report.success else "residue"


def _walk(run: ScenarioRun, actor: str) -> str:
    svc = run.service
    hits = independent_walk(svc.ledger.data_dir, svc, run.facts["values"])
    run.facts["walk_hits"] = hits
    run.say(f"{actor} walks disk and memory for {len(run.facts['values'])} values: {len(hits)} found")
    return f"found={len(hits)}"


def _audit_who(run: ScenarioRun, actor: str) -> str:
    rows = run.service.access_log(run.subject)
    run.facts["trail_rows"] = len(rows)
    # the ERASE row is written after redaction and records the erasure itself
    trail = [r for r in rows if r.action is not Action.ERASE]
    redacted = sum(r.redacted for r in trail)
    run.say(f"{actor} asks who accessed {run.subject}: {len(trail)} rows, {redacted} redacted, plus the erasure")
    return "redacted-trail" if trail and redacted == len(trail) else f"rows={len(trail)} redacted={redacted}"


def _support_open(run: ScenarioRun, actor: str, categories) -> str:
    svc = run.service
    token = svc.grant_consent(run.subject, "support", categories)
    run.facts["ticket"] = svc.open_support_ticket(run.subject, "my card has not arrived", token)
    run.say(f"{actor} opens ticket {run.facts['ticket'][:8]} with support consent over {','.join(categories)}")
    return "opened"


def _support_view(run: ScenarioRun, actor: str) -> str:
    svc = run.service
    svc.support.register_staff(actor)
    seen = svc.support_view(actor, run.facts["ticket"])
    run.say(f"{actor} views the ticket and sees: {', '.join(sorted(seen))}")
    return "viewed"


OPERATIONS: dict[str, Callable[..., str]] = {
    "consent.grant": _consent_grant,
    "insurance.request": _insurance_request,
    "audit.human_actors": _human_actors,
    "audit.who": _audit_who,
    "swarm.launch": _swarm_launch,
    "swarm.status": _swarm_status,
    "gdpr.erase": _gdpr_erase,
    "walk": _walk,
    "support.open": _support_open,
    "support.view": _support_view,
}


def _S(actor, operation, expected, **arguments) -> ScenarioStep:
    return ScenarioStep(actor, operation, arguments, expected)


def _automated(outcome: str) -> tuple[ScenarioStep, ...]:
    return (
        _S("citizen", "consent.grant", "granted", purpose="issue_ehic", categories="all-declared"),
        _S("citizen", "insurance.request", outcome, insurance_type=INSURANCE_TYPE),
        _S("auditor", "audit.human_actors", "0"),
    )


SCENARIOS: dict[str, ScenarioScript] = {
    s.name: s
    for s in (
        ScenarioScript("happy-path-with-dividends", "citizen-ana", _automated("ISSUED hops=6")),
        ScenarioScript("happy-path-no-dividends", "citizen-bogdan", _automated("ISSUED hops=5")),
        ScenarioScript("tax-denial", "citizen-carmen", _automated("DENIED hops=5 reasonPhase=taxReceipt")),
        ScenarioScript(
            "erasure-mid-run",
            "citizen-ana",
            (
                _S("citizen", "consent.grant", "granted", purpose="issue_ehic", categories="all-declared"),
                _S("operator", "swarm.launch", "RUNNING", steps=3),
                _S("citizen", "gdpr.erase", "success"),
                _S("auditor", "walk", "found=0"),
                _S("citizen", "audit.who", "redacted-trail"),
                _S("operator", "swarm.status", "CANCELLED"),
            ),
        ),
        ScenarioScript(
            "support-with-consent",
            "citizen-bogdan",
            _automated("ISSUED hops=5")
            + (
                _S("citizen", "support.open", "opened", categories=["contact", "decision"]),
                _S("support-agent-1", "support.view", "viewed"),
                _S("auditor", "audit.human_actors", "1"),
            ),
        ),
    )
}


def run_scenario(name: str, data_dir: Optional[os.PathLike] = None, echo: Optional[Callable[[str], None]] = None) -> ScenarioRun:
    """Run one script against a fresh in-process deployment.

    Stops at the first step whose observed outcome differs from the script.
    """
    script = SCENARIOS[name]
    with tempfile.TemporaryDirectory(prefix="healthfuse-") as tmp:
        service = Healthfuse.in_process(Path(data_dir) if data_dir else Path(tmp), demo_profiles())
        run = ScenarioRun(script, service)
        run.say(f"== {name} ({script.subject})")
        shown = 0
        try:
            for step in script.steps:
                observed = OPERATIONS[step.operation](run, step.actor, **step.arguments)
                outcome = StepOutcome(step, observed)
                run.outcomes.append(outcome)
                if not outcome.ok:
                    run.say(f"!! {step.operation}: expected {step.expected!r}, observed {observed!r}")
                if echo:
                    for line in run.lines[shown:]:
                        echo(line)
                    shown = len(run.lines)
                if not outcome.ok:
                    break
            run.facts["human_entries_outside_support"] = [
                e.seq for e in service.ledger.audit.entries()
                if e.actor_class is ActorClass.HUMAN and e.action is not Action.SUPPORT_ACCESS
            ]
        finally:
            service.close()
    return run
