"""Citizen-facing Healthfuse service: log in, request insurance, wait.

This is the object the HTTP layer and the demo scenarios drive. It owns no
personal data of its own beyond session bookkeeping; values live in the bus,
the record store, the support desk and the ledger.
"""

from __future__ import annotations

import secrets
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional

from .. import scram
from ..bus import Bus
from ..errors import SwarmError
from ..ledger import ErasureReport, ParticipantErasure, PrivacyLedger
from ..model import ActorClass, DataCategory, Status
from .institutions import (
    DESCRIPTOR_NAME,
    CitizenProfile,
    build_institutions,
    build_issue_ehic_descriptor,
    demo_identities,
)
from .records import RECORDS_PURPOSE, RecordStore
from .support import SUPPORT_PURPOSE, SupportDesk


@dataclass(frozen=True)
class InsuranceDecision:
    instance_id: str
    outcome: Status
    reason_phase: Optional[str] = None
    card_id: Optional[str] = None

    def to_envelope(self) -> dict:
        return {
            "instanceId": self.instance_id,
            "outcome": self.outcome.value,
            "reasonPhase": self.reason_phase,
            "cardId": self.card_id,
        }


def ehic_categories() -> frozenset[DataCategory]:
    return frozenset(f.category for f in build_issue_ehic_descriptor().fields)


class Healthfuse:
    def __init__(self, bus: Bus, profiles: Iterable[CitizenProfile], *, workers: int = 8):
        self.bus = bus
        self.ledger: PrivacyLedger = bus.ledger
        self.profiles = {p.person_id: p for p in profiles}
        self.records = RecordStore(self.ledger)
        self.support = SupportDesk(self.ledger, self._snapshot)
        self.credentials: dict[str, scram.ScramCredential] = {}
        self._sessions: dict[str, str] = {}
        self._attempts: dict[str, scram.HandshakeState] = {}
        self._requests: dict[str, Future] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="healthfuse")
        self.ledger.participants.append(self)

    @classmethod
    def in_process(
        cls,
        data_dir=None,
        profiles: Optional[Iterable[CitizenProfile]] = None,
        *,
        fsync: bool = False,
    ) -> "Healthfuse":
        """Ledger, bus and the five institutions in this process, wired over SCRAM channels."""
        from .institutions import demo_profiles

        profiles = list(profiles if profiles is not None else demo_profiles())
        ledger = PrivacyLedger(data_dir, fsync=fsync)
        descriptor = build_issue_ehic_descriptor()
        identities = demo_identities(descriptor)
        passwords = {ident.adapter_id: secrets.token_urlsafe(16) for ident in identities}
        creds = {aid: scram.new_credential(aid, pw) for aid, pw in passwords.items()}
        bus = Bus(ledger, credentials=creds)
        for inst in build_institutions(profiles, identities):
            bus.attach_local(inst, passwords[inst.identity.adapter_id])
        report = bus.register_descriptor(descriptor)
        if not report.ok:
            raise SwarmError("VERIFICATION_FAILED", "; ".join(report.lines()))
        return cls(bus, profiles)

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    # ---- accounts and sessions ------------------------------------------
    def add_account(self, username: str, password: str) -> None:
        self.credentials[username] = scram.new_credential(username, password)

    def add_staff(self, staff_id: str, password: str) -> None:
        self.support.register_staff(staff_id)
        self.add_account(staff_id, password)

    def session_begin(self, client_first: str) -> tuple[str, str]:
        result = scram.handshake_step(scram.server_start(self.credentials.get), client_first)
        if result.failed:
            raise SwarmError("UNAUTHENTICATED", result.error)
        attempt = secrets.token_urlsafe(12)
        with self._lock:
            self._attempts[attempt] = result.state
        return attempt, result.message

    def session_finish(self, attempt: str, client_final: str) -> tuple[str, str]:
        with self._lock:
            state = self._attempts.pop(attempt, None)
        if state is None:
            raise SwarmError("UNAUTHENTICATED", "unknown handshake attempt")
        result = scram.handshake_step(state, client_final)
        if not result.authenticated:
            raise SwarmError("UNAUTHENTICATED", result.error or "handshake failed")
        token = secrets.token_urlsafe(24)
        with self._lock:
            self._sessions[token] = result.state.username
        return result.message, token

    def login(self, username: str, password: str) -> str:
        """Both halves of the SCRAM exchange in-process; returns a session token."""
        client = scram.handshake_step(scram.client_start(username, password))
        attempt, server_first = self.session_begin(client.message)
        client = scram.handshake_step(client.state, server_first)
        if client.failed:
            raise SwarmError("UNAUTHENTICATED", client.error)
        server_final, token = self.session_finish(attempt, client.message)
        if not scram.handshake_step(client.state, server_final).authenticated:
            raise SwarmError("UNAUTHENTICATED", "server signature")
        return token

    def principal(self, token: str) -> str:
        with self._lock:
            who = self._sessions.get(token)
        if who is None:
            raise SwarmError("UNAUTHENTICATED", "no such session")
        return who

    # ---- consent --------------------------------------------------------
    def grant_consent(self, subject: str, purpose: str, categories: Iterable) -> str:
        return self.ledger.grant_consent(subject, purpose, categories)

    def revoke_consent(self, subject: str, token: str) -> None:
        if self.ledger.consents.record(token).subject_id != subject:
            raise SwarmError("NOT_OWNER", token)
        self.ledger.revoke_consent(token)

    # ---- insurance ------------------------------------------------------
    def request_insurance(self, subject: str, insurance_type: str, consent_token: str = "", *, wait: bool = True) -> str:
        profile = self.profiles.get(subject)
        if profile is None:
            raise SwarmError("UNKNOWN_PROFILE", subject)
        payload = {"person_id": subject, "insurance_type": insurance_type, "has_dividends": profile.has_dividends}
        iid = self.bus.launch(DESCRIPTOR_NAME, None, payload, subject, consent_token)
        if wait:
            self.bus.run_to_completion(iid)
        else:
            with self._lock:
                self._requests[iid] = self._pool.submit(self.bus.run_to_completion, iid)
        return iid

    def wait(self, instance_id: str, timeout: Optional[float] = None) -> None:
        with self._lock:
            fut = self._requests.get(instance_id)
        if fut is not None:
            fut.result(timeout)

    def decision(self, instance_id: str) -> Optional[InsuranceDecision]:
        inst = self.bus.instance(instance_id)
        if inst.status is Status.ISSUED:
            return InsuranceDecision(instance_id, Status.ISSUED, card_id=inst.payload.get("card_id"))
        if inst.status is Status.DENIED:
            trail = inst.hop_trail
            reason = trail[-2].phase if len(trail) >= 2 else trail[-1].phase
            return InsuranceDecision(instance_id, Status.DENIED, reason_phase=reason)
        return None

    def insurance_status(self, subject: str, instance_id: str) -> dict:
        inst = self.bus.instance(instance_id)
        if inst.subject_id != subject:
            raise SwarmError("NOT_OWNER", instance_id)
        doc = self.bus.status(instance_id).to_envelope()
        decision = self.decision(instance_id)
        doc["decision"] = decision.to_envelope() if decision else None
        return doc

    # ---- records --------------------------------------------------------
    def upload_record(self, subject: str, filename: str, content: bytes) -> str:
        return self.records.upload(subject, filename, content)

    def download_record(self, subject: str, record_id: str) -> bytes:
        return self.records.download(subject, record_id)

    def delete_record(self, subject: str, record_id: str) -> None:
        self.records.delete(subject, record_id)

    # ---- support --------------------------------------------------------
    def open_support_ticket(self, subject: str, description: str, consent_token: str) -> str:
        return self.support.open_ticket(subject, description, consent_token)

    def support_view(self, staff_id: str, ticket_id: str) -> dict:
        return self.support.view(staff_id, ticket_id)

    def _snapshot(self, subject: str, categories: frozenset) -> dict:
        data: dict = {}
        if DataCategory.DECISION in categories:
            data["insurance"] = [
                {"instanceId": i.instance_id, "status": i.status.value, "cardId": i.payload.get("card_id")}
                for i in self.bus.instances()
                if i.subject_id == subject
            ]
        if DataCategory.MEDICAL in categories:
            data["records"] = self.records.list_for(subject)
        return data

    # ---- GDPR -----------------------------------------------------------
    def access_log(self, subject: str):
        return self.ledger.who_accessed(subject)

    def human_actors(self, subject: str) -> set[str]:
        return {a.actor_id for a in self.ledger.who_accessed(subject) if a.actor_class is ActorClass.HUMAN}

    def erase(self, subject: str) -> ErasureReport:
        return self.ledger.erase_subject(subject)

    # erasure participant: only indexes and sessions live here
    def erase_subject(self, subject_id: str) -> ParticipantErasure:
        self.records.forget_subject(subject_id)
        self.support.forget_subject(subject_id)
        with self._lock:
            doomed = [t for t, who in self._sessions.items() if who == subject_id]
            for t in doomed:
                del self._sessions[t]
        return ParticipantErasure(per_store=[("sessions", len(doomed))])

    def residual_scan(self, subject_id: str) -> list[str]:
        with self._lock:
            live = sum(1 for who in self._sessions.values() if who == subject_id)
        return [f"sessions: {live}"] if live else []


__all__ = ["Healthfuse", "InsuranceDecision", "RECORDS_PURPOSE", "SUPPORT_PURPOSE", "ehic_categories"]
