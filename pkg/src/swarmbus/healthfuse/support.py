"""Support desk: the one place a human may see a subject's data.

Access requires an active ``support`` consent naming the categories shown,
checked again at the moment a staff member opens the ticket.
"""

from __future__ import annotations

import threading
import uuid
from typing import Callable

from .. import envelope
from ..errors import SwarmError
from ..ledger import Action, PrivacyLedger
from ..model import ActorClass, AdapterIdentity, DataCategory, now_ms

SUPPORT_PURPOSE = "support"
DESK_ACTOR = "support-desk"


class SupportDesk:
    def __init__(self, ledger: PrivacyLedger, snapshot: Callable[[str, frozenset], dict]):
        """``snapshot(subject, categories)`` returns the data staff may see."""
        self.ledger = ledger
        self.store = ledger.store("tickets")
        self.snapshot = snapshot
        self.staff: dict[str, AdapterIdentity] = {}
        self._tickets: dict[str, str] = {}
        self._lock = threading.Lock()
        for subject in self.store.subjects():
            for key in self.store.keys(subject):
                self._tickets[key] = subject

    def register_staff(self, staff_id: str) -> AdapterIdentity:
        ident = AdapterIdentity(staff_id, "support-desk", ActorClass.HUMAN, frozenset(DataCategory), frozenset())
        self.staff[staff_id] = ident
        return ident

    def open_ticket(self, subject: str, description: str, consent_token: str) -> str:
        consents = self.ledger.consents
        try:
            rec = consents.record(consent_token)
        except SwarmError:
            raise SwarmError("NO_CONSENT", "unknown consent token") from None
        if not (rec.active and rec.subject_id == subject and rec.purpose == SUPPORT_PURPOSE):
            raise SwarmError("NO_CONSENT", f"token does not grant {SUPPORT_PURPOSE} for {subject}")
        ticket_id = uuid.uuid4().hex
        with self.ledger.write_lock:
            self.ledger.audit.append(
                actor_id=DESK_ACTOR,
                actor_class=ActorClass.SOFTWARE,
                action=Action.WRITE,
                subject_id=subject,
                instance_id=ticket_id,
                field_names=("description",),
                categories=[DataCategory.CONTACT.value],
                detail="ticket opened",
            )
            doc = {"ticketId": ticket_id, "subjectId": subject, "description": description,
                   "consentToken": consent_token, "openedAtUtc": now_ms()}
            self.store.put(subject, ticket_id, envelope.encode(doc))
            with self._lock:
                self._tickets[ticket_id] = subject
        return ticket_id

    def ticket(self, ticket_id: str) -> dict:
        with self._lock:
            subject = self._tickets.get(ticket_id)
        if subject is None:
            raise SwarmError("UNKNOWN_TICKET", ticket_id)
        try:
            return envelope.decode(self.store.get(subject, ticket_id))
        except SwarmError as exc:
            if exc.code == "UNKNOWN_ITEM":
                raise SwarmError("UNKNOWN_TICKET", ticket_id) from None
            raise

    def view(self, staff_id: str, ticket_id: str) -> dict:
        staff = self.staff.get(staff_id)
        if staff is None or staff.actor_class is not ActorClass.HUMAN:
            raise SwarmError("UNKNOWN_STAFF", staff_id)
        ticket = self.ticket(ticket_id)
        subject = ticket["subjectId"]
        try:
            rec = self.ledger.consents.record(ticket["consentToken"])
        except SwarmError:
            raise SwarmError("NO_CONSENT", "consent withdrawn") from None
        if not rec.active or rec.subject_id != subject or rec.purpose != SUPPORT_PURPOSE:
            raise SwarmError("NO_CONSENT", "consent withdrawn")
        data = self.snapshot(subject, rec.categories)
        data["ticket"] = {"ticketId": ticket_id, "description": ticket["description"]}
        self.ledger.audit.append(
            actor_id=staff_id,
            actor_class=ActorClass.HUMAN,
            action=Action.SUPPORT_ACCESS,
            subject_id=subject,
            instance_id=ticket_id,
            field_names=sorted(data),
            categories=sorted(c.value for c in rec.categories),
            detail="support view",
        )
        return data

    def forget_subject(self, subject: str) -> None:
        with self._lock:
            for tid in [t for t, s in self._tickets.items() if s == subject]:
                del self._tickets[tid]
