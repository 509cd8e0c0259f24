"""Purpose- and category-scoped consent grants."""

from __future__ import annotations

import secrets
import threading
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Optional

from .. import envelope
from ..errors import SwarmError
from ..model import ActorClass, DataCategory, now_ms
from .audit import Action, AuditLog

REGISTRY_ACTOR = "consent-registry"


@dataclass(frozen=True)
class ConsentRecord:
    token: str
    subject_id: str
    purpose: str
    categories: frozenset[DataCategory]
    granted_at_utc: int
    revoked_at_utc: Optional[int] = None

    @property
    def active(self) -> bool:
        return self.revoked_at_utc is None

    def covers(self, subject_id: str, purpose: str, categories: Iterable) -> bool:
        wanted = {DataCategory(c) for c in categories}
        return self.active and self.subject_id == subject_id and self.purpose == purpose and wanted <= self.categories

    def to_envelope(self) -> dict:
        return {
            "token": self.token,
            "subjectId": self.subject_id,
            "purpose": self.purpose,
            "categories": sorted(c.value for c in self.categories),
            "grantedAtUtc": self.granted_at_utc,
            "revokedAtUtc": self.revoked_at_utc,
        }

    @classmethod
    def from_envelope(cls, doc: Mapping[str, Any]) -> "ConsentRecord":
        return cls(
            doc["token"], doc["subjectId"], doc["purpose"],
            frozenset(DataCategory(c) for c in doc["categories"]),
            doc["grantedAtUtc"], doc["revokedAtUtc"],
        )


class ConsentRegistry:
    """Linearizable registry; every grant and revocation is audited first."""

    def __init__(self, audit: AuditLog, store):
        self.audit = audit
        self.store = store
        self._lock = threading.RLock()
        self._records: dict[str, ConsentRecord] = {}
        for subject in store.subjects():
            for token in store.keys(subject):
                rec = ConsentRecord.from_envelope(envelope.decode(store.get(subject, token)))
                self._records[rec.token] = rec

    def _persist(self, rec: ConsentRecord) -> None:
        self.store.put(rec.subject_id, rec.token, envelope.encode(rec.to_envelope()))

    def grant(self, subject_id: str, purpose: str, categories: Iterable) -> str:
        cats = frozenset(DataCategory(c) for c in categories)
        if not cats:
            raise SwarmError("EMPTY_CATEGORIES", "a grant needs at least one category")
        with self._lock:
            rec = ConsentRecord(secrets.token_urlsafe(18), subject_id, purpose, cats, now_ms())
            self.audit.append(
                actor_id=REGISTRY_ACTOR,
                actor_class=ActorClass.SOFTWARE,
                action=Action.CONSENT_GRANT,
                subject_id=subject_id,
                categories=[c.value for c in cats],
                detail=f"purpose={purpose}",
            )
            self._records[rec.token] = rec
            self._persist(rec)
            return rec.token

    def revoke(self, token: str) -> None:
        with self._lock:
            rec = self._records.get(token)
            if rec is None:
                raise SwarmError("UNKNOWN_TOKEN", token)
            if not rec.active:
                return
            self.audit.append(
                actor_id=REGISTRY_ACTOR,
                actor_class=ActorClass.SOFTWARE,
                action=Action.CONSENT_REVOKE,
                subject_id=rec.subject_id,
                categories=[c.value for c in rec.categories],
                detail=f"purpose={rec.purpose}",
            )
            rec = replace(rec, revoked_at_utc=now_ms())
            self._records[token] = rec
            self._persist(rec)

    def check(self, subject_id: str, purpose: str, categories: Iterable) -> bool:
        cats = list(categories)
        with self._lock:
            return any(r.covers(subject_id, purpose, cats) for r in self._records.values())

    def check_token(self, token: str, subject_id: str, purpose: str, categories: Iterable) -> bool:
        with self._lock:
            rec = self._records.get(token)
            return rec is not None and rec.covers(subject_id, purpose, categories)

    def record(self, token: str) -> ConsentRecord:
        with self._lock:
            try:
                return self._records[token]
            except KeyError:
                raise SwarmError("UNKNOWN_TOKEN", token) from None

    def records_for(self, subject_id: str) -> list[ConsentRecord]:
        with self._lock:
            return [r for r in self._records.values() if r.subject_id == subject_id]

    def erase_subject(self, subject_id: str) -> int:
        with self._lock:
            doomed = [t for t, r in self._records.items() if r.subject_id == subject_id]
            for t in doomed:
                del self._records[t]
            self.store.delete_subject(subject_id)
            return len(doomed)

    def scan(self, subject_id: str) -> int:
        with self._lock:
            held = sum(1 for r in self._records.values() if r.subject_id == subject_id)
        return held + self.store.scan(subject_id)
