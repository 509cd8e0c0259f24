"""Citizen medical records: upload, download, delete. Every call is audited."""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass

from .. import envelope
from ..errors import SwarmError
from ..ledger import Action, PrivacyLedger
from ..model import ActorClass, DataCategory, now_ms

RECORDS_PURPOSE = "records"
STORE_ACTOR = "record-store"
MAX_RECORD_SIZE = 16 * 1024 * 1024


@dataclass(frozen=True)
class MedicalRecord:
    record_id: str
    subject_id: str
    filename: str
    content: bytes
    uploaded_at_utc: int


class RecordStore:
    def __init__(self, ledger: PrivacyLedger):
        self.ledger = ledger
        self.store = ledger.store("records")
        self._owners: dict[str, str] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        for subject in self.store.subjects():
            for key in self.store.keys(subject):
                if key.endswith(".meta"):
                    self._owners[key[:-5]] = subject

    def _lock(self, record_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(record_id, threading.Lock())

    def _require_consent(self, subject: str) -> None:
        if not self.ledger.consents.check(subject, RECORDS_PURPOSE, [DataCategory.MEDICAL]):
            raise SwarmError("NO_CONSENT", f"{subject} for {RECORDS_PURPOSE}")

    def _audit(self, action: Action, subject: str, record_id: str, fields, detail: str = "") -> None:
        self.ledger.audit.append(
            actor_id=STORE_ACTOR,
            actor_class=ActorClass.SOFTWARE,
            action=action,
            subject_id=subject,
            instance_id=record_id,
            field_names=fields,
            categories=[DataCategory.MEDICAL.value],
            detail=detail,
        )

    def _owned(self, subject: str, record_id: str, action: Action) -> None:
        owner = self._owners.get(record_id)
        if owner is None:
            raise SwarmError("UNKNOWN_RECORD", record_id)
        if owner != subject:
            # the owner's trail shows the refused attempt; nothing was disclosed
            self._audit(action, owner, record_id, (), detail="DENIED NOT_OWNER")
            raise SwarmError("NOT_OWNER", record_id)

    def upload(self, subject: str, filename: str, content: bytes) -> str:
        self._require_consent(subject)
        if len(content) > MAX_RECORD_SIZE:
            raise SwarmError("LENGTH_OVERFLOW", str(len(content)))
        record_id = uuid.uuid4().hex
        with self._lock(record_id), self.ledger.write_lock:
            self._audit(Action.WRITE, subject, record_id, ("filename", "content"), detail=f"{len(content)} bytes")
            meta = {"recordId": record_id, "subjectId": subject, "filename": filename, "uploadedAtUtc": now_ms()}
            self.store.put(subject, record_id, content)
            self.store.put(subject, record_id + ".meta", envelope.encode(meta))
            self._owners[record_id] = subject
        return record_id

    def download(self, subject: str, record_id: str) -> bytes:
        self._require_consent(subject)
        with self._lock(record_id):
            self._owned(subject, record_id, Action.READ)
            self._audit(Action.READ, subject, record_id, ("content",))
            return self.store.get(subject, record_id)

    def delete(self, subject: str, record_id: str) -> None:
        self._require_consent(subject)
        with self._lock(record_id), self.ledger.write_lock:
            self._owned(subject, record_id, Action.DELETE)
            self._audit(Action.DELETE, subject, record_id, ("filename", "content"))
            self.store.delete(subject, record_id)
            self.store.delete(subject, record_id + ".meta")
            self._owners.pop(record_id, None)

    def list_for(self, subject: str) -> list[dict]:
        """Metadata only (id, filename, size), used by the support snapshot."""
        out = []
        for key in self.store.keys(subject):
            if key.endswith(".meta"):
                meta = envelope.decode(self.store.get(subject, key))
                meta["size"] = len(self.store.get(subject, key[:-5]))
                out.append(meta)
        return out

    def forget_subject(self, subject: str) -> None:
        with self._guard:
            for rid in [r for r, s in self._owners.items() if s == subject]:
                del self._owners[rid]
